"""Reference contextual token encoder.

A desk-scale stand-in for a pretrained encoder, with exact analytic
gradients:

    e_i = E[x_i]
    h_i = dropout(tanh(W_c e_i + W_l e_{i-1} + W_r e_{i+1} + b))

with zero padding outside the sentence. Two independent instances are used,
one inside the span detector and one as the entity typer.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .parameters import DTYPE, GradientSet, ParameterSet
from .vocabulary import UNK_ID

logger = logging.getLogger(__name__)

SUPPORTED_BACKENDS = ("neighbor_mixing",)


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and regularization settings of the reference encoder."""

    vocab_size: int
    d_emb: int = 32
    d_model: int = 32
    max_seq_len: int = 128
    dropout: float = 0.1
    init_range: float = 0.1
    freeze_embedding: bool = False
    backend: str = "neighbor_mixing"

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must include the reserved pad and unk ids")
        if self.d_emb < 1 or self.d_model < 1 or self.max_seq_len < 1:
            raise ValueError("encoder dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.backend not in SUPPORTED_BACKENDS:
            raise ValueError(
                f"unknown encoder backend '{self.backend}', "
                f"supported: {', '.join(SUPPORTED_BACKENDS)}"
            )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "EncoderConfig":
        return cls(**data)


class EncoderParams(ParameterSet):
    """Embedding table plus neighbor-mixing weights."""

    BUFFER_NAMES = ("embedding", "w_center", "w_left", "w_right", "bias")

    def __init__(
        self,
        config: EncoderConfig,
        embedding: np.ndarray,
        w_center: np.ndarray,
        w_left: np.ndarray,
        w_right: np.ndarray,
        bias: np.ndarray,
    ):
        self.config = config
        self.embedding = np.asarray(embedding, dtype=DTYPE)
        self.w_center = np.asarray(w_center, dtype=DTYPE)
        self.w_left = np.asarray(w_left, dtype=DTYPE)
        self.w_right = np.asarray(w_right, dtype=DTYPE)
        self.bias = np.asarray(bias, dtype=DTYPE)
        self._check_shapes()

    def _check_shapes(self) -> None:
        c = self.config
        expected = {
            "embedding": (c.vocab_size, c.d_emb),
            "w_center": (c.d_model, c.d_emb),
            "w_left": (c.d_model, c.d_emb),
            "w_right": (c.d_model, c.d_emb),
            "bias": (c.d_model,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ValueError(
                    f"encoder buffer '{name}' has shape {actual}, expected {shape}"
                )

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.BUFFER_NAMES}

    def frozen_names(self) -> frozenset:
        return frozenset({"embedding"}) if self.config.freeze_embedding else frozenset()


@dataclass
class EncoderOutput:
    """Per-token representations plus what backward() needs from the forward pass."""

    hidden: np.ndarray
    token_ids: np.ndarray
    embedded: np.ndarray
    activation: np.ndarray
    dropout_mask: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.hidden.shape[0]


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Uniform(-r, r) initialization, deterministic in seed."""
    rng = np.random.default_rng(seed)
    r = config.init_range

    def uniform(*shape: int) -> np.ndarray:
        return rng.uniform(-r, r, size=shape).astype(DTYPE)

    params = EncoderParams(
        config,
        embedding=uniform(config.vocab_size, config.d_emb),
        w_center=uniform(config.d_model, config.d_emb),
        w_left=uniform(config.d_model, config.d_emb),
        w_right=uniform(config.d_model, config.d_emb),
        bias=uniform(config.d_model),
    )
    logger.debug(
        f"Initialized encoder with {params.num_parameters} parameters (seed={seed})"
    )
    return params


def clone(params: ParameterSet) -> ParameterSet:
    """Independent deep copy of any parameter set."""
    return params.clone()


def axpy_update(params: ParameterSet, grads: GradientSet, step_size: float) -> None:
    """params <- params - step_size * grads (frozen buffers untouched)."""
    params.axpy_update(grads, step_size)


def _shift_right(matrix: np.ndarray) -> np.ndarray:
    """Row i holds row i-1 of the input (zeros in row 0)."""
    shifted = np.zeros_like(matrix)
    shifted[1:] = matrix[:-1]
    return shifted


def _shift_left(matrix: np.ndarray) -> np.ndarray:
    """Row i holds row i+1 of the input (zeros in the last row)."""
    shifted = np.zeros_like(matrix)
    shifted[:-1] = matrix[1:]
    return shifted


def encode(
    params: EncoderParams,
    tokens: Sequence[int],
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> EncoderOutput:
    """Contextual representations H (L x d_model) for a sentence of token ids.

    Args:
        params: Encoder parameters
        tokens: Token ids; ids outside the vocabulary map to UNK
        train_mode: Apply dropout (requires rng when dropout > 0)
        rng: Generator for the dropout mask

    Returns:
        EncoderOutput: Representations and the forward context
    """
    config = params.config
    token_ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if token_ids.shape[0] > config.max_seq_len:
        raise ValueError(
            f"sequence length {token_ids.shape[0]} "
            f"exceeds max_seq_len {config.max_seq_len}"
        )
    token_ids = np.where(
        (token_ids < 0) | (token_ids >= config.vocab_size), UNK_ID, token_ids
    )

    embedded = params.embedding[token_ids]
    pre_activation = (
        embedded @ params.w_center.T
        + _shift_right(embedded) @ params.w_left.T
        + _shift_left(embedded) @ params.w_right.T
        + params.bias
    )
    activation = np.tanh(pre_activation)

    mask = None
    hidden = activation
    if train_mode and config.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode encoding needs a random generator for dropout")
        keep = rng.random(activation.shape) >= config.dropout
        mask = keep.astype(DTYPE) / (1.0 - config.dropout)
        hidden = activation * mask

    return EncoderOutput(
        hidden=hidden,
        token_ids=token_ids,
        embedded=embedded,
        activation=activation,
        dropout_mask=mask,
    )


def backward(
    params: EncoderParams, output: EncoderOutput, grad_hidden: np.ndarray
) -> GradientSet:
    """Exact gradients of a scalar loss given dLoss/dH.

    Args:
        params: Parameters used in the forward pass
        output: The EncoderOutput returned by that forward pass
        grad_hidden: Upstream gradient, same shape as output.hidden

    Returns:
        GradientSet: Gradients keyed like EncoderParams.named_buffers()
    """
    grad_hidden = np.asarray(grad_hidden, dtype=DTYPE)
    if grad_hidden.shape != output.hidden.shape:
        raise ValueError(
            f"upstream gradient shape {grad_hidden.shape} does not match "
            f"hidden shape {output.hidden.shape}"
        )

    grad_activation = grad_hidden
    if output.dropout_mask is not None:
        grad_activation = grad_hidden * output.dropout_mask
    grad_pre = grad_activation * (1.0 - output.activation**2)

    embedded = output.embedded
    grads = {
        "w_center": grad_pre.T @ embedded,
        "w_left": grad_pre.T @ _shift_right(embedded),
        "w_right": grad_pre.T @ _shift_left(embedded),
        "bias": grad_pre.sum(axis=0),
    }

    grad_embedding = np.zeros_like(params.embedding)
    if not params.config.freeze_embedding:
        # Token i feeds position i (center), i+1 (as left neighbor), i-1 (as right).
        grad_embedded = (
            grad_pre @ params.w_center
            + _shift_left(grad_pre @ params.w_left)
            + _shift_right(grad_pre @ params.w_right)
        )
        np.add.at(grad_embedding, output.token_ids, grad_embedded)
    grads["embedding"] = grad_embedding

    return GradientSet({name: grads[name] for name in EncoderParams.BUFFER_NAMES})

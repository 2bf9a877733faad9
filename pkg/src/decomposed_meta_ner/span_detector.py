"""Class-agnostic entity span detection.

Spans are found by BIOES sequence labeling: a softmax head over the
contextual encoder, trained with mean token cross-entropy plus a
max-token term, and decoded with a Viterbi search that only enforces the
BIOES grammar (no learned transition scores).
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import encoder as enc
from .encoder import EncoderConfig, EncoderOutput, EncoderParams
from .episodes import LabeledSequence, TypedSpan
from .parameters import DTYPE, GradientSet, ParameterSet
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)

Span = Tuple[int, int]


class BioesLabel(IntEnum):
    """BIOES tags in canonical index order."""

    O = 0  # noqa: E741
    B = 1
    I = 2  # noqa: E741
    E = 3
    S = 4


NUM_LABELS = len(BioesLabel)

_STARTS = (BioesLabel.O, BioesLabel.B, BioesLabel.S)
_ENDS = (BioesLabel.O, BioesLabel.E, BioesLabel.S)
_NEXT = {
    BioesLabel.O: (BioesLabel.O, BioesLabel.B, BioesLabel.S),
    BioesLabel.B: (BioesLabel.I, BioesLabel.E),
    BioesLabel.I: (BioesLabel.I, BioesLabel.E),
    BioesLabel.E: (BioesLabel.O, BioesLabel.B, BioesLabel.S),
    BioesLabel.S: (BioesLabel.O, BioesLabel.B, BioesLabel.S),
}


def _allowed_matrix() -> np.ndarray:
    allowed = np.zeros((NUM_LABELS, NUM_LABELS), dtype=bool)
    for previous, following in _NEXT.items():
        for label in following:
            allowed[previous, label] = True
    return allowed


ALLOWED_TRANSITIONS = _allowed_matrix()
ALLOWED_START = np.isin(np.arange(NUM_LABELS), [int(label) for label in _STARTS])
ALLOWED_END = np.isin(np.arange(NUM_LABELS), [int(label) for label in _ENDS])


def is_valid_bioes(labels: Sequence[int]) -> bool:
    """True when the label sequence obeys the BIOES grammar."""
    if not len(labels):
        return True
    if not ALLOWED_START[labels[0]] or not ALLOWED_END[labels[-1]]:
        return False
    return all(ALLOWED_TRANSITIONS[a, b] for a, b in zip(labels[:-1], labels[1:]))


class DetectorParams(ParameterSet):
    """Span detector parameters: encoder plus the |C| x d_model softmax head."""

    def __init__(
        self, encoder: EncoderParams, head_weight: np.ndarray, head_bias: np.ndarray
    ):
        self.encoder = encoder
        self.head_weight = np.asarray(head_weight, dtype=DTYPE)
        self.head_bias = np.asarray(head_bias, dtype=DTYPE)
        expected = (NUM_LABELS, encoder.config.d_model)
        if self.head_weight.shape != expected or self.head_bias.shape != (NUM_LABELS,):
            raise ValueError(
                f"head shapes {self.head_weight.shape}/{self.head_bias.shape} "
                f"do not match {expected}/({NUM_LABELS},)"
            )

    def named_buffers(self) -> Dict[str, np.ndarray]:
        encoder = self.encoder.named_buffers()
        buffers = {f"encoder.{name}": value for name, value in encoder.items()}
        buffers["head.weight"] = self.head_weight
        buffers["head.bias"] = self.head_bias
        return buffers

    def frozen_names(self) -> frozenset:
        return frozenset(f"encoder.{name}" for name in self.encoder.frozen_names())


def init_detector(config: EncoderConfig, seed: int) -> DetectorParams:
    """Fresh detector with a uniform(-r, r) head."""
    rng = np.random.default_rng(seed + 1)
    r = config.init_range
    return DetectorParams(
        enc.init_params(config, seed),
        head_weight=rng.uniform(-r, r, size=(NUM_LABELS, config.d_model)),
        head_bias=np.zeros(NUM_LABELS, dtype=DTYPE),
    )


@dataclass
class LabelDistributionMatrix:
    """Per-token label distributions p(x_i) and their logs."""

    probs: np.ndarray
    log_probs: np.ndarray

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass
class DetectorForward:
    """Forward pass of the detector, kept for backpropagation."""

    distribution: LabelDistributionMatrix
    encoder_output: EncoderOutput


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax via log-sum-exp."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def bioes_encode(spans: Sequence, length: int) -> List[BioesLabel]:
    """BIOES labels for untyped or typed spans over a sentence of given length.

    Raises:
        ValueError: Spans overlap or fall outside the sentence
    """
    labels = [BioesLabel.O] * length
    for start, end in sorted(_bounds(span) for span in spans):
        if not 0 <= start <= end < length:
            raise ValueError(f"span ({start}, {end}) outside [0, {length - 1}]")
        if any(labels[i] != BioesLabel.O for i in range(start, end + 1)):
            raise ValueError(f"span ({start}, {end}) overlaps another span")
        if start == end:
            labels[start] = BioesLabel.S
        else:
            labels[start] = BioesLabel.B
            for i in range(start + 1, end):
                labels[i] = BioesLabel.I
            labels[end] = BioesLabel.E
    return labels


def bioes_decode(labels: Sequence[int]) -> List[Span]:
    """Spans from BIOES labels.

    Well-formed B..E runs and S labels become spans; dangling B/I fragments
    without a closing E are dropped. Never raises.
    """
    spans: List[Span] = []
    open_start: Optional[int] = None
    for index, raw in enumerate(labels):
        label = BioesLabel(int(raw))
        if label == BioesLabel.S:
            spans.append((index, index))
            open_start = None
        elif label == BioesLabel.B:
            open_start = index
        elif label == BioesLabel.E:
            if open_start is not None:
                spans.append((open_start, index))
            open_start = None
        elif label == BioesLabel.O:
            open_start = None
        # I keeps an open span open and is ignored otherwise.
    return spans


def _bounds(span) -> Span:
    if isinstance(span, TypedSpan):
        return span.bounds
    return (int(span[0]), int(span[1]))


def forward(
    params: DetectorParams,
    tokens: Sequence[int],
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> DetectorForward:
    """p(x_i) = softmax(W h_i + b) for every token."""
    output = enc.encode(params.encoder, tokens, train_mode=train_mode, rng=rng)
    logits = output.hidden @ params.head_weight.T + params.head_bias
    log_probs = log_softmax(logits)
    return DetectorForward(
        distribution=LabelDistributionMatrix(np.exp(log_probs), log_probs),
        encoder_output=output,
    )


def detection_loss(
    distribution: LabelDistributionMatrix, gold: Sequence[int], lam: float
) -> Tuple[float, np.ndarray]:
    """Mean token cross-entropy plus lam times the largest token cross-entropy.

    Args:
        distribution: Predicted label distributions
        gold: Gold BIOES label per token
        lam: Weight of the max term (>= 0)

    Returns:
        tuple: (loss, gradient of the loss with respect to the logits)
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    gold = np.asarray([int(label) for label in gold], dtype=np.int64)
    length = len(distribution)
    if gold.shape[0] != length:
        raise ValueError(f"{length} predictions but {gold.shape[0]} gold labels")
    if length == 0:
        return 0.0, np.zeros((0, NUM_LABELS), dtype=DTYPE)

    rows = np.arange(length)
    token_ce = -distribution.log_probs[rows, gold]
    worst = int(np.argmax(token_ce))
    loss = float(token_ce.mean() + lam * token_ce[worst])

    delta = distribution.probs.copy()
    delta[rows, gold] -= 1.0
    grad_logits = delta / length
    grad_logits[worst] += lam * delta[worst]
    return loss, grad_logits


def detector_backward(
    params: DetectorParams, forward_pass: DetectorForward, grad_logits: np.ndarray
) -> GradientSet:
    """Gradients over all detector buffers given dLoss/dlogits."""
    hidden = forward_pass.encoder_output.hidden
    grads = enc.backward(
        params.encoder, forward_pass.encoder_output, grad_logits @ params.head_weight
    ).prefixed("encoder.")
    grads.buffers["head.weight"] = grad_logits.T @ hidden
    grads.buffers["head.bias"] = grad_logits.sum(axis=0)
    return grads


def viterbi_decode(log_probs: np.ndarray) -> List[BioesLabel]:
    """Best BIOES-valid label sequence under per-token log-probabilities.

    Ties go to the lowest canonical label index, both for backpointers and for
    the final label.
    """
    log_probs = np.asarray(log_probs, dtype=DTYPE)
    length = log_probs.shape[0] if log_probs.ndim == 2 else 0
    if length == 0:
        return []

    transition = np.where(ALLOWED_TRANSITIONS, 0.0, -np.inf)
    score = np.where(ALLOWED_START, log_probs[0], -np.inf)
    backpointers = np.zeros((length, NUM_LABELS), dtype=np.int64)
    for t in range(1, length):
        candidates = score[:, None] + transition
        backpointers[t] = np.argmax(candidates, axis=0)
        score = candidates[backpointers[t], np.arange(NUM_LABELS)] + log_probs[t]

    final = np.where(ALLOWED_END, score, -np.inf)
    best = int(np.argmax(final))
    path = [best]
    for t in range(length - 1, 0, -1):
        best = int(backpointers[t, best])
        path.append(best)
    path.reverse()
    return [BioesLabel(label) for label in path]


def detect_spans(params: DetectorParams, tokens: Sequence[int]) -> List[Span]:
    """Untyped entity spans for one sentence (eval mode)."""
    distribution = forward(params, tokens).distribution
    return bioes_decode(viterbi_decode(distribution.log_probs))


class DetectionTaskLoss:
    """TaskLoss for the span detector over a list of sentences.

    The loss is the mean of per-sentence detection losses; dropout masks come
    from the loss's own generator, so a fixed seed reproduces every call.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        lam: float,
        rng: Optional[np.random.Generator] = None,
        train_mode: bool = True,
    ):
        if lam < 0:
            raise ValueError(f"lambda must be non-negative, got {lam}")
        self.vocabulary = vocabulary
        self.lam = lam
        self.rng = rng
        self.train_mode = train_mode and rng is not None

    def with_lambda(self, lam: float) -> "DetectionTaskLoss":
        """Same vocabulary and generator, different max-term weight."""
        return DetectionTaskLoss(self.vocabulary, lam, self.rng, self.train_mode)

    def __call__(
        self, params: DetectorParams, sentences: Sequence[LabeledSequence]
    ) -> Tuple[float, GradientSet]:
        grads = params.zero_gradients()
        if not sentences:
            return 0.0, grads
        total = 0.0
        for sentence in sentences:
            token_ids = self.vocabulary.encode(sentence.tokens)
            forward_pass = forward(params, token_ids, self.train_mode, self.rng)
            gold = bioes_encode(sentence.spans, len(sentence))
            distribution = forward_pass.distribution
            loss, grad_logits = detection_loss(distribution, gold, self.lam)
            total += loss
            grads.add_(detector_backward(params, forward_pass, grad_logits))
        scale = 1.0 / len(sentences)
        return total * scale, grads.scale_(scale)

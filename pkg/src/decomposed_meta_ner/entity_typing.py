"""Prototypical-network entity typing with MAML-enhanced prototypes.

Detected spans are typed by comparing their mean-pooled representation with
one prototype per episode type (the mean of that type's support spans).
The MAML variant first adapts the typing encoder on the support set, using
every support span as a query item against prototypes built from the same
support set, then recomputes the prototypes with the adapted encoder.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import encoder as enc
from .encoder import EncoderConfig, EncoderOutput, EncoderParams
from .episodes import Episode, EpisodeSet, LabeledSequence
from .errors import DataError
from .maml_engine import AdaptedParams, MetaConfig, fine_tune, inner_update, meta_step
from .optim import Optimizer
from .parameters import DTYPE, GradientSet, ParameterSet
from .vocabulary import Vocabulary

if TYPE_CHECKING:
    from .config import TypingStageConfig

logger = logging.getLogger(__name__)

Span = Tuple[int, int]


class Distance(str, Enum):
    """Prototype distance functions."""

    SQUARED_EUCLIDEAN = "squared_euclidean"
    EUCLIDEAN = "euclidean"
    NEGATIVE_DOT = "dot"


class TyperParams(ParameterSet):
    """Typing encoder parameters (independent of the detector's encoder)."""

    def __init__(self, encoder: EncoderParams):
        self.encoder = encoder

    def named_buffers(self) -> Dict[str, np.ndarray]:
        buffers = self.encoder.named_buffers()
        return {f"encoder.{name}": value for name, value in buffers.items()}

    def frozen_names(self) -> frozenset:
        return frozenset(f"encoder.{name}" for name in self.encoder.frozen_names())


def init_typer(config: EncoderConfig, seed: int) -> TyperParams:
    return TyperParams(enc.init_params(config, seed))


@dataclass
class SpanRepresentation:
    """Mean of the token representations of one span."""

    vector: np.ndarray
    sentence_id: int
    start: int
    end: int


@dataclass
class TypingDecision:
    """Typing outcome for one detected span."""

    span: Span
    predicted_type: str
    probabilities: np.ndarray
    similarity: float


def span_representation(
    hidden: Union[np.ndarray, EncoderOutput], start: int, end: int, sentence_id: int = 0
) -> SpanRepresentation:
    """s = mean of rows start..end (inclusive) of H."""
    matrix = hidden.hidden if isinstance(hidden, EncoderOutput) else np.asarray(hidden)
    if not 0 <= start <= end < matrix.shape[0]:
        raise ValueError(f"span ({start}, {end}) outside [0, {matrix.shape[0] - 1}]")
    vector = matrix[start : end + 1].mean(axis=0)
    return SpanRepresentation(vector, sentence_id, start, end)


def distances(vector: np.ndarray, prototypes: np.ndarray, kind: Distance) -> np.ndarray:
    """d(c_k, s) for every prototype row."""
    kind = Distance(kind)
    if kind is Distance.NEGATIVE_DOT:
        return -(prototypes @ vector)
    squared = ((prototypes - vector) ** 2).sum(axis=1)
    if kind is Distance.EUCLIDEAN:
        return np.sqrt(squared)
    return squared


def _distance_grads(
    vector: np.ndarray, prototypes: np.ndarray, kind: Distance
) -> Tuple[np.ndarray, np.ndarray]:
    """dd_k/ds (N x d) and dd_k/dc_k (N x d)."""
    kind = Distance(kind)
    if kind is Distance.NEGATIVE_DOT:
        return -prototypes, -np.broadcast_to(vector, prototypes.shape).copy()
    diff = vector - prototypes
    if kind is Distance.EUCLIDEAN:
        norms = np.sqrt((diff**2).sum(axis=1, keepdims=True))
        safe = np.where(norms > 0, norms, 1.0)
        diff = np.where(norms > 0, diff / safe, 0.0)
        return diff, -diff
    return 2.0 * diff, -2.0 * diff


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class _SpanItem:
    sentence: int
    start: int
    end: int
    entity_type: str
    vector: np.ndarray


@dataclass
class _EncodedSentences:
    """Sentences encoded under one parameter state, with their gold span items."""

    outputs: List[EncoderOutput]
    items: List[_SpanItem]

    @classmethod
    def build(
        cls,
        params: TyperParams,
        sentences: Sequence[LabeledSequence],
        vocabulary: Vocabulary,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> "_EncodedSentences":
        outputs, items = [], []
        for index, sentence in enumerate(sentences):
            output = enc.encode(
                params.encoder, vocabulary.encode(sentence.tokens), train_mode, rng
            )
            outputs.append(output)
            for span in sentence.spans:
                vector = span_representation(output, span.start, span.end).vector
                items.append(
                    _SpanItem(index, span.start, span.end, span.entity_type, vector)
                )
        return cls(outputs, items)


@dataclass
class PrototypeSet:
    """One prototype per episode type, in the episode's declared type order."""

    types: Tuple[str, ...]
    vectors: np.ndarray
    counts: Tuple[int, ...]
    support_id: str = ""
    _support: Optional[_EncodedSentences] = field(default=None, repr=False)
    _members: List[List[int]] = field(default_factory=list, repr=False)

    def __getitem__(self, entity_type: str) -> np.ndarray:
        return self.vectors[self.types.index(entity_type)]

    def __len__(self) -> int:
        return len(self.types)

    def __iter__(self) -> Iterator[str]:
        return iter(self.types)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return zip(self.types, self.vectors)


def _prototypes_from_encoded(
    encoded: _EncodedSentences, types: Sequence[str], support_id: str = ""
) -> PrototypeSet:
    members: List[List[int]] = [[] for _ in types]
    position = {entity_type: k for k, entity_type in enumerate(types)}
    for index, item in enumerate(encoded.items):
        if item.entity_type in position:
            members[position[item.entity_type]].append(index)
    for entity_type, indices in zip(types, members):
        if not indices:
            raise DataError(f"type '{entity_type}' has no support spans")
    vectors = np.stack(
        [
            np.mean([encoded.items[i].vector for i in indices], axis=0)
            for indices in members
        ]
    )
    return PrototypeSet(
        tuple(types),
        vectors,
        tuple(len(indices) for indices in members),
        support_id=support_id,
        _support=encoded,
        _members=members,
    )


def compute_prototypes(
    params: TyperParams,
    support: Sequence[LabeledSequence],
    types: Sequence[str],
    vocabulary: Vocabulary,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    support_id: str = "",
) -> PrototypeSet:
    """c_k = mean representation of the support spans of type k.

    Raises:
        DataError: A type has no support span
    """
    encoded = _EncodedSentences.build(params, support, vocabulary, train_mode, rng)
    return _prototypes_from_encoded(encoded, types, support_id)


def typing_distribution(
    span: Union[SpanRepresentation, np.ndarray],
    protos: PrototypeSet,
    distance: Distance = Distance.SQUARED_EUCLIDEAN,
) -> np.ndarray:
    """softmax(-d(c_k, s)) over the episode types."""
    vector = span.vector if isinstance(span, SpanRepresentation) else np.asarray(span)
    if len(protos) == 0:
        raise ValueError("no prototypes")
    return np.exp(_log_softmax(-distances(vector, protos.vectors, distance)))


def typing_loss(
    params: TyperParams,
    protos: PrototypeSet,
    query: Sequence[LabeledSequence],
    vocabulary: Vocabulary,
    distance: Distance = Distance.SQUARED_EUCLIDEAN,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    leave_one_out: bool = False,
    query_is_support: bool = False,
) -> Tuple[float, GradientSet]:
    """Sum over query spans of -log p(gold type), with gradients over gamma.

    Gradients flow through the query span representations and through the
    prototypes' support encodings. With query_is_support the support spans
    themselves are the query items (sharing the support forward pass).

    Raises:
        ValueError: A query span's type has no prototype
    """
    support = protos._support
    if support is None:
        raise ValueError("prototypes were built without a support encoding")
    if query_is_support:
        queries = support
    else:
        queries = _EncodedSentences.build(params, query, vocabulary, train_mode, rng)

    support_grads = [np.zeros_like(item.vector) for item in support.items]
    query_grads = (
        support_grads
        if query_is_support
        else [np.zeros_like(item.vector) for item in queries.items]
    )
    total = 0.0
    for q_index, item in enumerate(queries.items):
        if item.entity_type not in protos.types:
            raise ValueError(f"gold type '{item.entity_type}' has no prototype")
        gold = protos.types.index(item.entity_type)
        members = [list(m) for m in protos._members]
        if leave_one_out and query_is_support and len(members[gold]) > 1:
            members[gold] = [i for i in members[gold] if i != q_index]
        prototypes = np.stack(
            [np.mean([support.items[i].vector for i in m], axis=0) for m in members]
        )
        log_p = _log_softmax(-distances(item.vector, prototypes, distance))
        total -= float(log_p[gold])

        # dL/dd_k = p_k - 1[k = gold]
        grad_d = np.exp(log_p)
        grad_d[gold] -= 1.0
        dd_ds, dd_dc = _distance_grads(item.vector, prototypes, distance)
        query_grads[q_index] += grad_d @ dd_ds
        for k, m in enumerate(members):
            share = grad_d[k] * dd_dc[k] / len(m)
            for i in m:
                support_grads[i] += share

    grads = params.zero_gradients()
    grads.add_(_encoder_grads(params, support, support_grads))
    if not query_is_support:
        grads.add_(_encoder_grads(params, queries, query_grads))
    return total, grads


def _encoder_grads(
    params: TyperParams, encoded: _EncodedSentences, item_grads: List[np.ndarray]
) -> GradientSet:
    hidden_grads = [np.zeros_like(output.hidden) for output in encoded.outputs]
    for item, grad in zip(encoded.items, item_grads):
        hidden_grads[item.sentence][item.start : item.end + 1] += grad / (
            item.end - item.start + 1
        )
    grads = params.zero_gradients()
    for output, grad_hidden in zip(encoded.outputs, hidden_grads):
        if not np.any(grad_hidden):
            continue
        encoder_grads = enc.backward(params.encoder, output, grad_hidden)
        grads.add_(encoder_grads.prefixed("encoder."))
    return grads


def classify_spans(
    params: TyperParams,
    protos: PrototypeSet,
    tokens: Sequence[int],
    spans: Sequence[Span],
    min_similarity: Optional[float] = None,
    distance: Distance = Distance.SQUARED_EUCLIDEAN,
) -> List[TypingDecision]:
    """Type each span by its most probable prototype (eval mode).

    Spans whose similarity (-d) to the nearest prototype is below
    min_similarity are dropped; None disables the filter. Ties go to the
    earliest type in declared order.
    """
    if not spans:
        return []
    output = enc.encode(params.encoder, tokens)
    decisions = []
    for start, end in spans:
        vector = span_representation(output, start, end).vector
        dist = distances(vector, protos.vectors, distance)
        probabilities = np.exp(_log_softmax(-dist))
        best = int(np.argmax(probabilities))
        similarity = float(-dist.min())
        if min_similarity is not None and similarity < min_similarity:
            logger.debug(
                f"Dropping span ({start}, {end}): similarity {similarity:.3f} "
                f"< {min_similarity}"
            )
            continue
        decisions.append(
            TypingDecision((start, end), protos.types[best], probabilities, similarity)
        )
    return decisions


@dataclass
class TypingBatch:
    """Dataset handed to the typing TaskLoss."""

    support: Sequence[LabeledSequence]
    query: Sequence[LabeledSequence]
    types: Sequence[str]
    query_is_support: bool = False


def support_as_query(episode: Episode) -> TypingBatch:
    return TypingBatch(episode.support, episode.support, episode.types, True)


def typing_split(episode: Episode) -> Tuple[TypingBatch, TypingBatch]:
    """Inner loop on support-as-query, meta-loss on the true query set."""
    query = TypingBatch(episode.support, episode.query, episode.types)
    return support_as_query(episode), query


class PrototypicalTaskLoss:
    """TaskLoss for the typer: prototypes from support, cross-entropy on query."""

    def __init__(
        self,
        vocabulary: Vocabulary,
        distance: Distance = Distance.SQUARED_EUCLIDEAN,
        rng: Optional[np.random.Generator] = None,
        leave_one_out: bool = False,
    ):
        self.vocabulary = vocabulary
        self.distance = Distance(distance)
        self.rng = rng
        self.leave_one_out = leave_one_out

    def __call__(
        self, params: TyperParams, batch: TypingBatch
    ) -> Tuple[float, GradientSet]:
        train_mode = self.rng is not None
        protos = compute_prototypes(
            params, batch.support, batch.types, self.vocabulary, train_mode, self.rng
        )
        return typing_loss(
            params,
            protos,
            batch.query,
            self.vocabulary,
            self.distance,
            train_mode=train_mode,
            rng=self.rng,
            leave_one_out=self.leave_one_out,
            query_is_support=batch.query_is_support,
        )


def proto_inner_update(
    gamma: TyperParams,
    support: Sequence[LabeledSequence],
    types: Sequence[str],
    n: int,
    alpha: float,
    loss: PrototypicalTaskLoss,
    optimizer: str = "sgd",
    episode_id: str = "",
    weight_decay: float = 0.01,
    warmup_fraction: float = 0.0,
) -> AdaptedParams:
    """n steps with every support span as a query item.

    Prototypes are recomputed from the current parameters at each step.
    """
    batch = TypingBatch(support, support, types, query_is_support=True)
    return inner_update(
        gamma,
        loss,
        batch,
        n,
        alpha,
        optimizer=optimizer,
        episode_id=episode_id,
        weight_decay=weight_decay,
        warmup_fraction=warmup_fraction,
    )


def proto_meta_step(
    gamma: TyperParams,
    episodes: Sequence[Episode],
    loss: PrototypicalTaskLoss,
    config: MetaConfig,
    optimizer: Optimizer,
) -> float:
    """First-order MAML-ProtoNet update; returns the mean query loss."""
    return meta_step(gamma, episodes, loss, config, optimizer, split=typing_split)


def meta_test_typing(
    meta_gamma: TyperParams,
    support: Sequence[LabeledSequence],
    types: Sequence[str],
    query_tokens: Sequence[Sequence[int]],
    detected: Sequence[Sequence[Span]],
    vocabulary: Vocabulary,
    config: "TypingStageConfig",
    rng: Optional[np.random.Generator] = None,
    episode_id: str = "",
) -> List[List[TypingDecision]]:
    """Fine-tune on the support set, rebuild prototypes, type the detected spans.

    Args:
        meta_gamma: Meta-trained typer (never modified)
        support: Support sentences of the novel episode
        types: Episode types in declared order
        query_tokens: Token ids per query sentence
        detected: Detected spans per query sentence
        vocabulary: Token vocabulary
        config: Typing stage settings (fine-tune steps, distance, filter)
        rng: Dropout generator for fine-tuning
        episode_id: Used in diagnostics

    Returns:
        list: Typing decisions per query sentence
    """
    adapted = adapt_typer(
        meta_gamma, support, types, vocabulary, config, rng, episode_id
    )
    protos = compute_prototypes(
        adapted, support, types, vocabulary, support_id=episode_id
    )
    distance = Distance(config.distance)
    return [
        classify_spans(adapted, protos, tokens, spans, config.min_similarity, distance)
        for tokens, spans in zip(query_tokens, detected)
    ]


def adapt_typer(
    meta_gamma: TyperParams,
    support: Sequence[LabeledSequence],
    types: Sequence[str],
    vocabulary: Vocabulary,
    config: "TypingStageConfig",
    rng: Optional[np.random.Generator] = None,
    episode_id: str = "",
) -> TyperParams:
    """Meta-test fine-tuning of the typer on support-as-query."""
    loss = PrototypicalTaskLoss(vocabulary, config.distance, rng, config.leave_one_out)
    batch = TypingBatch(support, support, types, query_is_support=True)
    adapted = fine_tune(
        meta_gamma,
        batch,
        loss,
        config.finetune_steps,
        config.finetune_lr,
        optimizer=config.finetune_optimizer,
        episode_id=episode_id,
        weight_decay=config.meta.weight_decay,
        warmup_fraction=config.meta.warmup_fraction,
    )
    return adapted.params


def dump_embeddings(
    meta_gamma: TyperParams,
    episodes: EpisodeSet,
    path: Union[str, Path],
    vocabulary: Vocabulary,
    config: "TypingStageConfig",
    seed: int = 0,
) -> int:
    """Write one tab-separated line per query gold span for 2-D projection.

    Columns: episode id, sentence id, start, end, gold type, predicted type,
    then d_model floats of the span representation under the fine-tuned typer.

    Returns:
        int: Number of lines written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    written = 0
    with path.open("w", encoding="utf-8") as handle:
        for episode in episodes:
            adapted = adapt_typer(
                meta_gamma,
                episode.support,
                episode.types,
                vocabulary,
                config,
                rng,
                episode.episode_id,
            )
            protos = compute_prototypes(
                adapted, episode.support, episode.types, vocabulary
            )
            for sentence_id, sentence in enumerate(episode.query):
                output = enc.encode(adapted.encoder, vocabulary.encode(sentence.tokens))
                for span in sentence.spans:
                    vector = span_representation(output, span.start, span.end).vector
                    probabilities = typing_distribution(vector, protos, config.distance)
                    predicted = protos.types[int(np.argmax(probabilities))]
                    columns = [
                        episode.episode_id,
                        str(sentence_id),
                        str(span.start),
                        str(span.end),
                        span.entity_type,
                        predicted,
                    ]
                    columns.extend(repr(float(v)) for v in vector)
                    handle.write("\t".join(columns) + "\n")
                    written += 1
    logger.info(f"Wrote {written} span embeddings to {path}")
    return written

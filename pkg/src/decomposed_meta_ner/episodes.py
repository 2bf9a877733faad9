"""Episode data model.

This module defines the N-way K-shot episode types shared by every stage of
the toolkit, together with the conversion between flat per-token type tags
("O" or a type name) and typed spans.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

from .errors import EpisodeValidationError

logger = logging.getLogger(__name__)

OUTSIDE_TAG = "O"


class SplitTag(str, Enum):
    """Which part of a benchmark an episode set belongs to."""

    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


@dataclass(frozen=True, order=True)
class TypedSpan:
    """An entity mention covering tokens start..end (both inclusive)."""

    start: int
    end: int
    entity_type: str

    @property
    def bounds(self) -> Tuple[int, int]:
        """Untyped (start, end) pair."""
        return (self.start, self.end)

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class LabeledSequence:
    """A tokenized sentence with its (gold or predicted) entity spans."""

    tokens: Tuple[str, ...]
    spans: Tuple[TypedSpan, ...] = ()

    def __post_init__(self) -> None:
        # Accept lists from callers but store tuples so the value stays hashable.
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "spans", tuple(sorted(self.spans)))
        validate_spans(self.spans, len(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def tags(self) -> List[str]:
        """Flat per-token type tags."""
        return tags_from_spans(self.spans, len(self.tokens))

    @property
    def entity_types(self) -> List[str]:
        """Distinct span types in first-occurrence order."""
        seen: List[str] = []
        for span in self.spans:
            if span.entity_type not in seen:
                seen.append(span.entity_type)
        return seen

    @classmethod
    def from_tags(cls, tokens: Sequence[str], tags: Sequence[str]) -> "LabeledSequence":
        """Build a sequence from tokens and flat type tags."""
        if len(tokens) != len(tags):
            raise EpisodeValidationError(
                f"{len(tokens)} tokens but {len(tags)} tags",
            )
        return cls(tuple(tokens), tuple(spans_from_tags(tags)))


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task: support set, query set and its entity types."""

    support: Tuple[LabeledSequence, ...]
    query: Tuple[LabeledSequence, ...]
    types: Tuple[str, ...]
    episode_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        object.__setattr__(self, "types", tuple(self.types))
        validate_episode(self)

    @property
    def n_way(self) -> int:
        return len(self.types)

    def support_span_counts(self) -> dict:
        """Number of support spans per episode type, in type order."""
        counts = {entity_type: 0 for entity_type in self.types}
        for sequence in self.support:
            for span in sequence.spans:
                counts[span.entity_type] += 1
        return counts


@dataclass(frozen=True)
class EpisodeSet:
    """An immutable collection of episodes from one split."""

    episodes: Tuple[Episode, ...] = ()
    split_tag: SplitTag = SplitTag.TRAIN

    def __post_init__(self) -> None:
        object.__setattr__(self, "episodes", tuple(self.episodes))
        object.__setattr__(self, "split_tag", SplitTag(self.split_tag))

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __getitem__(self, index: int) -> Episode:
        return self.episodes[index]

    @property
    def type_universe(self) -> List[str]:
        """Union of episode types, sorted."""
        universe = set()
        for episode in self.episodes:
            universe.update(episode.types)
        return sorted(universe)


def spans_from_tags(tags: Sequence[str]) -> List[TypedSpan]:
    """Turn flat per-token type tags into spans.

    Maximal runs of identical non-"O" tags become one span each.

    Args:
        tags: One type name (or "O") per token

    Returns:
        list: Spans in left-to-right order
    """
    spans: List[TypedSpan] = []
    run_start: Optional[int] = None
    run_type: Optional[str] = None
    for index, tag in enumerate(list(tags) + [OUTSIDE_TAG]):
        if run_type is not None and tag != run_type:
            spans.append(TypedSpan(run_start, index - 1, run_type))
            run_start, run_type = None, None
        if tag != OUTSIDE_TAG and run_type is None:
            run_start, run_type = index, tag
    return spans


def tags_from_spans(spans: Iterable[TypedSpan], length: int) -> List[str]:
    """Inverse of spans_from_tags for valid, non-overlapping spans."""
    tags = [OUTSIDE_TAG] * length
    for span in spans:
        for index in range(span.start, span.end + 1):
            tags[index] = span.entity_type
    return tags


def validate_spans(spans: Sequence[TypedSpan], length: int) -> None:
    """Check span bounds and overlap for a sequence of the given length."""
    if length < 1:
        raise EpisodeValidationError("sequence has no tokens")
    previous_end = -1
    for span in sorted(spans):
        if not 0 <= span.start <= span.end < length:
            raise EpisodeValidationError(
                f"span ({span.start}, {span.end}) outside [0, {length - 1}]"
            )
        if span.start <= previous_end:
            raise EpisodeValidationError(
                f"span ({span.start}, {span.end}) overlaps a previous span"
            )
        if not span.entity_type or span.entity_type == OUTSIDE_TAG:
            raise EpisodeValidationError(
                f"span ({span.start}, {span.end}) has no entity type"
            )
        previous_end = span.end


def validate_episode(episode: Episode) -> None:
    """Check the closed-world and coverage invariants of an episode."""
    if not episode.types:
        raise EpisodeValidationError("episode declares no entity types")
    if len(set(episode.types)) != len(episode.types):
        raise EpisodeValidationError(f"duplicate entity types in {episode.types}")
    declared = set(episode.types)
    for part, sequences in (("support", episode.support), ("query", episode.query)):
        for index, sequence in enumerate(sequences):
            for span in sequence.spans:
                if span.entity_type not in declared:
                    raise EpisodeValidationError(
                        f"unknown type '{span.entity_type}' "
                        f"not in {list(episode.types)}",
                        sequence_id=f"{episode.episode_id}/{part}/{index}",
                    )
    counts = episode.support_span_counts()
    missing = [entity_type for entity_type, count in counts.items() if count == 0]
    if missing:
        raise EpisodeValidationError(
            f"types without support spans: {missing}",
            sequence_id=f"{episode.episode_id}/support",
        )


def check_disjoint_types(train: EpisodeSet, test: EpisodeSet) -> None:
    """Raise if a training and a test episode set share entity types."""
    shared = set(train.type_universe) & set(test.type_universe)
    if shared:
        raise EpisodeValidationError(
            f"{train.split_tag.value} and {test.split_tag.value} episodes share "
            f"types {sorted(shared)}"
        )
    logger.debug(
        f"Type sets disjoint: {len(train.type_universe)} "
        f"{train.split_tag.value} vs {len(test.type_universe)} {test.split_tag.value}"
    )

"""Exact-match span scoring and the two episode evaluation protocols.

A predicted span is a true positive only when start, end and type all match
a gold span; every gold span can be matched once. Counts are either pooled
over all episodes before P/R/F1 are taken (micro F1) or turned into P/R/F1
per episode and averaged.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .episodes import TypedSpan

logger = logging.getLogger(__name__)

SPAN_ONLY_TYPE = "ENTITY"


class Protocol(str, Enum):
    POOLED_MICRO = "pooled_micro"
    PER_EPISODE_MEAN = "per_episode_mean"


@dataclass
class PredictionRecord:
    """Predicted and gold spans of one query sentence."""

    episode_id: str
    sentence_id: int
    predicted: List[TypedSpan]
    gold: List[TypedSpan]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "sentence_id": self.sentence_id,
            "predicted": [[s.start, s.end, s.entity_type] for s in self.predicted],
            "gold": [[s.start, s.end, s.entity_type] for s in self.gold],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PredictionRecord":
        def spans(key: str) -> List[TypedSpan]:
            return [TypedSpan(int(s), int(e), str(t)) for s, e, t in data[key]]

        return cls(
            episode_id=str(data["episode_id"]),
            sentence_id=int(data["sentence_id"]),
            predicted=spans("predicted"),
            gold=spans("gold"),
        )

    def untyped(self) -> "PredictionRecord":
        """Same record with every type replaced by one placeholder."""
        return PredictionRecord(
            self.episode_id,
            self.sentence_id,
            [TypedSpan(s.start, s.end, SPAN_ONLY_TYPE) for s in self.predicted],
            [TypedSpan(s.start, s.end, SPAN_ONLY_TYPE) for s in self.gold],
        )


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    """P/R/F1 under one protocol; per-episode protocols add mean and std."""

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    protocol: Protocol
    episodes: int = 0
    f1_std: float = 0.0
    per_episode_f1: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["protocol"] = self.protocol.value
        return data


def prf(counts: Counts) -> Tuple[float, float, float]:
    """Precision, recall and F1 with every 0/0 taken as 0."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score_match(predicted: Iterable[TypedSpan], gold: Iterable[TypedSpan]) -> Counts:
    """One-to-one exact matching of predicted against gold spans.

    Each gold span absorbs at most one prediction; repeated predictions of an
    already matched span count as false positives.
    """
    unmatched = list(gold)
    counts = Counts()
    for span in predicted:
        if span in unmatched:
            unmatched.remove(span)
            counts.tp += 1
        else:
            counts.fp += 1
    counts.fn = len(unmatched)
    return counts


def record_counts(
    records: Iterable[PredictionRecord], span_only: bool = False
) -> Counts:
    total = Counts()
    for record in records:
        if span_only:
            record = record.untyped()
        total = total + score_match(record.predicted, record.gold)
    return total


def group_by_episode(
    records: Iterable[PredictionRecord],
) -> Dict[str, List[PredictionRecord]]:
    """Records grouped by episode id, in first-seen order."""
    groups: Dict[str, List[PredictionRecord]] = {}
    for record in records:
        groups.setdefault(record.episode_id, []).append(record)
    return groups


def evaluate_pooled(
    records: Sequence[PredictionRecord], span_only: bool = False
) -> MetricsReport:
    """Micro P/R/F1 over the counts pooled across every episode."""
    counts = record_counts(records, span_only)
    precision, recall, f1 = prf(counts)
    return MetricsReport(
        counts.tp,
        counts.fp,
        counts.fn,
        precision,
        recall,
        f1,
        Protocol.POOLED_MICRO,
        episodes=len(group_by_episode(records)),
    )


def evaluate_per_episode(
    records: Sequence[PredictionRecord], span_only: bool = False
) -> MetricsReport:
    """P/R/F1 inside each episode, then the arithmetic mean across episodes."""
    groups = group_by_episode(records)
    rows = [prf(record_counts(group, span_only)) for group in groups.values()]
    counts = record_counts(records, span_only)
    if not rows:
        return MetricsReport(
            counts.tp, counts.fp, counts.fn, 0.0, 0.0, 0.0, Protocol.PER_EPISODE_MEAN
        )
    table = np.array(rows, dtype=float)
    return MetricsReport(
        counts.tp,
        counts.fp,
        counts.fn,
        float(table[:, 0].mean()),
        float(table[:, 1].mean()),
        float(table[:, 2].mean()),
        Protocol.PER_EPISODE_MEAN,
        episodes=len(rows),
        f1_std=float(table[:, 2].std()),
        per_episode_f1=[float(v) for v in table[:, 2]],
    )


def evaluate(
    records: Sequence[PredictionRecord], protocol: Protocol, span_only: bool = False
) -> MetricsReport:
    if Protocol(protocol) is Protocol.POOLED_MICRO:
        return evaluate_pooled(records, span_only)
    return evaluate_per_episode(records, span_only)


def mean_std(values: Sequence[float]) -> Dict[str, Optional[float]]:
    """Mean and population standard deviation (0 for a single value)."""
    if not values:
        return {"mean": None, "std": None}
    array = np.asarray(values, dtype=float)
    return {"mean": float(array.mean()), "std": float(array.std())}

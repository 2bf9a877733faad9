"""Tests for exact-match scoring and the evaluation protocols."""

import pytest

from decomposed_meta_ner.episodes import TypedSpan
from decomposed_meta_ner.metrics import (
    Counts,
    PredictionRecord,
    Protocol,
    evaluate,
    evaluate_per_episode,
    evaluate_pooled,
    mean_std,
    prf,
    score_match,
)


def spans(*triples):
    return [TypedSpan(s, e, t) for s, e, t in triples]


def record_with_counts(episode_id, tp, fp, fn, sentence_id=0):
    """A record whose exact-match counts are (tp, fp, fn)."""
    matched = [(i, i, "person") for i in range(tp)]
    extra = [(100 + i, 100 + i, "person") for i in range(fp)]
    missed = [(200 + i, 200 + i, "person") for i in range(fn)]
    return PredictionRecord(
        episode_id, sentence_id, spans(*matched, *extra), spans(*matched, *missed)
    )


def test_two_of_three():
    gold = spans((0, 0, "person"), (2, 3, "location"), (5, 5, "person"))
    predicted = spans((0, 0, "person"), (2, 3, "location"), (5, 6, "person"))
    counts = score_match(predicted, gold)
    assert counts == Counts(2, 1, 1)
    for value in prf(counts):
        assert value == pytest.approx(2 / 3)


def test_zero_over_zero_is_zero():
    assert prf(Counts()) == (0.0, 0.0, 0.0)
    assert prf(Counts(0, 3, 0)) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize(
    "predicted,gold,expected",
    [
        # wrong type
        (spans((1, 1, "location")), spans((1, 1, "person")), Counts(0, 1, 1)),
        # boundary off by one
        (spans((1, 2, "person")), spans((1, 1, "person")), Counts(0, 1, 1)),
        # duplicate prediction matches once
        (
            spans((1, 1, "person"), (1, 1, "person")),
            spans((1, 1, "person")),
            Counts(1, 1, 0),
        ),
        ([], spans((0, 0, "person")), Counts(0, 0, 1)),
        ([], [], Counts()),
    ],
)
def test_score_match_cases(predicted, gold, expected):
    assert score_match(predicted, gold) == expected


def test_pooled_versus_per_episode():
    records = [record_with_counts("a", 1, 0, 1), record_with_counts("b", 1, 2, 0)]
    pooled = evaluate_pooled(records)
    assert (pooled.tp, pooled.fp, pooled.fn) == (2, 2, 1)
    assert pooled.precision == pytest.approx(0.5)
    assert pooled.recall == pytest.approx(2 / 3)
    assert pooled.f1 == pytest.approx(0.5714, abs=1e-4)
    assert pooled.episodes == 2

    per_episode = evaluate_per_episode(records)
    assert per_episode.per_episode_f1 == pytest.approx([2 / 3, 0.5])
    assert per_episode.f1 == pytest.approx(7 / 12)
    assert per_episode.f1_std == pytest.approx(1 / 12)


def test_protocols_diverge_with_uneven_episodes():
    records = [record_with_counts("big", 10, 0, 0), record_with_counts("bad", 0, 1, 1)]
    assert evaluate(records, Protocol.POOLED_MICRO).f1 == pytest.approx(10 / 11)
    assert evaluate(records, "per_episode_mean").f1 == pytest.approx(0.5)


def test_protocols_agree_on_single_episode():
    records = [
        record_with_counts("one", 3, 1, 2),
        record_with_counts("one", 1, 0, 1, 1),
    ]
    pooled = evaluate_pooled(records)
    per_episode = evaluate_per_episode(records)
    assert per_episode.episodes == 1
    assert per_episode.f1 == pytest.approx(pooled.f1)
    assert per_episode.precision == pytest.approx(pooled.precision)


def test_span_only_view_ignores_types():
    record = PredictionRecord(
        "e", 0, spans((0, 0, "location"), (2, 2, "person")), spans((0, 0, "person"))
    )
    assert evaluate_pooled([record]).tp == 0
    span_only = evaluate_pooled([record], span_only=True)
    assert (span_only.tp, span_only.fp, span_only.fn) == (1, 1, 0)


def test_empty_records():
    assert evaluate_pooled([]).f1 == 0.0
    report = evaluate_per_episode([])
    assert report.f1 == 0.0 and report.episodes == 0


def test_record_dict_round_trip():
    record = record_with_counts("e3", 1, 1, 1, sentence_id=4)
    data = record.to_dict()
    assert data["predicted"][0] == [0, 0, "person"]
    assert PredictionRecord.from_dict(data) == record


def test_report_to_dict():
    data = evaluate_pooled([record_with_counts("a", 1, 0, 0)]).to_dict()
    assert data["protocol"] == "pooled_micro"
    assert data["f1"] == 1.0


def test_mean_std():
    assert mean_std([]) == {"mean": None, "std": None}
    assert mean_std([0.5]) == {"mean": 0.5, "std": 0.0}
    summary = mean_std([0.2, 0.4])
    assert summary["mean"] == pytest.approx(0.3)
    assert summary["std"] == pytest.approx(0.1)

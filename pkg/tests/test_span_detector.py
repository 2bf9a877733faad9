"""Tests for BIOES coding, constrained Viterbi and the detection loss."""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decomposed_meta_ner import span_detector as sd
from decomposed_meta_ner.maml_engine import fine_tune
from decomposed_meta_ner.span_detector import BioesLabel

from .helpers import assert_gradients_close, numeric_gradient, sentence


@st.composite
def span_sets(draw, max_length=15):
    length = draw(st.integers(0, max_length))
    spans = []
    position = 0
    while position < length:
        if draw(st.booleans()):
            end = draw(st.integers(position, min(length - 1, position + 4)))
            spans.append((position, end))
            position = end + 1
        else:
            position += 1
    return spans, length


@settings(max_examples=500)
@given(span_sets())
def test_bioes_round_trip(data):
    spans, length = data
    labels = sd.bioes_encode(spans, length)
    assert sd.is_valid_bioes(labels)
    assert sd.bioes_decode(labels) == spans


def test_bioes_encode_examples():
    B, I, O, E, S = BioesLabel.B, BioesLabel.I, BioesLabel.O, BioesLabel.E, BioesLabel.S
    assert sd.bioes_encode([(1, 3), (5, 5)], 6) == [O, B, I, E, O, S]
    with pytest.raises(ValueError):
        sd.bioes_encode([(0, 2), (2, 3)], 5)
    with pytest.raises(ValueError):
        sd.bioes_encode([(4, 5)], 5)


def test_bioes_decode_drops_fragments():
    O, B, I, E, S = range(5)
    assert sd.bioes_decode([B, I, O, S]) == [(3, 3)]
    assert sd.bioes_decode([I, E, B, E]) == [(2, 3)]
    assert sd.bioes_decode([]) == []


def _all_valid_sequences(length):
    return np.array(
        [
            labels
            for labels in itertools.product(range(sd.NUM_LABELS), repeat=length)
            if sd.is_valid_bioes(labels)
        ]
    )


def test_viterbi_matches_exhaustive_search():
    valid = {length: _all_valid_sequences(length) for length in range(1, 7)}
    rng = np.random.default_rng(0)
    started = time.perf_counter()
    for trial in range(200):
        length = int(rng.integers(1, 7))
        log_probs = sd.log_softmax(rng.normal(size=(length, sd.NUM_LABELS)) * 3)
        scores = log_probs[np.arange(length), valid[length]].sum(axis=1)
        best = valid[length][int(np.argmax(scores))].tolist()
        assert [int(label) for label in sd.viterbi_decode(log_probs)] == best, trial
    assert time.perf_counter() - started < 5.0


def test_viterbi_tie_breaking_and_empty():
    uniform = np.zeros((3, sd.NUM_LABELS))
    assert sd.viterbi_decode(uniform) == [BioesLabel.O] * 3
    assert sd.viterbi_decode(np.zeros((0, sd.NUM_LABELS))) == []


def test_viterbi_repairs_invalid_argmax():
    # Token-wise argmax would be I, I which is not a valid sequence.
    log_probs = np.log(np.array([[0.1, 0.3, 0.4, 0.1, 0.1], [0.1, 0.1, 0.4, 0.3, 0.1]]))
    labels = sd.viterbi_decode(log_probs)
    assert sd.is_valid_bioes(labels)
    assert labels == [BioesLabel.B, BioesLabel.E]


def _distribution(probs):
    probs = np.asarray(probs, dtype=float)
    return sd.LabelDistributionMatrix(probs, np.log(probs))


def test_detection_loss_examples():
    dist = _distribution([[0.5, 0.2, 0.1, 0.1, 0.1], [0.25, 0.25, 0.2, 0.2, 0.1]])
    gold = [BioesLabel.O, BioesLabel.B]
    ce = np.array([-np.log(0.5), -np.log(0.25)])
    loss, _ = sd.detection_loss(dist, gold, lam=0.0)
    assert loss == pytest.approx(ce.mean())
    loss, _ = sd.detection_loss(dist, gold, lam=2.0)
    assert loss == pytest.approx(ce.mean() + 2.0 * ce.max())
    with pytest.raises(ValueError):
        sd.detection_loss(dist, gold, lam=-1.0)
    with pytest.raises(ValueError):
        sd.detection_loss(dist, gold[:1], lam=1.0)


def test_detection_loss_perfect_prediction():
    dist = _distribution([[1.0 - 4e-12] + [1e-12] * 4])
    loss, _ = sd.detection_loss(dist, [BioesLabel.O], lam=5.0)
    assert loss == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("lam", [2.0, 5.0])
def test_detector_gradients_match_finite_differences(tiny_config, vocabulary, lam):
    params = sd.init_detector(tiny_config, seed=5)
    sentences = [
        sentence("the alice visited paris", (1, 1, "x"), (3, 3, "x")),
        sentence("bob corp said", (0, 1, "x")),
    ]
    loss = sd.DetectionTaskLoss(vocabulary, lam)

    value, grads = loss(params, sentences)
    assert np.isfinite(value)
    for name in params.named_buffers():
        rows = ()
        if name == "encoder.embedding":
            ids = (vocabulary.encode(s.tokens) for s in sentences)
            rows = sorted({int(i) for encoded in ids for i in encoded})
        numeric = numeric_gradient(
            lambda: loss(params, sentences)[0], params, name, rows=rows
        )
        analytic = grads[name]
        if rows:
            analytic, numeric = analytic[rows], numeric[rows]
        assert_gradients_close(analytic, numeric)


def test_detection_task_loss_dropout_is_seeded(tiny_config, vocabulary):
    config = replace(tiny_config, dropout=0.3)
    params = sd.init_detector(config, seed=0)
    data = [sentence("the alice said", (1, 1, "x"))]
    first = sd.DetectionTaskLoss(vocabulary, 2.0, np.random.default_rng(4))
    second = sd.DetectionTaskLoss(vocabulary, 2.0, np.random.default_rng(4))
    assert first(params, data)[0] == second(params, data)[0]
    assert sd.DetectionTaskLoss(vocabulary, 2.0).train_mode is False


def test_detect_spans_is_valid(tiny_config, vocabulary):
    params = sd.init_detector(tiny_config, seed=0)
    tokens = vocabulary.encode("the alice visited paris today".split())
    spans = sd.detect_spans(params, tokens)
    labels = sd.bioes_encode(spans, len(tokens))
    assert sd.is_valid_bioes(labels)
    assert sd.detect_spans(params, tokens) == spans


def _constant_head(config, bias, seed=0):
    encoder = sd.init_detector(config, seed).encoder
    weight = np.zeros((sd.NUM_LABELS, config.d_model))
    return sd.DetectorParams(encoder, weight, np.asarray(bias, dtype=float))


def test_zero_head_gives_uniform_distribution(tiny_config, vocabulary):
    params = _constant_head(tiny_config, np.zeros(sd.NUM_LABELS))
    tokens = vocabulary.encode("the alice visited paris".split())
    distribution = sd.forward(params, tokens).distribution
    np.testing.assert_allclose(distribution.probs, np.full((4, 5), 0.2))
    gold = sd.bioes_encode([(1, 1)], 4)
    loss, _ = sd.detection_loss(distribution, gold, lam=3.0)
    assert loss == pytest.approx(4.0 * np.log(5.0))
    # all labels tie, so decoding falls back to O everywhere
    assert sd.detect_spans(params, tokens) == []


def test_saturated_bias_decides_every_token(tiny_config, vocabulary):
    tokens = vocabulary.encode("bob said with rome".split())
    singles = _constant_head(tiny_config, [0.0, 0.0, 0.0, 0.0, 30.0])
    assert sd.detect_spans(singles, tokens) == [(0, 0), (1, 1), (2, 2), (3, 3)]
    outside = _constant_head(tiny_config, [30.0, 0.0, 0.0, 0.0, 0.0])
    assert sd.detect_spans(outside, tokens) == []

    distribution = sd.forward(singles, tokens).distribution
    all_outside = [BioesLabel.O] * len(tokens)
    loss, _ = sd.detection_loss(distribution, all_outside, lam=2.0)
    assert loss == pytest.approx(30.0 * 3.0, rel=1e-6)
    all_single = [BioesLabel.S] * len(tokens)
    loss, _ = sd.detection_loss(distribution, all_single, lam=2.0)
    assert loss == pytest.approx(0.0, abs=1e-9)


@st.composite
def scored_sentences(draw):
    length = draw(st.integers(1, 8))
    logits = draw(
        st.lists(
            st.floats(-6.0, 6.0),
            min_size=length * sd.NUM_LABELS,
            max_size=length * sd.NUM_LABELS,
        )
    )
    labels = st.sampled_from(list(BioesLabel))
    gold = draw(st.lists(labels, min_size=length, max_size=length))
    return np.reshape(logits, (length, sd.NUM_LABELS)), gold


@settings(max_examples=200)
@given(scored_sentences(), st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_detection_loss_grows_with_lambda(data, first, second):
    logits, gold = data
    log_probs = sd.log_softmax(logits)
    distribution = sd.LabelDistributionMatrix(np.exp(log_probs), log_probs)
    low, high = sorted((first, second))
    assert (
        sd.detection_loss(distribution, gold, low)[0]
        <= sd.detection_loss(distribution, gold, high)[0]
    )


def test_detected_spans_never_overlap(tiny_config, vocabulary):
    rng = np.random.default_rng(11)
    found = 0
    for draw in range(200):
        params = sd.init_detector(tiny_config, seed=draw % 10)
        params.head_weight *= 30.0
        params.head_bias[:] = rng.normal(0.0, 2.0, sd.NUM_LABELS)
        length = int(rng.integers(1, 13))
        tokens = rng.integers(0, len(vocabulary), size=length).tolist()

        spans = sd.detect_spans(params, tokens)

        for start, end in spans:
            assert 0 <= start <= end < length
        for (_, previous_end), (next_start, _) in zip(spans, spans[1:]):
            assert previous_end < next_start
        found += len(spans)
    assert found > 0


def test_fine_tuning_memorizes_one_sentence(tiny_config, vocabulary):
    config = replace(tiny_config, d_emb=8, d_model=8)
    params = sd.init_detector(config, seed=2)
    target = sentence("the acme corp visited paris today", (1, 2, "x"), (4, 4, "x"))
    loss = sd.DetectionTaskLoss(vocabulary, 2.0)

    adapted = fine_tune(params, [target], loss, steps=300, alpha=0.05, weight_decay=0.0)

    tokens = vocabulary.encode(target.tokens)
    assert sd.detect_spans(adapted.params, tokens) == [(1, 2), (4, 4)]
    assert adapted.losses[-1] < 0.1 * adapted.losses[0]

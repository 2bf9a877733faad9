"""Tests for prototype typing, its loss gradients and meta-test typing."""

from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from decomposed_meta_ner import encoder as enc
from decomposed_meta_ner import entity_typing as et
from decomposed_meta_ner.config import TypingStageConfig
from decomposed_meta_ner.entity_typing import Distance, PrototypeSet, TypingBatch
from decomposed_meta_ner.episodes import Episode, EpisodeSet
from decomposed_meta_ner.errors import DataError
from decomposed_meta_ner.maml_engine import MetaConfig
from decomposed_meta_ner.optim import make_optimizer

from .helpers import assert_gradients_close, numeric_gradient, sentence


@pytest.fixture
def gamma(tiny_config):
    return et.init_typer(tiny_config, seed=7)


@pytest.fixture
def episode(person_location_episode):
    return person_location_episode


def test_prototypes_are_support_span_means(gamma, vocabulary, episode):
    support = episode.support
    protos = et.compute_prototypes(gamma, support, ("person", "location"), vocabulary)
    first = enc.encode(gamma.encoder, vocabulary.encode(support[0].tokens)).hidden
    second = enc.encode(gamma.encoder, vocabulary.encode(support[1].tokens)).hidden
    assert_allclose(protos["person"], (first[1] + second[0]) / 2, atol=1e-12)
    assert_allclose(protos["location"], (first[3] + second[3]) / 2, atol=1e-12)
    assert protos.counts == (2, 2)
    assert list(protos) == ["person", "location"]


def test_prototypes_ignore_support_order(gamma, vocabulary, episode):
    support = episode.support
    types = episode.types
    forward = et.compute_prototypes(gamma, support, types, vocabulary)
    backward = et.compute_prototypes(gamma, support[::-1], types, vocabulary)
    np.testing.assert_allclose(forward.vectors, backward.vectors, atol=1e-12)


def test_multi_token_span_representation():
    hidden = np.arange(12.0).reshape(4, 3)
    rep = et.span_representation(hidden, 1, 2, sentence_id=5)
    np.testing.assert_array_equal(rep.vector, [4.5, 5.5, 6.5])
    assert (rep.sentence_id, rep.start, rep.end) == (5, 1, 2)
    with pytest.raises(ValueError):
        et.span_representation(hidden, 2, 4)


def test_type_without_support_spans(gamma, vocabulary, episode):
    with pytest.raises(DataError, match="organization"):
        et.compute_prototypes(
            gamma,
            episode.support,
            ("person", "location", "organization"),
            vocabulary,
        )


def _protos(vectors):
    vectors = np.asarray(vectors, dtype=float)
    names = tuple(f"t{k}" for k in range(len(vectors)))
    return PrototypeSet(names, vectors, (1,) * len(vectors))


def test_distribution_invariant_to_translation():
    protos = _protos([[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]])
    span = np.array([0.2, 0.3])
    base = et.typing_distribution(span, protos)
    offset = np.array([1e3, -1e3])
    shifted = et.typing_distribution(span + offset, _protos(protos.vectors + offset))
    assert base.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_distribution_stable_for_large_distances():
    protos = _protos([[0.0, 0.0], [1e4, 1e4]])
    probabilities = et.typing_distribution(np.array([1e4, 1e4 - 1.0]), protos)
    assert np.all(np.isfinite(probabilities))
    assert int(np.argmax(probabilities)) == 1


@pytest.mark.parametrize("distance", list(Distance))
def test_argmax_preserved_under_scaling(distance):
    rng = np.random.default_rng(3)
    for _ in range(20):
        vectors = rng.normal(size=(4, 3))
        span = rng.normal(size=3)
        base = et.typing_distribution(span, _protos(vectors), distance)
        scaled = et.typing_distribution(3.0 * span, _protos(3.0 * vectors), distance)
        assert np.argmax(base) == np.argmax(scaled)


def test_single_type_gets_probability_one():
    probabilities = et.typing_distribution(np.array([5.0, -2.0]), _protos([[0.0, 0.0]]))
    np.testing.assert_array_equal(probabilities, [1.0])


def test_distance_kinds():
    protos = np.array([[0.0, 0.0], [3.0, 4.0]])
    span = np.zeros(2)
    np.testing.assert_allclose(et.distances(span, protos, "squared_euclidean"), [0, 25])
    np.testing.assert_allclose(et.distances(span, protos, Distance.EUCLIDEAN), [0, 5])
    np.testing.assert_allclose(et.distances(np.ones(2), protos, "dot"), [0, -7])


@pytest.mark.parametrize(
    "distance,query_is_support,leave_one_out",
    [
        (Distance.SQUARED_EUCLIDEAN, True, False),
        (Distance.SQUARED_EUCLIDEAN, False, False),
        (Distance.SQUARED_EUCLIDEAN, True, True),
        (Distance.EUCLIDEAN, False, False),
        (Distance.NEGATIVE_DOT, True, False),
    ],
)
def test_typing_loss_gradients(
    gamma, vocabulary, episode, distance, query_is_support, leave_one_out
):
    query = episode.support if query_is_support else episode.query
    batch = TypingBatch(episode.support, query, episode.types, query_is_support)
    loss = et.PrototypicalTaskLoss(vocabulary, distance, leave_one_out=leave_one_out)

    value, grads = loss(gamma, batch)
    assert value > 0
    sentences = list(episode.support) + list(query)
    rows = sorted({int(i) for s in sentences for i in vocabulary.encode(s.tokens)})
    for name in gamma.named_buffers():
        used = rows if name == "encoder.embedding" else ()
        numeric = numeric_gradient(
            lambda: loss(gamma, batch)[0], gamma, name, rows=used
        )
        analytic = grads[name]
        if used:
            analytic, numeric = analytic[used], numeric[used]
        assert_gradients_close(analytic, numeric)


def test_leave_one_out_raises_support_loss(gamma, vocabulary, episode):
    batch = et.support_as_query(episode)
    plain = et.PrototypicalTaskLoss(vocabulary)(gamma, batch)[0]
    held_out = et.PrototypicalTaskLoss(vocabulary, leave_one_out=True)(gamma, batch)[0]
    assert held_out > plain


def test_leave_one_out_keeps_singleton_types(gamma, vocabulary):
    support = (sentence("alice visited paris", (0, 0, "person"), (2, 2, "location")),)
    batch = TypingBatch(support, support, ("person", "location"), True)
    plain = et.PrototypicalTaskLoss(vocabulary)(gamma, batch)[0]
    held_out = et.PrototypicalTaskLoss(vocabulary, leave_one_out=True)(gamma, batch)[0]
    assert held_out == plain


def test_query_type_without_prototype(gamma, vocabulary, episode):
    query = (sentence("acme corp said", (0, 1, "organization")),)
    protos = et.compute_prototypes(gamma, episode.support, episode.types, vocabulary)
    with pytest.raises(ValueError, match="organization"):
        et.typing_loss(gamma, protos, query, vocabulary)


def test_classify_spans_and_similarity_filter(gamma, vocabulary, episode):
    protos = et.compute_prototypes(gamma, episode.support, episode.types, vocabulary)
    tokens = vocabulary.encode("near alice bob said".split())
    decisions = et.classify_spans(gamma, protos, tokens, [(1, 2), (3, 3)])
    assert [d.span for d in decisions] == [(1, 2), (3, 3)]
    for decision in decisions:
        assert decision.predicted_type in episode.types
        assert decision.probabilities.sum() == pytest.approx(1.0)
        assert decision.similarity <= 0.0
    assert et.classify_spans(gamma, protos, tokens, [(1, 2)], min_similarity=1.0) == []
    assert et.classify_spans(gamma, protos, tokens, []) == []


def _one_hot_typer(config, vocabulary, words):
    # h = tanh(e) for the listed words; neighbours do not mix
    embedding = np.zeros((config.vocab_size, config.d_emb))
    for axis, word in enumerate(words):
        embedding[vocabulary.encode([word])[0], axis] = 1.0
    mixing = np.zeros((config.d_model, config.d_emb))
    encoder = enc.EncoderParams(
        config,
        embedding,
        np.eye(config.d_model, config.d_emb),
        mixing,
        mixing.copy(),
        np.zeros(config.d_model),
    )
    return et.TyperParams(encoder)


def test_similarity_filter_on_placed_prototypes(tiny_config, vocabulary):
    params = _one_hot_typer(tiny_config, vocabulary, ["alice", "rome"])
    alice = np.tanh([1.0, 0.0, 0.0, 0.0, 0.0])
    rome = np.tanh([0.0, 1.0, 0.0, 0.0, 0.0])
    shift = np.array([0.0, 0.0, 0.5, 0.0, 0.0])
    vectors = np.stack([alice + shift, rome])
    protos = PrototypeSet(("person", "location"), vectors, (1, 1))
    tokens = vocabulary.encode("alice visited rome".split())
    spans = [(0, 0), (2, 2)]

    decisions = et.classify_spans(params, protos, tokens, spans)
    assert [d.predicted_type for d in decisions] == ["person", "location"]
    assert decisions[0].similarity == pytest.approx(-0.25)
    assert decisions[1].similarity == pytest.approx(0.0)

    kept = et.classify_spans(params, protos, tokens, spans, min_similarity=-0.1)
    assert [d.span for d in kept] == [(2, 2)]
    kept = et.classify_spans(params, protos, tokens, spans, min_similarity=-0.3)
    assert [d.span for d in kept] == spans
    assert et.classify_spans(params, protos, tokens, spans, min_similarity=0.1) == []


def test_single_type_has_zero_loss_and_gradient(gamma, vocabulary):
    support = (
        sentence("alice visited paris", (0, 0, "person")),
        sentence("bob said", (0, 0, "person")),
    )
    query = (sentence("near alice", (1, 1, "person")),)
    batch = TypingBatch(support, query, ("person",))
    value, grads = et.PrototypicalTaskLoss(vocabulary)(gamma, batch)
    assert value == 0.0
    for name in gamma.named_buffers():
        np.testing.assert_array_equal(grads[name], 0.0)


@pytest.mark.parametrize("inner_steps,inner_lr", [(0, 0.3), (2, 0.0)])
def test_proto_meta_step_without_adaptation_is_protonet_step(
    gamma, vocabulary, episode, inner_steps, inner_lr
):
    loss = et.PrototypicalTaskLoss(vocabulary)
    batch = TypingBatch(episode.support, episode.query, episode.types)
    value, grads = loss(gamma, batch)
    expected = {
        name: buffer - 0.1 * grads[name]
        for name, buffer in gamma.named_buffers().items()
    }
    config = MetaConfig(inner_steps=inner_steps, inner_lr=inner_lr, max_grad_norm=0.0)

    mean_loss = et.proto_meta_step(
        gamma, [episode], loss, config, make_optimizer("sgd", 0.1)
    )

    assert mean_loss == pytest.approx(value)
    for name, buffer in gamma.named_buffers().items():
        assert_allclose(buffer, expected[name], atol=1e-12)


def test_proto_inner_update_lowers_support_loss(gamma, vocabulary, episode):
    snapshot = gamma.clone()
    adapted = et.proto_inner_update(
        gamma,
        episode.support,
        episode.types,
        n=5,
        alpha=0.1,
        loss=et.PrototypicalTaskLoss(vocabulary),
    )
    assert gamma.bitwise_equal(snapshot)
    assert len(adapted.losses) == 5
    assert adapted.losses[-1] < adapted.losses[0]


def test_typing_split():
    support = (sentence("alice", (0, 0, "person")),)
    query = (sentence("bob", (0, 0, "person")),)
    inner, outer = et.typing_split(Episode(support, query, ("person",)))
    assert inner.query_is_support and inner.query == support
    assert not outer.query_is_support and outer.query == query


@pytest.mark.parametrize("steps", [0, 2])
def test_meta_test_typing_leaves_meta_params(gamma, vocabulary, episode, steps):
    snapshot = gamma.clone()
    config = TypingStageConfig(finetune_steps=steps)
    query_tokens = [vocabulary.encode(s.tokens) for s in episode.query]
    decisions = et.meta_test_typing(
        gamma,
        episode.support,
        episode.types,
        query_tokens,
        [[(1, 2)], []],
        vocabulary,
        config,
        np.random.default_rng(0),
        episode.episode_id,
    )
    assert gamma.bitwise_equal(snapshot)
    assert len(decisions) == 2
    assert [d.span for d in decisions[0]] == [(1, 2)]
    assert decisions[1] == []


def test_dump_embeddings(tmp_path, gamma, vocabulary, episode, tiny_config):
    config = replace(TypingStageConfig(), finetune_steps=1)
    path = tmp_path / "out" / "spans.tsv"
    written = et.dump_embeddings(
        gamma, EpisodeSet([episode]), path, vocabulary, config
    )
    lines = path.read_text().splitlines()
    assert written == len(lines) == 2
    fields = lines[0].split("\t")
    assert fields[:5] == ["ep0", "0", "1", "2", "person"]
    assert fields[5] in ("person", "location")
    assert len(fields) == 6 + tiny_config.d_model

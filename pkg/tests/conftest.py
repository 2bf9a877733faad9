"""Shared fixtures for the test suite."""

import pytest

from decomposed_meta_ner.encoder import EncoderConfig
from decomposed_meta_ner.episodes import Episode
from decomposed_meta_ner.vocabulary import Vocabulary

from .helpers import sentence

WORDS = [
    "the",
    "near",
    "said",
    "alice",
    "bob",
    "paris",
    "rome",
    "acme",
    "corp",
    "visited",
    "with",
    "today",
    "w1",
    "w2",
    "w3",
]


@pytest.fixture
def vocabulary() -> Vocabulary:
    return Vocabulary(WORDS)


@pytest.fixture
def tiny_config(vocabulary) -> EncoderConfig:
    return EncoderConfig(vocab_size=len(vocabulary), d_emb=4, d_model=5, dropout=0.0)


@pytest.fixture
def person_location_episode() -> Episode:
    support = (
        sentence("the alice visited paris today", (1, 1, "person"), (3, 3, "location")),
        sentence("bob said with rome", (0, 0, "person"), (3, 3, "location")),
    )
    query = (
        sentence("near alice bob said", (1, 2, "person")),
        sentence("w1 rome w2", (1, 1, "location")),
    )
    return Episode(support, query, ("person", "location"), episode_id="ep0")

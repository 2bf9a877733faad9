"""Greedy N-way K~2K-shot episode sampler.

Episodes are built the way the released few-shot NER benchmarks are: pick N
types, then add sentences whose spans keep every per-type count at or below
2K until every type has at least K spans. Sentences mentioning a type outside
the chosen N are never used, so episodes stay closed-world.
"""

import logging
from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from .episodes import Episode, EpisodeSet, LabeledSequence, SplitTag
from .errors import SamplerCapacityError

logger = logging.getLogger(__name__)

MAX_RETRIES = 100


class GreedyEpisodeSampler:
    """Samples episodes from a typed corpus.

    The corpus is indexed once; each call to sample() draws from a generator
    seeded with the given seed, so identical arguments give identical episodes.
    """

    def __init__(
        self, corpus: Sequence[LabeledSequence], max_retries: int = MAX_RETRIES
    ):
        """Initialize the sampler.

        Args:
            corpus: Sentences with typed spans
            max_retries: Attempts per episode before giving up
        """
        self.corpus = list(corpus)
        self.max_retries = max_retries
        self.sentence_types: List[Set[str]] = [
            set(sentence.entity_types) for sentence in self.corpus
        ]
        self.type_index: Dict[str, List[int]] = {}
        for index, types in enumerate(self.sentence_types):
            for entity_type in types:
                self.type_index.setdefault(entity_type, []).append(index)
        logger.debug(
            f"Sampler indexed {len(self.corpus)} sentences, "
            f"{len(self.type_index)} types"
        )

    def sample(
        self,
        n_way: int,
        k_shot: int,
        query_shots: int,
        n_episodes: int,
        seed: int,
        split_tag: SplitTag = SplitTag.TRAIN,
    ) -> EpisodeSet:
        """Draw n_episodes episodes.

        Args:
            n_way: Entity types per episode
            k_shot: Minimum support spans per type (at most 2K)
            query_shots: Minimum query spans per type (at most 2x)
            n_episodes: Number of episodes
            seed: Random seed
            split_tag: Split recorded on the returned set

        Returns:
            EpisodeSet: The sampled episodes

        Raises:
            SamplerCapacityError: The corpus cannot supply the requested shape
        """
        if n_way < 1 or k_shot < 1 or query_shots < 1:
            raise ValueError("n_way, k_shot and query_shots must be positive")
        eligible = sorted(
            entity_type
            for entity_type, indices in self.type_index.items()
            if len(indices) >= 2
        )
        if len(eligible) < n_way:
            raise SamplerCapacityError(
                f"corpus has {len(eligible)} types with at least two sentences, "
                f"{n_way}-way episodes requested"
            )

        rng = np.random.default_rng(seed)
        episodes = []
        for episode_index in range(n_episodes):
            episode = self._sample_one(rng, eligible, n_way, k_shot, query_shots)
            if episode is None:
                raise SamplerCapacityError(
                    f"could not build a {n_way}-way {k_shot}-shot episode in "
                    f"{self.max_retries} attempts (episode {episode_index})"
                )
            support, query, types = episode
            episodes.append(
                Episode(support, query, types, episode_id=str(episode_index))
            )
        logger.info(
            f"Sampled {len(episodes)} {n_way}-way {k_shot}~{2 * k_shot}-shot episodes "
            f"(seed={seed})"
        )
        return EpisodeSet(tuple(episodes), split_tag)

    def _sample_one(self, rng, eligible, n_way, k_shot, query_shots):
        for attempt in range(self.max_retries):
            chosen = [str(t) for t in rng.choice(eligible, size=n_way, replace=False)]
            allowed = set(chosen)
            candidates = [
                index
                for index, types in enumerate(self.sentence_types)
                if types and types <= allowed
            ]
            order = [candidates[i] for i in rng.permutation(len(candidates))]
            support = self._greedy_fill(order, chosen, k_shot, used=set())
            if support is None:
                continue
            query = self._greedy_fill(order, chosen, query_shots, used=set(support))
            if query is None:
                continue
            logger.debug(f"Episode built after {attempt + 1} attempt(s): {chosen}")
            return (
                tuple(self.corpus[i] for i in support),
                tuple(self.corpus[i] for i in query),
                tuple(chosen),
            )
        return None

    def _greedy_fill(
        self, order: List[int], types: List[str], shots: int, used: Set[int]
    ) -> Optional[List[int]]:
        counts = {entity_type: 0 for entity_type in types}
        picked: List[int] = []
        for index in order:
            if index in used:
                continue
            sentence_counts: Dict[str, int] = {}
            for span in self.corpus[index].spans:
                sentence_counts[span.entity_type] = (
                    sentence_counts.get(span.entity_type, 0) + 1
                )
            if any(counts[t] + c > 2 * shots for t, c in sentence_counts.items()):
                continue
            if not any(counts[t] < shots for t in sentence_counts):
                continue
            for entity_type, count in sentence_counts.items():
                counts[entity_type] += count
            picked.append(index)
            if all(count >= shots for count in counts.values()):
                return picked
        return None


def sample_episodes(
    corpus: Sequence[LabeledSequence],
    n_way: int,
    k_shot: int,
    query_shots: int,
    n_episodes: int,
    seed: int,
    split_tag: SplitTag = SplitTag.TRAIN,
) -> EpisodeSet:
    """Sample N-way K~2K-shot episodes from a corpus (see GreedyEpisodeSampler)."""
    sampler = GreedyEpisodeSampler(corpus)
    return sampler.sample(n_way, k_shot, query_shots, n_episodes, seed, split_tag)

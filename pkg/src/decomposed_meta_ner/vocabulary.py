"""Token vocabulary for the reference encoder."""

import logging
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .episodes import EpisodeSet, LabeledSequence

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1


class Vocabulary:
    """Maps token strings to ids; unknown tokens map to UNK_ID."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.id_to_token: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.token_to_id: Dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for token in tokens:
            self.add(token)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        """Token ids for a sentence."""
        return np.array(
            [self.token_to_id.get(token, UNK_ID) for token in tokens], dtype=np.int64
        )

    def to_list(self) -> List[str]:
        """Tokens in id order, excluding the two reserved entries."""
        return self.id_to_token[2:]

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)

    @classmethod
    def build(cls, sources: Iterable[Iterable[LabeledSequence]]) -> "Vocabulary":
        """Collect every token of the given sentence collections, in order seen.

        Args:
            sources: Episode sets or plain sentence lists

        Returns:
            Vocabulary: The collected vocabulary
        """
        vocabulary = cls()
        for source in sources:
            for sentence in _iter_sentences(source):
                for token in sentence.tokens:
                    vocabulary.add(token)
        logger.info(f"Built vocabulary of {len(vocabulary)} tokens")
        return vocabulary


def _iter_sentences(source) -> Iterable[LabeledSequence]:
    if isinstance(source, EpisodeSet):
        for episode in source:
            yield from episode.support
            yield from episode.query
    else:
        yield from source

"""Error hierarchy for the decomposed meta-learning NER toolkit.

Every error raised for bad input data, bad configuration or a numerical
blow-up derives from DecomposedNERError and carries the process exit code
the command-line front end reports for it.
"""

from typing import Optional


class DecomposedNERError(Exception):
    """Base class for toolkit errors."""

    exit_code = 1


class ConfigError(DecomposedNERError):
    """Invalid run configuration or configuration/checkpoint mismatch."""

    exit_code = 1


class DataError(DecomposedNERError):
    """Problems with episode files, corpora or sampling requests."""

    exit_code = 2


class EpisodeFormatError(DataError):
    """A record in an episode or corpus file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, field: str = ""):
        self.line = line
        self.field = field
        location = f"line {line}" if line is not None else "record"
        if field:
            location = f"{location}, field '{field}'"
        super().__init__(f"{location}: {message}")


class EpisodeValidationError(DataError):
    """An episode parses but violates an episode invariant."""

    def __init__(self, message: str, sequence_id: Optional[str] = None):
        self.sequence_id = sequence_id
        prefix = f"sequence {sequence_id}: " if sequence_id else ""
        super().__init__(f"{prefix}{message}")


class SamplerCapacityError(DataError):
    """The corpus is too small for the requested episode shape."""


class NoEpisodesError(DataError):
    """A command that needs episodes received none."""


class NumericalError(DecomposedNERError):
    """A loss or gradient became non-finite."""

    exit_code = 3

    def __init__(
        self, message: str, episode_id: Optional[str] = None, step: Optional[int] = None
    ):
        self.episode_id = episode_id
        self.step = step
        context = []
        if episode_id is not None:
            context.append(f"episode {episode_id}")
        if step is not None:
            context.append(f"step {step}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(f"{message}{suffix}")

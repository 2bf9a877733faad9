"""Checkpoint files: float64 buffers in an .npz archive plus a JSON header.

The header records the stage, the encoder configuration, buffer shapes and
the vocabulary, so a checkpoint restores to exactly the parameters and
token ids it was trained with.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .encoder import EncoderConfig, EncoderParams
from .entity_typing import TyperParams
from .errors import ConfigError, DataError
from .parameters import DTYPE, ParameterSet
from .span_detector import DetectorParams
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
HEADER_KEY = "__header__"


class Stage(str, Enum):
    ENCODER = "encoder"
    SPAN_DETECTOR = "span_detector"
    ENTITY_TYPER = "entity_typer"


@dataclass
class Checkpoint:
    stage: Stage
    params: ParameterSet
    vocabulary: Vocabulary

    @property
    def encoder_config(self) -> EncoderConfig:
        return _encoder_of(self.params).config


def _encoder_of(params: ParameterSet) -> EncoderParams:
    if isinstance(params, EncoderParams):
        return params
    encoder = getattr(params, "encoder", None)
    if not isinstance(encoder, EncoderParams):
        raise ValueError(f"cannot checkpoint {type(params).__name__}: no encoder")
    return encoder


def _stage_of(params: ParameterSet) -> Stage:
    if isinstance(params, DetectorParams):
        return Stage.SPAN_DETECTOR
    if isinstance(params, TyperParams):
        return Stage.ENTITY_TYPER
    if isinstance(params, EncoderParams):
        return Stage.ENCODER
    raise ValueError(f"cannot checkpoint {type(params).__name__}")


def save_checkpoint(
    path: Union[str, Path],
    params: ParameterSet,
    vocabulary: Vocabulary,
    stage: Optional[Union[str, Stage]] = None,
) -> Path:
    """Write params and vocabulary; returns the path written.

    Raises:
        ValueError: The stage does not match the parameter type
        DataError: The file cannot be written
    """
    path = Path(path)
    actual = _stage_of(params)
    if stage is not None and Stage(stage) is not actual:
        raise ValueError(
            f"stage '{Stage(stage).value}' does not match {type(params).__name__}"
        )
    buffers = params.named_buffers()
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage": actual.value,
        "encoder": _encoder_of(params).config.to_dict(),
        "shapes": {name: list(value.shape) for name, value in buffers.items()},
        "vocabulary": vocabulary.to_list(),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            np.savez(handle, **{HEADER_KEY: np.array(json.dumps(header))}, **buffers)
    except OSError as e:
        raise DataError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(
        f"Saved {actual.value} checkpoint "
        f"({params.num_parameters} parameters) to {path}"
    )
    return path


def load_checkpoint(
    path: Union[str, Path],
    expected_stage: Optional[Union[str, Stage]] = None,
    expected_d_model: Optional[int] = None,
    expected_vocab_size: Optional[int] = None,
) -> Checkpoint:
    """Restore a checkpoint written by save_checkpoint.

    Raises:
        DataError: Missing, unreadable or malformed file
        ConfigError: Stage, d_model or vocabulary size disagree with the expectation
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive[HEADER_KEY]))
            buffers = {
                name: np.array(archive[name], dtype=DTYPE)
                for name in archive.files
                if name != HEADER_KEY
            }
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e

    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        version = header.get("format_version")
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    stage = Stage(header["stage"])
    if expected_stage is not None and stage is not Stage(expected_stage):
        raise ConfigError(
            f"{path} holds a {stage.value} checkpoint, "
            f"expected {Stage(expected_stage).value}"
        )
    config = EncoderConfig.from_dict(header["encoder"])
    vocabulary = Vocabulary.from_list(header["vocabulary"])
    if len(vocabulary) != config.vocab_size:
        raise DataError(
            f"{path}: vocabulary has {len(vocabulary)} entries, "
            f"encoder expects {config.vocab_size}"
        )
    if expected_d_model is not None and config.d_model != expected_d_model:
        raise ConfigError(
            f"{path}: checkpoint d_model {config.d_model} differs "
            f"from configured {expected_d_model}"
        )
    if expected_vocab_size is not None and config.vocab_size != expected_vocab_size:
        raise ConfigError(
            f"{path}: checkpoint vocabulary size {config.vocab_size} differs "
            f"from the run's {expected_vocab_size}"
        )

    try:
        params = _rebuild(stage, config, buffers)
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: buffers do not match the header: {e}") from e
    logger.info(f"Loaded {stage.value} checkpoint from {path}")
    return Checkpoint(stage, params, vocabulary)


def _encoder_from(
    config: EncoderConfig, buffers: Dict[str, np.ndarray], prefix: str
) -> EncoderParams:
    names = EncoderParams.BUFFER_NAMES
    return EncoderParams(config, **{name: buffers[f"{prefix}{name}"] for name in names})


def _rebuild(
    stage: Stage, config: EncoderConfig, buffers: Dict[str, np.ndarray]
) -> ParameterSet:
    if stage is Stage.ENCODER:
        return _encoder_from(config, buffers, "")
    encoder = _encoder_from(config, buffers, "encoder.")
    if stage is Stage.SPAN_DETECTOR:
        return DetectorParams(encoder, buffers["head.weight"], buffers["head.bias"])
    return TyperParams(encoder)

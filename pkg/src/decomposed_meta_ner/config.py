"""Run configuration.

A run is described by one YAML file with a section per stage:

    data:      episode files, input format, strictness
    encoder:   reference encoder shape and dropout
    span:      span detector meta-training, lambdas and fine-tuning
    typing:    entity typer meta-training, distance and fine-tuning
    eval:      workers, prediction dump, fine-tune sweep
    seeds:     list of seeds (one full run per seed)
    output_dir: where checkpoints, logs and reports go

Missing sections take their defaults. Unknown keys, wrong types and
out-of-range values raise ConfigError before anything is trained.
"""

import logging
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar, Union

import yaml

from .encoder import SUPPORTED_BACKENDS, EncoderConfig
from .entity_typing import Distance
from .episode_io import EpisodeFormat
from .errors import ConfigError
from .maml_engine import MetaConfig
from .optim import OptimizerTag

logger = logging.getLogger(__name__)

T = TypeVar("T")

SPAN_VARIANTS = ("maml", "supervised")
TYPING_VARIANTS = ("maml", "protonet", "supervised")


@dataclass
class DataConfig:
    train: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    format: str = "canonical"
    strict: bool = True

    def validate(self) -> None:
        if self.format not in {f.value for f in EpisodeFormat}:
            choices = [f.value for f in EpisodeFormat]
            raise ConfigError(f"data.format must be one of {choices}")

    def episode_paths(self) -> List[str]:
        return [path for path in (self.train, self.dev, self.test) if path]


@dataclass
class EncoderSection:
    d_emb: int = 32
    d_model: int = 32
    max_seq_len: int = 128
    dropout: float = 0.1
    init_range: float = 0.1
    freeze_embedding: bool = False
    backend: str = "neighbor_mixing"

    def validate(self) -> None:
        if self.backend not in SUPPORTED_BACKENDS:
            raise ConfigError(
                f"encoder.backend must be one of {list(SUPPORTED_BACKENDS)}"
            )
        if min(self.d_emb, self.d_model, self.max_seq_len) < 1:
            raise ConfigError("encoder dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"encoder.dropout must be in [0, 1), got {self.dropout}")
        if self.init_range <= 0:
            raise ConfigError("encoder.init_range must be positive")

    def build(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            d_emb=self.d_emb,
            d_model=self.d_model,
            max_seq_len=self.max_seq_len,
            dropout=self.dropout,
            init_range=self.init_range,
            freeze_embedding=self.freeze_embedding,
            backend=self.backend,
        )


@dataclass
class SpanStageConfig:
    """Span detector stage: meta-training plus meta-test fine-tuning."""

    meta: MetaConfig = field(default_factory=MetaConfig)
    lambda_train: float = 2.0
    lambda_eval: float = 5.0
    finetune_steps: int = 30
    finetune_lr: float = 0.005
    finetune_optimizer: str = "adamw"
    variant: str = "maml"

    def validate(self) -> None:
        self.meta.validate()
        if self.lambda_train < 0 or self.lambda_eval < 0:
            raise ConfigError("span lambdas must be >= 0")
        _check_finetune(
            "span", self.finetune_steps, self.finetune_lr, self.finetune_optimizer
        )
        if self.variant not in SPAN_VARIANTS:
            raise ConfigError(f"span.variant must be one of {list(SPAN_VARIANTS)}")


@dataclass
class TypingStageConfig:
    """Entity typer stage: meta-training plus meta-test fine-tuning and filtering."""

    meta: MetaConfig = field(
        default_factory=lambda: MetaConfig(inner_lr=0.01, meta_lr=0.005)
    )
    distance: str = "squared_euclidean"
    leave_one_out: bool = False
    finetune_steps: int = 20
    finetune_lr: float = 0.005
    finetune_optimizer: str = "adamw"
    min_similarity: Optional[float] = None
    variant: str = "maml"

    def validate(self) -> None:
        self.meta.validate()
        if self.distance not in {d.value for d in Distance}:
            choices = [d.value for d in Distance]
            raise ConfigError(f"typing.distance must be one of {choices}")
        _check_finetune(
            "typing", self.finetune_steps, self.finetune_lr, self.finetune_optimizer
        )
        if self.variant not in TYPING_VARIANTS:
            raise ConfigError(f"typing.variant must be one of {list(TYPING_VARIANTS)}")


@dataclass
class EvalConfig:
    workers: int = 1
    predictions: str = "predictions.jsonl"
    report: str = "report.json"
    finetune_sweep: List[int] = field(default_factory=list)

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"eval.workers must be >= 1, got {self.workers}")
        if any(steps < 0 for steps in self.finetune_sweep):
            raise ConfigError("eval.finetune_sweep entries must be >= 0")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    span: SpanStageConfig = field(default_factory=SpanStageConfig)
    typing: TypingStageConfig = field(default_factory=TypingStageConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"

    def validate(self) -> "RunConfig":
        for section in (self.data, self.encoder, self.span, self.typing, self.eval):
            section.validate()
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        return self

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def for_seed(self, seed: int) -> "RunConfig":
        """Copy whose stage meta-configs use the given seed."""
        return replace(
            self,
            span=replace(self.span, meta=replace(self.span.meta, seed=seed)),
            typing=replace(self.typing, meta=replace(self.typing.meta, seed=seed)),
        )


def _check_finetune(stage: str, steps: int, lr: float, optimizer: str) -> None:
    if steps < 0:
        raise ConfigError(f"{stage}.finetune_steps must be >= 0, got {steps}")
    if lr < 0:
        raise ConfigError(f"{stage}.finetune_lr must be >= 0, got {lr}")
    if optimizer not in {tag.value for tag in OptimizerTag}:
        raise ConfigError(f"{stage}.finetune_optimizer must be 'sgd' or 'adamw'")


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [arg for arg in args if arg is not type(None)]
        return _coerce(value, inner[0], where)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return [_coerce(item, args[0], f"{where}[]") for item in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported setting type")


def _build(cls: Type[T], data: Any, where: str, base: Optional[T] = None) -> T:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    values = {
        name: _coerce(value, hints[name], f"{where}.{name}")
        for name, value in data.items()
    }
    if base is not None:
        return replace(base, **values)
    return cls(**values)


def _build_stage(cls: Type[T], data: Any, where: str) -> T:
    """Stage sections hold MetaConfig keys and stage keys side by side."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    meta_names = {f.name for f in fields(MetaConfig)}
    meta_data = {key: value for key, value in data.items() if key in meta_names}
    stage_data = {key: value for key, value in data.items() if key not in meta_names}
    stage = _build(cls, stage_data, where)
    base = stage.meta  # type: ignore[attr-defined]
    meta = _build(MetaConfig, meta_data, where, base=base)
    return replace(stage, meta=meta)  # type: ignore[type-var]


def config_from_dict(data: Optional[Dict[str, Any]]) -> RunConfig:
    """Build and validate a RunConfig from parsed YAML."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of sections")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    top = {key: data[key] for key in ("seeds", "output_dir") if key in data}
    config = RunConfig(
        data=_build(DataConfig, data.get("data"), "data"),
        encoder=_build(EncoderSection, data.get("encoder"), "encoder"),
        span=_build_stage(SpanStageConfig, data.get("span"), "span"),
        typing=_build_stage(TypingStageConfig, data.get("typing"), "typing"),
        eval=_build(EvalConfig, data.get("eval"), "eval"),
    )
    hints = typing.get_type_hints(RunConfig)
    for key, value in top.items():
        setattr(config, key, _coerce(value, hints[key], key))
    return config.validate()


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Load a YAML run configuration; None gives the defaults.

    Raises:
        ConfigError: Unreadable file, bad YAML or schema violation
    """
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read configuration {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e
    config = config_from_dict(data)
    logger.debug(f"Loaded configuration from {path}")
    return config


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Plain-data view of a RunConfig with stage meta keys flattened."""

    def flat(section: Any) -> Dict[str, Any]:
        values = {f.name: getattr(section, f.name) for f in fields(section)}
        meta = values.pop("meta", None)
        if meta is not None:
            values.update({f.name: getattr(meta, f.name) for f in fields(meta)})
        return values

    return {
        "data": flat(config.data),
        "encoder": flat(config.encoder),
        "span": flat(config.span),
        "typing": flat(config.typing),
        "eval": flat(config.eval),
        "seeds": list(config.seeds),
        "output_dir": config.output_dir,
    }


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(config_to_dict(config), handle, sort_keys=False)

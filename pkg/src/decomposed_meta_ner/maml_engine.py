"""First-order MAML machinery.

The engine is model-agnostic: it sees parameters only as ParameterSet
objects and a task only through a TaskLoss, a callable mapping
(params, dataset) to (loss, GradientSet). No second derivatives are ever
requested, so any loss with a gradient can be meta-trained.

Inner updates and meta-test fine-tuning always work on a deep copy; the
meta-parameters change only through meta_step (or supervised_step).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .episodes import Episode, EpisodeSet
from .errors import ConfigError, NumericalError
from .optim import Optimizer, OptimizerTag, make_optimizer
from .parameters import GradientSet, ParameterSet

logger = logging.getLogger(__name__)

TaskLoss = Callable[[ParameterSet, Any], Tuple[float, GradientSet]]
EpisodeSplit = Callable[[Episode], Tuple[Any, Any]]
EvalFn = Callable[[ParameterSet], float]


@dataclass
class MetaConfig:
    """Meta-training hyperparameters of one stage."""

    inner_lr: float = 0.05
    meta_lr: float = 0.005
    inner_steps: int = 2
    meta_batch: int = 1
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    inner_optimizer: str = "sgd"
    meta_optimizer: str = "adamw"
    warmup_fraction: float = 0.01
    weight_decay: float = 0.01
    max_grad_norm: float = 5.0

    def validate(self) -> None:
        """Raise ConfigError on out-of-range values."""
        if self.inner_lr < 0 or self.meta_lr <= 0:
            raise ConfigError("inner_lr must be >= 0 and meta_lr > 0")
        if self.inner_steps < 0:
            raise ConfigError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.meta_batch < 1:
            raise ConfigError(f"meta_batch must be >= 1, got {self.meta_batch}")
        if self.max_steps < 0 or self.eval_every < 1:
            raise ConfigError("max_steps must be >= 0 and eval_every >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(
                f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}"
            )
        if self.max_grad_norm < 0 or self.weight_decay < 0:
            raise ConfigError("max_grad_norm and weight_decay must be >= 0")
        for name in ("inner_optimizer", "meta_optimizer"):
            value = getattr(self, name)
            if value not in {tag.value for tag in OptimizerTag}:
                raise ConfigError(f"{name} must be 'sgd' or 'adamw', got '{value}'")


@dataclass
class AdaptedParams:
    """A task-adapted copy of the meta-parameters."""

    params: ParameterSet
    episode_id: str = ""
    steps: int = 0
    losses: List[float] = field(default_factory=list)


@dataclass
class HistoryPoint:
    """One dev evaluation during meta-training."""

    step: int
    mean_query_loss: float
    dev_f1: Optional[float]

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "mean_query_loss": self.mean_query_loss,
            "dev_f1": self.dev_f1,
        }


@dataclass
class MetaTrainResult:
    """Outcome of meta_train."""

    params: ParameterSet
    history: List[HistoryPoint]
    best_step: int
    best_dev_f1: Optional[float]


def support_query_sentences(episode: Episode) -> Tuple[list, list]:
    """Default split: support sentences for the inner loop, query for the meta-loss."""
    return list(episode.support), list(episode.query)


def pooled_sentences(episode: Episode) -> list:
    """All sentences of an episode, for conventional supervised training."""
    return list(episode.support) + list(episode.query)


def _check_finite(loss: float, grads: GradientSet, episode_id: str, step: int) -> None:
    if not math.isfinite(loss) or not grads.is_finite():
        raise NumericalError(
            f"non-finite loss or gradient (loss={loss})",
            episode_id=episode_id,
            step=step,
        )


def inner_update(
    params: ParameterSet,
    loss: TaskLoss,
    support: Any,
    n: int,
    alpha: float,
    optimizer: str = "sgd",
    episode_id: str = "",
    weight_decay: float = 0.01,
    warmup_fraction: float = 0.0,
) -> AdaptedParams:
    """n optimizer steps on the support loss, applied to a deep copy.

    Args:
        params: Meta-parameters (never modified)
        loss: TaskLoss evaluated on support
        support: Dataset handed to the loss
        n: Number of steps (0 returns an exact clone)
        alpha: Learning rate
        optimizer: "sgd" or "adamw"; state always starts fresh
        episode_id: Used in diagnostics
        weight_decay: AdamW weight decay
        warmup_fraction: Share of the n steps spent warming up; when 0 the
            learning rate stays flat, otherwise it decays linearly after warmup

    Returns:
        AdaptedParams: The adapted copy and the per-step support losses

    Raises:
        NumericalError: A loss or gradient is not finite
    """
    if n < 0:
        raise ValueError(f"number of inner steps must be >= 0, got {n}")
    adapted = params.clone()
    result = AdaptedParams(adapted, episode_id=episode_id, steps=n)
    if n == 0:
        return result
    step_optimizer = make_optimizer(
        optimizer,
        alpha,
        weight_decay=weight_decay,
        warmup_fraction=warmup_fraction,
        total_steps=n if warmup_fraction > 0 else None,
    )
    for step in range(n):
        value, grads = loss(adapted, support)
        _check_finite(value, grads, episode_id, step)
        step_optimizer.step(adapted, grads)
        result.losses.append(value)
        logger.debug(
            f"Inner step {step + 1}/{n} episode={episode_id} loss={value:.6f}"
        )
    return result


def fine_tune(
    meta_params: ParameterSet,
    support: Any,
    loss: TaskLoss,
    steps: int,
    alpha: float,
    optimizer: str = "adamw",
    episode_id: str = "",
    weight_decay: float = 0.01,
    warmup_fraction: float = 0.01,
) -> AdaptedParams:
    """Meta-test adaptation on a novel episode's support set.

    Same contract as inner_update; only the defaults differ (AdamW with warmup).
    """
    return inner_update(
        meta_params,
        loss,
        support,
        steps,
        alpha,
        optimizer=optimizer,
        episode_id=episode_id,
        weight_decay=weight_decay,
        warmup_fraction=warmup_fraction,
    )


def meta_step(
    params: ParameterSet,
    episodes: Sequence[Episode],
    loss: TaskLoss,
    config: MetaConfig,
    optimizer: Optimizer,
    query_loss: Optional[TaskLoss] = None,
    split: EpisodeSplit = support_query_sentences,
) -> float:
    """One first-order MAML meta-update over a batch of episodes.

    For every episode the parameters are adapted on its support set, the
    query-loss gradient is taken at the adapted parameters, and the sum of
    those gradients (in episode order) is applied to the meta-parameters.

    Args:
        params: Meta-parameters, updated in place
        episodes: Non-empty episode batch
        loss: TaskLoss for the inner loop
        config: Inner-loop settings and gradient clipping
        optimizer: Meta-optimizer (keeps state across meta-steps)
        query_loss: TaskLoss for the query phase (defaults to loss)
        split: Maps an episode to its (support, query) datasets

    Returns:
        float: Mean query loss over the batch
    """
    if not episodes:
        raise ValueError("meta_step needs at least one episode")
    query_loss = query_loss or loss
    total = params.zero_gradients()
    query_losses = []
    for episode in episodes:
        support, query = split(episode)
        adapted = inner_update(
            params,
            loss,
            support,
            config.inner_steps,
            config.inner_lr,
            optimizer=config.inner_optimizer,
            episode_id=episode.episode_id,
            weight_decay=config.weight_decay,
        )
        value, grads = query_loss(adapted.params, query)
        _check_finite(value, grads, episode.episode_id, optimizer.step_count)
        total.add_(grads)
        query_losses.append(value)

    _apply_meta_gradient(params, total, config, optimizer)
    return float(np.mean(query_losses))


def supervised_step(
    params: ParameterSet,
    episodes: Sequence[Episode],
    loss: TaskLoss,
    config: MetaConfig,
    optimizer: Optimizer,
    pool: Callable[[Episode], Any] = pooled_sentences,
) -> float:
    """Conventional update on the pooled data of an episode batch."""
    if not episodes:
        raise ValueError("supervised_step needs at least one episode")
    total = params.zero_gradients()
    losses = []
    for episode in episodes:
        value, grads = loss(params, pool(episode))
        _check_finite(value, grads, episode.episode_id, optimizer.step_count)
        total.add_(grads)
        losses.append(value)
    _apply_meta_gradient(params, total, config, optimizer)
    return float(np.mean(losses))


def _apply_meta_gradient(
    params: ParameterSet, grads: GradientSet, config: MetaConfig, optimizer: Optimizer
) -> None:
    if config.max_grad_norm > 0:
        norm = grads.clip_by_global_norm_(config.max_grad_norm)
        if norm > config.max_grad_norm:
            logger.debug(
                f"Clipped meta-gradient norm {norm:.3f} -> {config.max_grad_norm}"
            )
    optimizer.step(params, grads)


def meta_train(
    init_params: ParameterSet,
    episodes: EpisodeSet,
    dev: EpisodeSet,
    loss: TaskLoss,
    eval_fn: EvalFn,
    config: MetaConfig,
    query_loss: Optional[TaskLoss] = None,
    split: EpisodeSplit = support_query_sentences,
    supervised: bool = False,
    pool: Callable[[Episode], Any] = pooled_sentences,
    metrics_log: Optional[Union[str, Path]] = None,
    progress: bool = True,
) -> MetaTrainResult:
    """Meta-train from init_params, keeping the checkpoint with the best dev F1.

    Args:
        init_params: Starting parameters (not modified)
        episodes: Training episodes
        dev: Dev episodes; eval_fn is called on them every eval_every steps
        loss: Inner-loop TaskLoss (or the supervised loss)
        eval_fn: Fine-tunes and predicts on dev, returns F1
        config: Stage hyperparameters
        query_loss: Query-phase TaskLoss
        split: Episode to (support, query) mapping
        supervised: Use supervised_step on pooled sentences instead of meta_step
        pool: Episode to pooled dataset for supervised training
        metrics_log: Newline-delimited JSON log of the history
        progress: Show a progress bar

    Returns:
        MetaTrainResult: Best parameters and dev history
    """
    config.validate()
    if len(episodes) == 0:
        raise ValueError("meta_train needs training episodes")
    params = init_params.clone()
    history: List[HistoryPoint] = []
    best_params = init_params.clone()
    best_f1: Optional[float] = None
    best_step = 0
    if config.max_steps == 0:
        return MetaTrainResult(best_params, history, best_step, best_f1)

    if len(dev) == 0:
        logger.warning("Empty dev set: the last checkpoint will be returned")
    else:
        best_f1 = eval_fn(params)
        logger.info(f"Step 0: dev F1 {round(best_f1, 4)}")

    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(
        config.meta_optimizer,
        config.meta_lr,
        weight_decay=config.weight_decay,
        warmup_fraction=config.warmup_fraction,
        total_steps=config.max_steps,
    )
    log_handle = None
    if metrics_log is not None:
        Path(metrics_log).parent.mkdir(parents=True, exist_ok=True)
        log_handle = open(metrics_log, "w", encoding="utf-8")

    mode = "Supervised" if supervised else "Meta"
    logger.info(
        f"{mode}-training for {config.max_steps} steps "
        f"on {len(episodes)} episodes (meta_batch={config.meta_batch}, "
        f"inner_steps={config.inner_steps})"
    )
    window: List[float] = []
    try:
        for step in tqdm(
            range(1, config.max_steps + 1), disable=not progress, desc="meta-train"
        ):
            batch_size = min(config.meta_batch, len(episodes))
            picked = rng.choice(len(episodes), size=batch_size, replace=False)
            batch = [episodes[int(i)] for i in picked]
            if supervised:
                value = supervised_step(params, batch, loss, config, optimizer, pool)
            else:
                value = meta_step(
                    params, batch, loss, config, optimizer, query_loss, split
                )
            window.append(value)

            if step % config.eval_every and step != config.max_steps:
                continue
            dev_f1 = eval_fn(params) if len(dev) else None
            point = HistoryPoint(step, float(np.mean(window)), dev_f1)
            window = []
            history.append(point)
            if log_handle is not None:
                log_handle.write(json.dumps(point.to_record()) + "\n")
                log_handle.flush()
            logger.info(
                f"Step {step}: mean query loss {point.mean_query_loss:.4f}, "
                f"dev F1 {dev_f1 if dev_f1 is None else round(dev_f1, 4)}"
            )
            if dev_f1 is None or best_f1 is None or dev_f1 > best_f1:
                best_params = params.clone()
                best_f1 = dev_f1
                best_step = step
    finally:
        if log_handle is not None:
            log_handle.close()

    logger.info(f"Best checkpoint at step {best_step} (dev F1 {best_f1})")
    return MetaTrainResult(best_params, history, best_step, best_f1)

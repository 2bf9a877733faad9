"""End-to-end orchestration of the two stages.

Training: the span detector and the entity typer are meta-trained
independently, one checkpoint per seed and stage. Evaluation: for every test
episode the detector is fine-tuned on the support set and detects spans in
the query sentences, then the typer is fine-tuned on the same support set and
types those spans. Meta checkpoints are never modified by evaluation.
"""

import asyncio
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import Stage, load_checkpoint, save_checkpoint
from .config import RunConfig, SpanStageConfig, config_to_dict
from .entity_typing import (
    Distance,
    PrototypicalTaskLoss,
    TyperParams,
    TypingBatch,
    TypingDecision,
    init_typer,
    meta_test_typing,
    typing_split,
)
from .episode_io import load_episodes
from .episodes import Episode, EpisodeSet, SplitTag, TypedSpan, check_disjoint_types
from .errors import (
    ConfigError,
    DecomposedNERError,
    EpisodeValidationError,
    NoEpisodesError,
)
from .maml_engine import MetaTrainResult, fine_tune, meta_train
from .metrics import (
    SPAN_ONLY_TYPE,
    PredictionRecord,
    evaluate_per_episode,
    evaluate_pooled,
    mean_std,
)
from .span_detector import (
    DetectionTaskLoss,
    DetectorParams,
    Span,
    detect_spans,
    init_detector,
)
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)


def checkpoint_path(config: RunConfig, stage: Stage, seed: int) -> Path:
    return config.output_path / f"{stage.value}.seed{seed}.npz"


def metrics_log_path(config: RunConfig, stage: Stage, seed: int) -> Path:
    return config.output_path / f"{stage.value}.seed{seed}.metrics.jsonl"


def load_split(config: RunConfig, split: SplitTag) -> EpisodeSet:
    """Episodes of one split; an unset path gives an empty set."""
    path = getattr(config.data, split.value)
    if not path:
        return EpisodeSet((), split)
    episodes = load_episodes(
        path, config.data.format, split_tag=split, strict=config.data.strict
    )
    return check_sentence_lengths(
        episodes, config.encoder.max_seq_len, strict=config.data.strict
    )


def check_sentence_lengths(
    episodes: EpisodeSet, max_seq_len: int, strict: bool = True
) -> EpisodeSet:
    """Reject (strict) or drop episodes with a sentence the encoder cannot take."""
    kept: List[Episode] = []
    for episode in episodes:
        longest = max(len(s.tokens) for s in episode.support + episode.query)
        if longest <= max_seq_len:
            kept.append(episode)
            continue
        error = EpisodeValidationError(
            f"sentence of {longest} tokens exceeds encoder.max_seq_len {max_seq_len}",
            sequence_id=episode.episode_id,
        )
        if strict:
            raise error
        logger.warning(f"Skipping episode {episode.episode_id}: {error}")
    if len(kept) == len(episodes):
        return episodes
    return EpisodeSet(tuple(kept), episodes.split_tag)


def build_vocabulary(config: RunConfig) -> Vocabulary:
    """Token inventory over every configured episode file."""
    sources = [load_split(config, split) for split in SplitTag]
    return Vocabulary.build(sources)


def _episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, index))


def adapt_detector(
    meta_theta: DetectorParams,
    support: Sequence,
    vocabulary: Vocabulary,
    span: SpanStageConfig,
    rng: Optional[np.random.Generator] = None,
    episode_id: str = "",
) -> DetectorParams:
    """Meta-test fine-tuning of the detector on a support set."""
    loss = DetectionTaskLoss(vocabulary, span.lambda_eval, rng)
    adapted = fine_tune(
        meta_theta,
        list(support),
        loss,
        span.finetune_steps,
        span.finetune_lr,
        optimizer=span.finetune_optimizer,
        episode_id=episode_id,
        weight_decay=span.meta.weight_decay,
        warmup_fraction=span.meta.warmup_fraction,
    )
    return adapted.params  # type: ignore[return-value]


def detect_episode(
    meta_theta: DetectorParams,
    episode: Episode,
    vocabulary: Vocabulary,
    span: SpanStageConfig,
    rng: Optional[np.random.Generator] = None,
) -> List[List[Span]]:
    """Fine-tune on the support set, then detect spans in every query sentence."""
    theta = adapt_detector(
        meta_theta, episode.support, vocabulary, span, rng, episode.episode_id
    )
    return [
        detect_spans(theta, vocabulary.encode(sentence.tokens))
        for sentence in episode.query
    ]


def run_episode(
    meta_theta: DetectorParams,
    meta_gamma: TyperParams,
    episode: Episode,
    vocabulary: Vocabulary,
    config: RunConfig,
    seed: int = 0,
    index: int = 0,
) -> List[PredictionRecord]:
    """Predictions for every query sentence of one novel episode.

    Both stages fine-tune their own copies; the meta-parameters are left as
    they were. The generator for dropout during fine-tuning depends only on
    (seed, index), so results do not depend on scheduling.
    """
    rng = _episode_rng(seed, index)
    try:
        detected = detect_episode(meta_theta, episode, vocabulary, config.span, rng)
        decisions = meta_test_typing(
            meta_gamma,
            episode.support,
            episode.types,
            [vocabulary.encode(sentence.tokens) for sentence in episode.query],
            detected,
            vocabulary,
            config.typing,
            rng=rng,
            episode_id=episode.episode_id,
        )
    except DecomposedNERError:
        logger.error(f"Episode {episode.episode_id} failed")
        raise
    return _typed_records(episode, decisions)


def _typed_records(
    episode: Episode, decisions: Sequence[Sequence[TypingDecision]]
) -> List[PredictionRecord]:
    records = []
    for sentence_id, (sentence, typed) in enumerate(zip(episode.query, decisions)):
        predicted = [TypedSpan(d.span[0], d.span[1], d.predicted_type) for d in typed]
        gold = list(sentence.spans)
        records.append(
            PredictionRecord(episode.episode_id, sentence_id, predicted, gold)
        )
    return records


def span_records(
    meta_theta: DetectorParams,
    episodes: EpisodeSet,
    vocabulary: Vocabulary,
    span: SpanStageConfig,
    seed: int = 0,
) -> List[PredictionRecord]:
    """Detection-only predictions (typing ignored) for a set of episodes."""
    records = []
    for index, episode in enumerate(episodes):
        rng = _episode_rng(seed, index)
        detected = detect_episode(meta_theta, episode, vocabulary, span, rng)
        for sentence_id, (sentence, spans) in enumerate(zip(episode.query, detected)):
            records.append(
                PredictionRecord(
                    episode.episode_id,
                    sentence_id,
                    [TypedSpan(start, end, SPAN_ONLY_TYPE) for start, end in spans],
                    list(sentence.spans),
                ).untyped()
            )
    return records


def typing_records(
    meta_gamma: TyperParams,
    episodes: EpisodeSet,
    vocabulary: Vocabulary,
    config: RunConfig,
    seed: int = 0,
) -> List[PredictionRecord]:
    """Typing predictions on gold spans, isolating the typer from detection errors."""
    records = []
    for index, episode in enumerate(episodes):
        gold = [[span.bounds for span in sentence.spans] for sentence in episode.query]
        decisions = meta_test_typing(
            meta_gamma,
            episode.support,
            episode.types,
            [vocabulary.encode(sentence.tokens) for sentence in episode.query],
            gold,
            vocabulary,
            config.typing,
            rng=_episode_rng(seed, index),
            episode_id=episode.episode_id,
        )
        records.extend(_typed_records(episode, decisions))
    return records


def _require_training_data(config: RunConfig) -> tuple:
    train = load_split(config, SplitTag.TRAIN)
    if len(train) == 0:
        raise NoEpisodesError("no training episodes (set data.train)")
    dev = load_split(config, SplitTag.DEV)
    test = load_split(config, SplitTag.TEST)
    if len(test):
        check_disjoint_types(train, test)
    return train, dev


def train_span_command(
    config: RunConfig, vocabulary: Optional[Vocabulary] = None, progress: bool = True
) -> List[Path]:
    """Meta-train the span detector once per seed; returns the checkpoint paths."""
    train, dev = _require_training_data(config)
    vocabulary = vocabulary or build_vocabulary(config)
    encoder_config = config.encoder.build(len(vocabulary))
    paths = []
    for seed in config.seeds:
        seeded = config.for_seed(seed)
        span = seeded.span
        rng = np.random.default_rng(seed)
        loss = DetectionTaskLoss(vocabulary, span.lambda_eval, rng)
        query_loss = loss.with_lambda(span.lambda_train)
        supervised = span.variant == "supervised"

        def dev_f1(theta: DetectorParams) -> float:
            records = span_records(theta, dev, vocabulary, span, seed)
            return evaluate_pooled(records).f1

        logger.info(f"Training span detector (seed={seed}, variant={span.variant})")
        result: MetaTrainResult = meta_train(
            init_detector(encoder_config, seed),
            train,
            dev,
            query_loss if supervised else loss,
            dev_f1,
            span.meta,
            query_loss=query_loss,
            supervised=supervised,
            metrics_log=metrics_log_path(config, Stage.SPAN_DETECTOR, seed),
            progress=progress,
        )
        paths.append(
            save_checkpoint(
                checkpoint_path(config, Stage.SPAN_DETECTOR, seed),
                result.params,
                vocabulary,
                Stage.SPAN_DETECTOR,
            )
        )
    return paths


def _pooled_typing_batch(episode: Episode) -> TypingBatch:
    sentences = list(episode.support) + list(episode.query)
    return TypingBatch(sentences, sentences, episode.types, query_is_support=True)


def train_typing_command(
    config: RunConfig, vocabulary: Optional[Vocabulary] = None, progress: bool = True
) -> List[Path]:
    """Meta-train the entity typer once per seed; returns the checkpoint paths.

    variant "maml" adapts on support-as-query before the query loss,
    "protonet" skips the inner loop entirely, "supervised" trains on pooled
    episode sentences without episodic adaptation.
    """
    train, dev = _require_training_data(config)
    vocabulary = vocabulary or build_vocabulary(config)
    encoder_config = config.encoder.build(len(vocabulary))
    paths = []
    for seed in config.seeds:
        seeded = config.for_seed(seed)
        stage = seeded.typing
        meta = stage.meta
        if stage.variant == "protonet":
            meta = replace(meta, inner_steps=0)
        loss = PrototypicalTaskLoss(
            vocabulary,
            Distance(stage.distance),
            np.random.default_rng(seed),
            stage.leave_one_out,
        )

        def dev_f1(gamma: TyperParams) -> float:
            records = typing_records(gamma, dev, vocabulary, seeded, seed)
            return evaluate_pooled(records).f1

        logger.info(f"Training entity typer (seed={seed}, variant={stage.variant})")
        result = meta_train(
            init_typer(encoder_config, seed + 1000),
            train,
            dev,
            loss,
            dev_f1,
            meta,
            split=typing_split,
            supervised=stage.variant == "supervised",
            pool=_pooled_typing_batch,
            metrics_log=metrics_log_path(config, Stage.ENTITY_TYPER, seed),
            progress=progress,
        )
        paths.append(
            save_checkpoint(
                checkpoint_path(config, Stage.ENTITY_TYPER, seed),
                result.params,
                vocabulary,
                Stage.ENTITY_TYPER,
            )
        )
    return paths


def load_stage_checkpoints(config: RunConfig, seed: int) -> tuple:
    """Detector, typer and shared vocabulary for one seed.

    Raises:
        ConfigError: Checkpoints disagree with the configuration or each other
    """
    d_model = config.encoder.d_model
    detector = load_checkpoint(
        checkpoint_path(config, Stage.SPAN_DETECTOR, seed), Stage.SPAN_DETECTOR, d_model
    )
    typer = load_checkpoint(
        checkpoint_path(config, Stage.ENTITY_TYPER, seed), Stage.ENTITY_TYPER, d_model
    )
    if detector.vocabulary != typer.vocabulary:
        raise ConfigError(
            f"seed {seed}: detector and typer were trained with different vocabularies"
        )
    return detector.params, typer.params, detector.vocabulary


async def predict_episodes(
    meta_theta: DetectorParams,
    meta_gamma: TyperParams,
    episodes: EpisodeSet,
    vocabulary: Vocabulary,
    config: RunConfig,
    seed: int,
    workers: int = 1,
) -> List[PredictionRecord]:
    """run_episode over every episode, at most `workers` at a time, in episode order."""
    semaphore = asyncio.Semaphore(max(1, workers))

    async def run(index: int, episode: Episode) -> List[PredictionRecord]:
        async with semaphore:
            return await asyncio.to_thread(
                run_episode,
                meta_theta,
                meta_gamma,
                episode,
                vocabulary,
                config,
                seed,
                index,
            )

    results = await asyncio.gather(*(run(i, e) for i, e in enumerate(episodes)))
    return [record for episode_records in results for record in episode_records]


def seed_report(records: Sequence[PredictionRecord]) -> Dict[str, Any]:
    return {
        "end_to_end": {
            "pooled_micro": evaluate_pooled(records).to_dict(),
            "per_episode_mean": evaluate_per_episode(records).to_dict(),
        },
        "span_only": {
            "pooled_micro": evaluate_pooled(records, span_only=True).to_dict(),
            "per_episode_mean": evaluate_per_episode(records, span_only=True).to_dict(),
        },
    }


def aggregate_reports(per_seed: Dict[int, Dict[str, Any]]) -> Dict[str, Any]:
    """Mean and standard deviation over seeds of every reported F1."""
    summary: Dict[str, Any] = {}
    for view in ("end_to_end", "span_only"):
        summary[view] = {}
        for protocol in ("pooled_micro", "per_episode_mean"):
            values = [report[view][protocol]["f1"] for report in per_seed.values()]
            summary[view][protocol] = mean_std(values)
    return summary


def write_records(records: Sequence[PredictionRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def write_report(report: Dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2)
        handle.write("\n")


async def eval_command(
    config: RunConfig, workers: Optional[int] = None
) -> Dict[str, Any]:
    """Evaluate every seed's checkpoints on the test episodes.

    Writes one prediction dump per seed and a JSON report with per-seed and
    aggregated end-to-end and span-only F1 under both protocols.

    Raises:
        NoEpisodesError: The test set is empty (an empty report is still written)
        ConfigError: Checkpoints disagree with the configuration
    """
    workers = workers or config.eval.workers
    report_path = config.output_path / config.eval.report
    test = load_split(config, SplitTag.TEST)
    report: Dict[str, Any] = {
        "config": config_to_dict(config),
        "test_episodes": len(test),
        "seeds": {},
        "summary": {},
    }
    if len(test) == 0:
        write_report(report, report_path)
        raise NoEpisodesError("no test episodes to evaluate (set data.test)")

    per_seed: Dict[int, Dict[str, Any]] = {}
    for seed in config.seeds:
        theta, gamma, vocabulary = load_stage_checkpoints(config, seed)
        records = await predict_episodes(
            theta, gamma, test, vocabulary, config, seed, workers
        )
        stem = Path(config.eval.predictions)
        name = f"{stem.stem}.seed{seed}{stem.suffix}"
        write_records(records, config.output_path / name)
        per_seed[seed] = seed_report(records)
        pooled = per_seed[seed]["end_to_end"]["pooled_micro"]["f1"]
        span_f1 = per_seed[seed]["span_only"]["pooled_micro"]["f1"]
        logger.info(f"Seed {seed}: F1 {pooled:.4f} (span-only {span_f1:.4f})")

    report["seeds"] = {str(seed): value for seed, value in per_seed.items()}
    report["summary"] = aggregate_reports(per_seed)
    write_report(report, report_path)
    summary = report["summary"]["end_to_end"]["pooled_micro"]
    logger.info(
        f"Evaluated {len(test)} episodes over {len(config.seeds)} seed(s): "
        f"F1 {summary['mean']:.4f} +/- {summary['std']:.4f}"
    )
    return report


def sweep_finetune_steps(
    config: RunConfig, steps_list: Sequence[int]
) -> Dict[int, Dict[str, Any]]:
    """Span-only test F1 (mean and std over seeds) for each fine-tune step count."""
    test = load_split(config, SplitTag.TEST)
    if len(test) == 0:
        raise NoEpisodesError("no test episodes for the fine-tune sweep")
    sweep: Dict[int, Dict[str, Any]] = {}
    for steps in steps_list:
        span = replace(config.span, finetune_steps=steps)
        scores = []
        for seed in config.seeds:
            checkpoint = load_checkpoint(
                checkpoint_path(config, Stage.SPAN_DETECTOR, seed),
                Stage.SPAN_DETECTOR,
                config.encoder.d_model,
            )
            theta: DetectorParams = checkpoint.params  # type: ignore[assignment]
            records = span_records(theta, test, checkpoint.vocabulary, span, seed)
            scores.append(evaluate_pooled(records).f1)
        sweep[steps] = mean_std(scores)
        logger.info(f"Fine-tune steps {steps}: span F1 {sweep[steps]['mean']:.4f}")
    return sweep

"""Command-line front end.

Subcommands:
    sample           sample N-way K~2K-shot episodes from a CoNLL-style corpus
    synthesize       write a synthetic typed corpus (train/dev/test type split)
    train-span       meta-train the span detector, one checkpoint per seed
    train-typing     meta-train the entity typer, one checkpoint per seed
    eval             evaluate both stages end to end on the test episodes
    dump-embeddings  write span representations of the test query spans

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

import argparse
import asyncio
import json
import logging
import os
import sys
from dataclasses import replace
from logging.handlers import RotatingFileHandler
from typing import List, Optional

import colorlog

from . import __version__
from .checkpoint import Stage, load_checkpoint
from .config import RunConfig, load_config
from .entity_typing import dump_embeddings
from .episode_io import load_corpus, save_episodes
from .episodes import SplitTag
from .errors import DecomposedNERError
from .pipeline import (
    checkpoint_path,
    eval_command,
    load_split,
    sweep_finetune_steps,
    train_span_command,
    train_typing_command,
    write_report,
)
from .sampler import sample_episodes
from .synthetic import SyntheticConfig, generate_corpus

LOGGER_NAME = "decomposed_meta_ner"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CONSOLE_FORMAT = (
    "%(log_color)s%(asctime)s - %(name)s - %(levelname)s%(reset)s - %(message)s"
)

EXIT_OK = 0


def setup_logging(
    log_level: str = "INFO", log_file: Optional[str] = None
) -> logging.Logger:
    """Configure the package logger: coloured console plus optional rotating file."""
    numeric_level = getattr(logging, log_level.upper(), None)
    if not isinstance(numeric_level, int):
        print(f"Invalid log level: {log_level}")
        numeric_level = logging.INFO

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(numeric_level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    console_handler = colorlog.StreamHandler()
    console_handler.setFormatter(colorlog.ColoredFormatter(CONSOLE_FORMAT))
    logger.addHandler(console_handler)

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)
        # 10MB per file, max 5 files
        file_handler = RotatingFileHandler(
            log_file, maxBytes=10 * 1024 * 1024, backupCount=5
        )
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        logger.addHandler(file_handler)
    return logger


def _int_list(value: str) -> List[int]:
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got '{value}'"
        ) from e


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML run configuration")
    parser.add_argument("--output-dir", default=None, help="Override output_dir")
    parser.add_argument("--seed", type=int, default=None, help="Run a single seed")
    parser.add_argument(
        "--format",
        default=None,
        choices=["canonical", "fewnerd", "crossdataset"],
        help="Episode file format",
    )
    parser.add_argument(
        "--strict",
        dest="strict",
        action="store_true",
        default=None,
        help="Fail on invalid episodes",
    )
    parser.add_argument(
        "--no-strict",
        dest="strict",
        action="store_false",
        help="Skip invalid episodes with a warning",
    )
    parser.add_argument(
        "--max-steps", type=int, default=None, help="Meta-training steps"
    )
    parser.add_argument(
        "--finetune-steps",
        type=int,
        default=None,
        help="Meta-test fine-tune steps of the stage(s) involved",
    )
    parser.add_argument(
        "--no-progress", action="store_true", help="Hide progress bars"
    )


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        prog="decomposed-meta-ner",
        description="Few-shot NER with a meta-learned span detector and entity typer",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Logging level (default: INFO)",
    )
    parser.add_argument(
        "--log-file",
        default=None,
        help="Log file path (default: None, logs to stderr only)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sample = commands.add_parser("sample", help="Sample episodes from a corpus")
    sample.add_argument(
        "--corpus", required=True, help="CoNLL-style token<TAB>tag corpus"
    )
    sample.add_argument(
        "--output", required=True, help="Canonical episode file to write"
    )
    sample.add_argument("--n-way", type=int, default=5)
    sample.add_argument("--k-shot", type=int, default=1)
    sample.add_argument("--query-shots", type=int, default=1)
    sample.add_argument("--episodes", type=int, default=100)
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument(
        "--split", default="train", choices=[tag.value for tag in SplitTag]
    )

    synthesize = commands.add_parser(
        "synthesize", help="Write a synthetic typed corpus"
    )
    synthesize.add_argument("--output-dir", required=True)
    synthesize.add_argument("--n-types", type=int, default=12)
    synthesize.add_argument("--train-types", type=int, default=8)
    synthesize.add_argument("--sentences-per-type", type=int, default=60)
    synthesize.add_argument("--seed", type=int, default=0)

    span = commands.add_parser("train-span", help="Meta-train the span detector")
    _add_run_options(span)
    span.add_argument(
        "--lambda-train",
        type=float,
        default=None,
        help="Max-loss weight on meta-update query losses",
    )
    span.add_argument(
        "--lambda-eval",
        type=float,
        default=None,
        help="Max-loss weight everywhere else",
    )
    span.add_argument("--variant", default=None, choices=["maml", "supervised"])

    typing_ = commands.add_parser("train-typing", help="Meta-train the entity typer")
    _add_run_options(typing_)
    typing_.add_argument(
        "--variant", default=None, choices=["maml", "protonet", "supervised"]
    )

    evaluate = commands.add_parser("eval", help="Evaluate on the test episodes")
    _add_run_options(evaluate)
    evaluate.add_argument("--lambda-eval", type=float, default=None)
    evaluate.add_argument(
        "--min-similarity",
        type=float,
        default=None,
        help="Drop typed spans less similar than this to every prototype",
    )
    evaluate.add_argument(
        "--workers", type=int, default=None, help="Concurrent episodes"
    )
    evaluate.add_argument(
        "--finetune-sweep",
        type=_int_list,
        default=None,
        help="Comma-separated detector fine-tune step counts to sweep",
    )

    dump = commands.add_parser(
        "dump-embeddings", help="Write test span embeddings (TSV)"
    )
    _add_run_options(dump)
    dump.add_argument("--output", default=None, help="TSV path (default: output_dir)")

    return parser.parse_args(argv)


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Fold command-line overrides into the loaded configuration and revalidate."""
    command = args.command
    if args.output_dir is not None:
        config = replace(config, output_dir=args.output_dir)
    if args.seed is not None:
        config = replace(config, seeds=[args.seed])
    data = config.data
    if args.format is not None:
        data = replace(data, format=args.format)
    if args.strict is not None:
        data = replace(data, strict=args.strict)
    span, typing = config.span, config.typing
    if args.max_steps is not None:
        if command == "train-span":
            span = replace(span, meta=replace(span.meta, max_steps=args.max_steps))
        if command == "train-typing":
            typing = replace(
                typing, meta=replace(typing.meta, max_steps=args.max_steps)
            )
    if args.finetune_steps is not None:
        if command in ("train-span", "eval"):
            span = replace(span, finetune_steps=args.finetune_steps)
        if command in ("train-typing", "eval", "dump-embeddings"):
            typing = replace(typing, finetune_steps=args.finetune_steps)
    if getattr(args, "lambda_train", None) is not None:
        span = replace(span, lambda_train=args.lambda_train)
    if getattr(args, "lambda_eval", None) is not None:
        span = replace(span, lambda_eval=args.lambda_eval)
    if getattr(args, "variant", None) is not None:
        if command == "train-span":
            span = replace(span, variant=args.variant)
        else:
            typing = replace(typing, variant=args.variant)
    if getattr(args, "min_similarity", None) is not None:
        typing = replace(typing, min_similarity=args.min_similarity)
    eval_section = config.eval
    if getattr(args, "workers", None) is not None:
        eval_section = replace(eval_section, workers=args.workers)
    config = replace(config, data=data, span=span, typing=typing, eval=eval_section)
    return config.validate()


def run_sample(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    episodes = sample_episodes(
        corpus,
        args.n_way,
        args.k_shot,
        args.query_shots,
        args.episodes,
        args.seed,
        SplitTag(args.split),
    )
    save_episodes(episodes, args.output)
    return EXIT_OK


def run_synthesize(args: argparse.Namespace) -> int:
    corpus = generate_corpus(
        SyntheticConfig(
            n_types=args.n_types,
            train_types=args.train_types,
            sentences_per_type=args.sentences_per_type,
            seed=args.seed,
        )
    )
    paths = corpus.save(args.output_dir)
    logging.getLogger(LOGGER_NAME).info(
        f"Train types {corpus.train_types}, test types {corpus.test_types}; "
        f"wrote {', '.join(str(path) for path in paths.values())}"
    )
    return EXIT_OK


def run_dump_embeddings(config: RunConfig, args: argparse.Namespace) -> int:
    test = load_split(config, SplitTag.TEST)
    for seed in config.seeds:
        checkpoint = load_checkpoint(
            checkpoint_path(config, Stage.ENTITY_TYPER, seed),
            Stage.ENTITY_TYPER,
            config.encoder.d_model,
        )
        output = args.output or config.output_path / f"embeddings.seed{seed}.tsv"
        dump_embeddings(
            checkpoint.params,  # type: ignore[arg-type]
            test,
            output,
            checkpoint.vocabulary,
            config.typing,
            seed=seed,
        )
        if args.output:
            break
    return EXIT_OK


async def run_command(args: argparse.Namespace) -> int:
    """Dispatch one subcommand; returns the exit code."""
    if args.command == "sample":
        return run_sample(args)
    if args.command == "synthesize":
        return run_synthesize(args)

    config = apply_overrides(load_config(args.config), args)
    progress = not args.no_progress
    if args.command == "train-span":
        await asyncio.to_thread(train_span_command, config, None, progress)
    elif args.command == "train-typing":
        await asyncio.to_thread(train_typing_command, config, None, progress)
    elif args.command == "eval":
        report = await eval_command(config)
        sweep = args.finetune_sweep or config.eval.finetune_sweep
        if sweep:
            report["finetune_sweep"] = await asyncio.to_thread(
                sweep_finetune_steps, config, sweep
            )
            write_report(report, config.output_path / config.eval.report)
        print(json.dumps(report["summary"], indent=2))
    elif args.command == "dump-embeddings":
        return run_dump_embeddings(config, args)
    return EXIT_OK


async def main(argv: Optional[List[str]] = None) -> int:
    """Main command-line execution."""
    args = parse_arguments(argv)
    logger = setup_logging(args.log_level, args.log_file)
    try:
        return await run_command(args)
    except DecomposedNERError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"Command failed with exception: {e}", exc_info=True)
        return 1


def run(argv: Optional[List[str]] = None) -> None:
    """Console-script entry point."""
    sys.exit(asyncio.run(main(argv)))

"""Tests for the command-line front end and its exit codes."""

import json
import logging

import pytest

from decomposed_meta_ner.cli import (
    apply_overrides,
    main,
    parse_arguments,
    setup_logging,
)
from decomposed_meta_ner.config import RunConfig
from decomposed_meta_ner.episode_io import load_episodes, save_episodes
from decomposed_meta_ner.episodes import Episode, EpisodeSet
from decomposed_meta_ner.synthetic import SyntheticConfig, generate_corpus

from .helpers import sentence


@pytest.fixture
def corpus_dir(tmp_path):
    settings = SyntheticConfig(n_types=4, train_types=2, sentences_per_type=8)
    generate_corpus(settings).save(tmp_path)
    return tmp_path


async def test_sample_command(corpus_dir):
    output = corpus_dir / "episodes" / "train.jsonl"
    code = await main(
        [
            "sample",
            "--corpus",
            str(corpus_dir / "train.conll"),
            "--output",
            str(output),
            "--n-way",
            "2",
            "--episodes",
            "3",
            "--seed",
            "4",
        ]
    )
    assert code == 0
    episodes = load_episodes(output)
    assert len(episodes) == 3
    assert all(len(episode.types) == 2 for episode in episodes)


async def test_synthesize_command(tmp_path):
    code = await main(
        [
            "synthesize",
            "--output-dir",
            str(tmp_path),
            "--n-types",
            "4",
            "--train-types",
            "2",
            "--sentences-per-type",
            "6",
        ]
    )
    assert code == 0
    names = {path.name for path in tmp_path.iterdir()}
    assert names == {"train.conll", "dev.conll", "test.conll"}


async def test_missing_corpus_is_a_data_error(tmp_path):
    corpus = str(tmp_path / "none.conll")
    code = await main(["sample", "--corpus", corpus, "--output", str(tmp_path / "o")])
    assert code == 2


async def test_bad_config_is_a_config_error(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("span:\n  inner_stpes: 2\n")
    assert await main(["train-span", "--config", str(path)]) == 1


async def test_training_without_episodes_is_a_data_error(tmp_path):
    arguments = ["train-span", "--output-dir", str(tmp_path), "--no-progress"]
    assert await main(arguments) == 2


async def test_overlong_sentence_is_a_data_error(tmp_path):
    long_text = " ".join(f"w{i}" for i in range(200))
    episode = Episode(
        (sentence(long_text, (0, 0, "person")),),
        (sentence("bob left", (0, 0, "person")),),
        ("person",),
        episode_id="long",
    )
    save_episodes(EpisodeSet((episode,)), tmp_path / "train.jsonl")
    config = tmp_path / "run.yaml"
    config.write_text(f"data:\n  train: {tmp_path / 'train.jsonl'}\n")
    arguments = ["train-span", "--config", str(config), "--no-progress"]
    assert await main(arguments + ["--output-dir", str(tmp_path / "run")]) == 2


async def test_eval_without_test_episodes(tmp_path):
    assert await main(["eval", "--output-dir", str(tmp_path)]) == 2
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["test_episodes"] == 0


def test_overrides():
    args = parse_arguments(
        [
            "eval",
            "--seed",
            "3",
            "--finetune-steps",
            "7",
            "--min-similarity",
            "-2.5",
            "--workers",
            "4",
            "--lambda-eval",
            "1.0",
            "--no-strict",
            "--finetune-sweep",
            "0,5",
        ]
    )
    config = apply_overrides(RunConfig(), args)
    assert config.seeds == [3]
    assert config.span.finetune_steps == 7 and config.typing.finetune_steps == 7
    assert config.typing.min_similarity == -2.5
    assert config.eval.workers == 4
    assert config.span.lambda_eval == 1.0
    assert config.data.strict is False
    assert args.finetune_sweep == [0, 5]


def test_max_steps_applies_to_the_trained_stage():
    args = parse_arguments(["train-typing", "--max-steps", "9"])
    config = apply_overrides(RunConfig(), args)
    assert config.typing.meta.max_steps == 9
    assert config.span.meta.max_steps == RunConfig().span.meta.max_steps


def test_setup_logging_with_file(tmp_path):
    log_file = tmp_path / "logs" / "run.log"
    logger = setup_logging("DEBUG", str(log_file))
    logger.debug("hello")
    assert logger.level == logging.DEBUG
    assert len(logger.handlers) == 2
    assert log_file.exists()

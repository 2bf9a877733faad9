"""Tests for YAML run configuration loading and validation."""

import pytest

from decomposed_meta_ner.config import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from decomposed_meta_ner.errors import ConfigError


def test_defaults():
    config = load_config(None)
    assert config.span.lambda_train == 2.0
    assert config.span.lambda_eval == 5.0
    assert config.span.meta.inner_lr == 0.05
    assert config.typing.meta.inner_lr == 0.01
    assert config.typing.distance == "squared_euclidean"
    assert config.typing.min_similarity is None
    assert config.seeds == [0, 1, 2, 3, 4]
    assert config.eval.workers == 1


def test_stage_sections_mix_meta_and_stage_keys():
    config = config_from_dict(
        {
            "span": {"inner_steps": 4, "lambda_train": 1.5, "max_steps": 10},
            "typing": {"meta_lr": 0.1, "distance": "euclidean", "min_similarity": -3},
            "seeds": [7],
        }
    )
    assert config.span.meta.inner_steps == 4
    assert config.span.meta.max_steps == 10
    assert config.span.lambda_train == 1.5
    assert config.typing.meta.meta_lr == 0.1
    assert config.typing.meta.inner_lr == 0.01
    assert config.typing.min_similarity == -3.0
    assert config.seeds == [7]


@pytest.mark.parametrize(
    "data,message",
    [
        ({"span": {"inner_stpes": 2}}, "inner_stpes"),
        ({"model": {}}, "model"),
        ({"encoder": {"d_model": "big"}}, "encoder.d_model"),
        ({"data": {"strict": "yes"}}, "data.strict"),
        ({"span": {"inner_steps": -1}}, "inner_steps"),
        ({"typing": {"distance": "cosine"}}, "typing.distance"),
        ({"typing": {"variant": "bert"}}, "typing.variant"),
        ({"eval": {"workers": 0}}, "eval.workers"),
        ({"data": {"format": "xml"}}, "data.format"),
        ({"seeds": []}, "seeds"),
        ({"seeds": [1, 1]}, "distinct"),
        ({"encoder": {"dropout": 1.0}}, "encoder.dropout"),
    ],
)
def test_invalid_configs(data, message):
    with pytest.raises(ConfigError, match=message):
        config_from_dict(data)


def test_load_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "data:\n"
        "  train: train.jsonl\n"
        "  strict: false\n"
        "encoder:\n"
        "  d_model: 16\n"
        "eval:\n"
        "  finetune_sweep: [0, 5, 10]\n"
        "output_dir: out\n"
    )
    config = load_config(path)
    assert config.data.train == "train.jsonl"
    assert config.data.strict is False
    assert config.encoder.d_model == 16
    assert config.eval.finetune_sweep == [0, 5, 10]
    assert str(config.output_path) == "out"
    assert config.encoder.build(50).vocab_size == 50


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("span: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(broken)
    with pytest.raises(ConfigError):
        config_from_dict(["not", "a", "mapping"])


def test_save_and_reload(tmp_path):
    config = config_from_dict({"typing": {"leave_one_out": True, "inner_steps": 3}})
    path = tmp_path / "saved" / "config.yaml"
    save_config(config, path)
    assert load_config(path) == config
    assert config_to_dict(config)["typing"]["inner_steps"] == 3


def test_for_seed_replaces_both_stage_seeds():
    config = RunConfig()
    seeded = config.for_seed(11)
    assert seeded.span.meta.seed == 11
    assert seeded.typing.meta.seed == 11
    assert config.span.meta.seed == 0

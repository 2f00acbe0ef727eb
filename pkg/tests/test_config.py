"""Pipeline config: JSON round trips, dotted-path overrides, validation."""

import json

import pytest

from raildefect.config import (
    PipelineConfig,
    apply_overrides,
    load_pipeline_config,
    parse_override,
    save_pipeline_config,
)
from raildefect.errors import ConfigError


# Oracle: apply one dotted-path assignment to a plain dict with explicit
# recursion, independent of apply_overrides' loop.
def set_by_path_oracle(obj, path, value):
    if len(path) == 1:
        obj[path[0]] = value
        return
    child = obj.get(path[0])
    if not isinstance(child, dict):
        child = {}
        obj[path[0]] = child
    set_by_path_oracle(child, path[1:], value)


class TestParseOverride:
    def test_int_value(self):
        assert parse_override("train.epochs=3") == (["train", "epochs"], 3)

    def test_float_value(self):
        path, value = parse_override("gan.learning_rate=0.0002")
        assert path == ["gan", "learning_rate"]
        assert value == pytest.approx(2e-4)

    def test_bool_and_null(self):
        assert parse_override("a=true") == (["a"], True)
        assert parse_override("a=null") == (["a"], None)

    def test_quoted_string(self):
        assert parse_override('run_dir="runs/x"') == (["run_dir"], "runs/x")

    def test_bare_string_fallback(self):
        assert parse_override("backbone=desk") == (["backbone"], "desk")

    def test_value_containing_equals(self):
        assert parse_override("a=b=c") == (["a"], "b=c")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_override("train.epochs")

    def test_empty_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_override("=5")


class TestApplyOverrides:
    def test_matches_oracle_on_mixed_paths(self):
        specs = [
            ("train.epochs=2", ["train", "epochs"], 2),
            ("seed=9", ["seed"], 9),
            ("gan.lambda_cycle=5.0", ["gan", "lambda_cycle"], 5.0),
            ("corpus.image_size=32", ["corpus", "image_size"], 32),
        ]
        got = apply_overrides({}, [s for s, _, _ in specs])
        want = {}
        for _, path, value in specs:
            set_by_path_oracle(want, path, value)
        assert got == want

    def test_overwrites_existing_leaf(self):
        obj = {"train": {"epochs": 10, "seed": 1}}
        apply_overrides(obj, ["train.epochs=2"])
        assert obj == {"train": {"epochs": 2, "seed": 1}}

    def test_later_override_wins(self):
        obj = apply_overrides({}, ["seed=1", "seed=2"])
        assert obj == {"seed": 2}

    def test_creates_intermediate_dicts(self):
        obj = apply_overrides({}, ["a.b.c=1"])
        assert obj == {"a": {"b": {"c": 1}}}


class TestPipelineConfig:
    def test_json_round_trip(self):
        cfg = PipelineConfig(seed=4, select_k=12, curation_mode="threshold")
        cfg2 = PipelineConfig.from_json(cfg.to_json())
        assert cfg2.to_json() == cfg.to_json()

    def test_default_selection_sizes(self):
        cfg = PipelineConfig()
        assert cfg.synth_n == 1000
        assert cfg.select_k == 70

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            PipelineConfig.from_json({"sedd": 3})

    def test_bad_curation_mode(self):
        with pytest.raises(ConfigError, match="curation_mode"):
            PipelineConfig(curation_mode="vote").validate()

    def test_negative_select_k(self):
        with pytest.raises(ConfigError, match="select_k"):
            PipelineConfig(select_k=-1).validate()

    def test_zero_synth_n(self):
        with pytest.raises(ConfigError, match="synth_n"):
            PipelineConfig(synth_n=0).validate()

    def test_unknown_backbone(self):
        with pytest.raises(ConfigError, match="backbone"):
            PipelineConfig(backbone="resnet999").validate()

    def test_nested_validation_propagates(self):
        cfg = PipelineConfig()
        cfg.train.epochs = -1
        with pytest.raises(ConfigError):
            cfg.validate()


class TestLoadPipelineConfig:
    def test_defaults_without_file(self):
        cfg = load_pipeline_config()
        assert cfg.to_json() == PipelineConfig().to_json()

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "cfg.json"
        save_pipeline_config(PipelineConfig(seed=7, backbone="micro"), path)
        cfg = load_pipeline_config(path)
        assert cfg.seed == 7
        assert cfg.backbone == "micro"

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 1, "train": {"epochs": 8}}))
        cfg = load_pipeline_config(path, ["seed=5", "train.epochs=2"])
        assert cfg.seed == 5
        assert cfg.train.epochs == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_pipeline_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_pipeline_config(path)

    def test_non_object_json(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            load_pipeline_config(path)

    def test_override_into_missing_section(self):
        cfg = load_pipeline_config(None, ["tsne.perplexity=7.5"])
        assert cfg.tsne.perplexity == 7.5

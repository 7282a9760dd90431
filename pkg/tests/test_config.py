import json

import pytest

from qtlab.config import (
    DEFAULTS,
    apply_overrides,
    bundled_config,
    load_config,
    merge,
    model_config,
    outlier_objective,
    task_config,
    train_config,
)
from qtlab.errors import ConfigurationError
from qtlab.outlier import Schedule


class TestMerge:
    def test_nested_keys_are_merged_not_replaced(self):
        out = merge({"a": {"x": 1, "y": 2}, "b": 3}, {"a": {"y": 5}})
        assert out == {"a": {"x": 1, "y": 5}, "b": 3}

    def test_inputs_are_not_mutated(self):
        base = {"a": {"x": 1}}
        merge(base, {"a": {"x": 2}})
        assert base == {"a": {"x": 1}}


class TestOverrides:
    def test_dotted_path_sets_nested_value(self):
        out = apply_overrides({"finetune": {"steps": 300}}, ["finetune.steps=50"])
        assert out["finetune"]["steps"] == 50

    def test_value_parsed_as_json(self):
        out = apply_overrides({"injection": {}}, ['injection.targets=["value"]', "injection.magnitude=12.5"])
        assert out["injection"] == {"targets": ["value"], "magnitude": 12.5}

    def test_non_json_value_kept_as_string(self):
        out = apply_overrides({"outlier_loss": {}}, ["outlier_loss.schedule=cosine"])
        assert out["outlier_loss"]["schedule"] == "cosine"

    def test_missing_equals_sign_rejected(self):
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["finetune.steps"])


class TestLoadConfig:
    def test_defaults_validate(self):
        assert load_config() == DEFAULTS

    def test_file_merged_over_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"finetune": {"steps": 7}}))
        cfg = load_config(path)
        assert cfg["finetune"]["steps"] == 7
        assert cfg["finetune"]["learning_rate"] == DEFAULTS["finetune"]["learning_rate"]

    @pytest.mark.parametrize("name", ["demo", "quick", "demo.json"])
    def test_bundled_configs_load(self, name):
        assert bundled_config(name).is_file()
        load_config(name)

    @pytest.mark.parametrize("override", [
        "bits=[1]",
        "calibration.methods=[\"kmeans\"]",
        "outlier_loss.alpha=1.5",
        "injection.fraction=0.2",
        "nonsense.key=1",
        "seeds=[]",
    ])
    def test_invalid_values_rejected(self, override):
        with pytest.raises(ConfigurationError):
            load_config(overrides=[override])

    def test_unknown_data_key_rejected(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides=["data.colour=1"])

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_config(path)

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigurationError):
            load_config("/nonexistent/config.json")


class TestBuilders:
    def test_seed_threaded_into_typed_configs(self):
        cfg = load_config()
        assert task_config(cfg, 3).seed == 3
        assert model_config(cfg, 4).seed == 4
        assert train_config(cfg["finetune"], 5).seed == 5

    def test_outlier_objective_spans_finetune_steps(self):
        loss = outlier_objective(load_config(overrides=["finetune.steps=40", "outlier_loss.schedule=cosine"]))
        assert loss.total_steps == 40
        assert loss.schedule is Schedule.COSINE
        assert loss.alpha == 0.5

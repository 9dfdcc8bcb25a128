import pytest

from config import (DEFAULT_CCD_WEIGHT, config_from_dict, config_to_dict, load_config, replace_section)
from utils.errors import ConfigError


class TestDefaults:
    def test_empty_object_is_a_full_config(self):
        config = config_from_dict({})
        assert config.method == "ccd"
        assert config.weights.kappa == config.weights.lambda_ == config.weights.eta == DEFAULT_CCD_WEIGHT
        assert config.ccd.diag_only and config.ccd.damping == 1e-3
        assert config.dataset.seed is None and config.dataset_seed == config.seed

    def test_dump_spells_out_every_default(self):
        data = config_to_dict(config_from_dict({"seed": 4}))
        assert data["weights"] == {"kappa": DEFAULT_CCD_WEIGHT, "lambda": DEFAULT_CCD_WEIGHT,
                                   "eta": DEFAULT_CCD_WEIGHT}
        assert data["epochs"] is None
        assert config_from_dict(data) == config_from_dict({"seed": 4})

    def test_int_accepted_for_float(self):
        assert config_from_dict({"learning_rate": 1}).learning_rate == 1.0

    def test_replay_methods(self):
        assert config_from_dict({"method": "er"}).uses_replay
        assert not config_from_dict({"method": "ewc"}).uses_replay


class TestRejected:
    @pytest.mark.parametrize("data, key", [
        ({"learning_rat": 0.1}, "learning_rat"),
        ({"weights": {"lambda_": 1.0}}, "weights.lambda_"),
        ({"dataset": {"kind": "mixture2d", "tasks": 3}}, "dataset.tasks"),
    ])
    def test_unknown_key_named(self, data, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            config_from_dict(data)

    @pytest.mark.parametrize("data", [
        {"seed": "0"},
        {"seed": 1.5},
        {"batch_size": True},
        {"reinit_head": 1},
        {"method": 3},
        {"dataset": [1, 2]},
        {"epochs": "two"},
    ])
    def test_wrong_types(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    @pytest.mark.parametrize("data", [
        {"method": "gan"},
        {"method": "er", "buffer_capacity": 0},
        {"steps_per_task": 0},
        {"epochs": 0},
        {"label_dropout": 1.0},
        {"weights": {"kappa": -1.0}},
        {"weights": {"eta": float("inf")}},
        {"schedule": {"beta_min": 0.2, "beta_max": 0.1}},
        {"schedule": {"T": 1}},
        {"dataset": {"kind": "spirals"}},
        {"dataset": {"samples_per_task": 5}},
        {"eval": {"n_eval": 1}},
        {"ccd": {"damping": 0.0}},
        {"schema_version": 2},
    ])
    def test_invalid_values(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_non_replay_method_allows_empty_buffer(self):
        assert config_from_dict({"method": "naive", "buffer_capacity": 0}).buffer_capacity == 0


class TestLoadConfig:
    def test_load(self, write_config, tiny_config_dict):
        config = load_config(write_config(dict(tiny_config_dict, method="agem")))
        assert config.method == "agem"
        assert config.dataset.samples_per_task == 100

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"method": "er",', encoding="utf-8")
        with pytest.raises(ConfigError, match="malformed JSON"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_top_level_must_be_object(self, write_config):
        with pytest.raises(ConfigError):
            load_config(write_config([1, 2, 3]))


class TestReplaceSection:
    def test_override_revalidates(self, tiny_config):
        assert replace_section(tiny_config, seed=9).seed == 9
        with pytest.raises(ConfigError):
            replace_section(tiny_config, method="vae")

    def test_original_untouched(self, tiny_config):
        replace_section(tiny_config, method="ccd")
        assert tiny_config.method == "er"

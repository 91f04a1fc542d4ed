import json

import pytest

from experiment_config import (
    ConfigError, ExperimentConfig, config_from_dict, ensure_output_dir, env_glyph_dir, env_output_dir,
    env_parallel, load_config,
)


class TestConfigFromDict:

    def test_empty_object_gives_defaults(self):
        config = config_from_dict({})
        assert config.model == "devi"
        assert config.seeds == [1, 2, 3, 4, 5]
        assert config.transfer_prototypes == ["Ring", "HardRing", "Tree"]
        assert config.eval_episodes == 100
        assert config.temperature == 0.05
        assert config.protocol().planner.temperature == config.schedule(1).planner_config().temperature

    def test_overrides(self):
        config = config_from_dict({"model": "dqn", "train_prototypes": ["Tree"], "gamma": 0.5,
                                   "seeds": [7], "double_dqn": True})
        assert (config.model, config.train_prototypes, config.gamma, config.seeds) == ("dqn", ["Tree"], 0.5, [7])
        assert config.double_dqn is True

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"learning_rates": 0.1})
        assert exc.value.key == "learning_rates"
        assert "unknown key" in str(exc.value)

    def test_unknown_prototype(self):
        with pytest.raises(ConfigError, match="unknown prototype 'Square'") as exc:
            config_from_dict({"train_prototypes": ["Ring", "Square"]})
        assert exc.value.key == "train_prototypes"

    @pytest.mark.parametrize("key, value", [
        ("burn_in", 10.5),
        ("burn_in", True),
        ("gamma", "0.9"),
        ("double_dqn", 1),
        ("seeds", [1, "2"]),
        ("train_prototypes", "Ring"),
        ("output_dir", ""),
    ])
    def test_wrong_types(self, key, value):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({key: value})
        assert exc.value.key == key

    @pytest.mark.parametrize("key, value", [
        ("gamma", 0.0),
        ("gamma", 1.5),
        ("temperature", 0),
        ("sweeps", 0),
        ("store_size", 0),
        ("noise_rate", 0.75),
        ("seeds", []),
        ("seeds", [1, 1]),
        ("model", "a2c"),
        ("encoder", "resnet"),
        ("transfer_split", "validation"),
    ])
    def test_out_of_range(self, key, value):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({key: value})
        assert exc.value.key == key

    def test_gamma_one_is_allowed(self):
        assert config_from_dict({"gamma": 1}).gamma == 1

    def test_burn_in_must_cover_minibatch(self):
        with pytest.raises(ConfigError, match="minibatch_size") as exc:
            config_from_dict({"burn_in": 50, "minibatch_size": 100})
        assert exc.value.key == "burn_in"

    def test_dqn_replay_must_cover_minibatch(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"model": "dqn", "replay_capacity": 10, "burn_in": 100})
        assert exc.value.key == "replay_capacity"

    def test_not_an_object(self):
        with pytest.raises(ConfigError, match="JSON object"):
            config_from_dict([1, 2])

    def test_config_error_is_value_error(self):
        assert issubclass(ConfigError, ValueError)


class TestDerivedObjects:

    def test_schedule_uses_seed(self):
        config = config_from_dict({"sweeps": 4, "store_size": 7, "total_minibatches": 3})
        schedule = config.schedule(seed=42)
        assert (schedule.seed, schedule.sweeps, schedule.store_size, schedule.total_minibatches) == (42, 4, 7, 3)

    def test_protocol(self):
        protocol = config_from_dict({"eval_episodes": 9, "samples_per_pair": 2, "gamma": 0.8}).protocol()
        assert (protocol.episodes, protocol.samples_per_pair, protocol.gamma) == (9, 2, 0.8)
        assert protocol.planner.gamma == 0.8

    def test_to_dict_round_trip(self):
        config = config_from_dict({"seeds": [3, 4], "relearn": True})
        assert config_from_dict(config.to_dict()) == config


class TestLoadConfig:

    def test_none_gives_defaults(self):
        assert load_config(None) == ExperimentConfig()

    def test_reads_file(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"model": "dqn", "seeds": [2]}))
        config = load_config(str(path))
        assert config.model == "dqn" and config.seeds == [2]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="file not found") as exc:
            load_config(str(tmp_path / "missing.json"))
        assert exc.value.key == "--config"

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{model: devi")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(str(path))


class TestEnvironment:

    def test_output_dir_default(self, monkeypatch):
        monkeypatch.delenv("DEVI_OUTPUT_DIR", raising=False)
        assert env_output_dir() == "runs"
        monkeypatch.setenv("DEVI_OUTPUT_DIR", "/tmp/devi-runs")
        assert env_output_dir() == "/tmp/devi-runs"
        assert ExperimentConfig().output_dir == "/tmp/devi-runs"

    def test_parallel(self, monkeypatch):
        monkeypatch.delenv("DEVI_PARALLEL", raising=False)
        assert env_parallel() == 1
        monkeypatch.setenv("DEVI_PARALLEL", "4")
        assert env_parallel() == 4

    @pytest.mark.parametrize("raw", ["many", "0"])
    def test_parallel_invalid(self, monkeypatch, raw):
        monkeypatch.setenv("DEVI_PARALLEL", raw)
        with pytest.raises(ConfigError) as exc:
            env_parallel()
        assert exc.value.key == "DEVI_PARALLEL"

    def test_glyph_dir(self, monkeypatch):
        monkeypatch.setenv("DEVI_GLYPH_DIR", "")
        assert env_glyph_dir() is None
        monkeypatch.setenv("DEVI_GLYPH_DIR", "/data/glyphs")
        assert env_glyph_dir() == "/data/glyphs"


class TestOutputDir:

    def test_creates_nested(self, tmp_path):
        target = tmp_path / "a" / "b"
        assert ensure_output_dir(str(target)) == str(target)
        assert target.is_dir()

    def test_cannot_create_under_file(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ConfigError) as exc:
            ensure_output_dir(str(blocker / "sub"))
        assert exc.value.key == "output_dir"

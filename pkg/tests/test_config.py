import json

import pytest

from config import ENV_THREADS, PRESETS, RunConfig, apply_threads, threads_from_env
from errors import ConfigError


class TestRunConfig:
    def test_defaults_are_valid(self):
        config = RunConfig().validate()
        assert config.schedule.M1 == 48
        assert config.model.backend == "photometric"

    def test_overrides_use_dotted_paths(self):
        config = RunConfig().with_overrides({"schedule.K": 2, "N": 3, "thresholds.tau_p": None})
        assert config.schedule.K == 2
        assert config.N == 3
        assert config.thresholds.tau_p == 0.3

    def test_unknown_override(self):
        with pytest.raises(ConfigError) as e:
            RunConfig().with_overrides({"schedule.levels": 2})
        assert e.value.field == "schedule.levels"

    def test_integer_accepted_for_float_field(self):
        config = RunConfig.from_dict({"schedule": {"delta1": 10}})
        assert config.schedule.delta1 == 10.0
        assert isinstance(config.schedule.delta1, float)

    @pytest.mark.parametrize("data, field", [
        ({"N": "four"}, "N"),
        ({"N": 2.5}, "N"),
        ({"model": {"use_spade": 1}}, "model.use_spade"),
        ({"scaling": {"C": None}}, "scaling.C"),
        ({"schedule": 3}, "schedule"),
        ({"colour": True}, "colour"),
    ])
    def test_type_errors_name_the_field(self, data, field):
        with pytest.raises(ConfigError) as e:
            RunConfig.from_dict(data)
        assert e.value.field == field

    @pytest.mark.parametrize("overrides, field", [
        ({"schedule.M1": 50}, "schedule.M1"),
        ({"N": 0}, "N"),
        ({"model.backend": "stereo"}, "model.backend"),
        ({"model.window": 4}, "model.window"),
        ({"scaling.adaptive": False}, "scaling.d1_min"),
        ({"scaling.d_min": 2.0, "scaling.d_max": 1.0}, "scaling.d_min"),
    ])
    def test_validation(self, overrides, field):
        with pytest.raises(ConfigError) as e:
            RunConfig().with_overrides(overrides).validate()
        assert e.value.field == field

    def test_dtu_preset(self):
        config = RunConfig().with_overrides(PRESETS["dtu"]).validate()
        assert not config.scaling.adaptive
        assert (config.scaling.d1_min, config.schedule.delta1) == (425.0, 10.6)

    def test_resolved_file_reloads(self, tmp_path):
        config = RunConfig().with_overrides({"seed": 9, "schedule.delta1": 2.5})
        path = config.write_resolved(tmp_path)
        assert list(json.loads(path.read_text())) == sorted(config.to_dict())
        assert RunConfig.load(path).to_dict() == config.to_dict()

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{\"N\": 4,")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "c.json")


class TestThreads:
    def test_unset_means_automatic(self, monkeypatch):
        monkeypatch.delenv(ENV_THREADS, raising=False)
        assert threads_from_env() == 0
        assert apply_threads() >= 1

    def test_explicit_count(self, monkeypatch):
        monkeypatch.setenv(ENV_THREADS, "2")
        assert threads_from_env() == 2

    @pytest.mark.parametrize("raw", ["many", "-1"])
    def test_bad_values(self, monkeypatch, raw):
        monkeypatch.setenv(ENV_THREADS, raw)
        with pytest.raises(ConfigError):
            threads_from_env()

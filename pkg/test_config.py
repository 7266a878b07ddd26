import json
from pathlib import Path

import pytest

from app import settings
from app.config import ExperimentConfig, UNetConfig, apply_overrides, config_hash, load_config
from app.errors import ConfigurationError

TOY_CONFIG = Path(__file__).parent / "configs" / "toy.json"


def _write(tmp_path, data) -> Path:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


class TestDefaults:
    def test_documented_defaults(self):
        cfg = load_config()
        assert cfg == ExperimentConfig()
        assert cfg.diffusion.guidance.p_dp == 0.1
        assert cfg.diffusion.guidance.lambda2 == 0.0
        assert (cfg.diffusion.schedule.T, cfg.diffusion.schedule.beta_start, cfg.diffusion.schedule.beta_end) == (
            1000, 1e-4, 0.02
        )
        assert cfg.diffusion.unet.in_channels == 2
        assert not cfg.prior.unet.time_embedding
        assert cfg.prior.loss.lambda1 == 0.1
        assert cfg.diffusion.clip_range == (-1.0, 3.0)

    def test_toy_config_loads(self):
        cfg = load_config(TOY_CONFIG)
        assert cfg.data.image_size == cfg.prior.unet.image_size == cfg.diffusion.unet.image_size == 32


class TestLoadConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(_write(tmp_path, {"data": {"imagesize": 32}}))

    def test_split_fractions_must_sum_to_one(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(_write(tmp_path, {"data": {"train_fraction": 0.5}}))

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_config(bad)

    def test_file_and_overrides_merge(self, tmp_path):
        path = _write(tmp_path, {"data": {"image_size": 32}})
        cfg = load_config(path, ["data.n_phantoms=6", "diffusion.guidance.p_dp=0.3", 'eval.split="val"'])
        assert (cfg.data.image_size, cfg.data.n_phantoms) == (32, 6)
        assert cfg.diffusion.guidance.p_dp == 0.3
        assert cfg.eval.split == "val"

    def test_bad_overrides(self):
        with pytest.raises(ConfigurationError):
            load_config(None, ["diffusion.guidance.p_dp"])
        with pytest.raises(ConfigurationError):
            load_config(None, ["nowhere.key=1"])
        with pytest.raises(ConfigurationError):
            load_config(None, ["diffusion.guidance.p_dp=1.5"])

    def test_apply_overrides_parses_json_values(self):
        data = apply_overrides({"a": {"b": 1}}, ["a.b=[1, 2]", "a.c=text", "a.d=false"])
        assert data == {"a": {"b": [1, 2], "c": "text", "d": False}}


class TestUNetConfig:
    def test_needs_four_levels(self):
        with pytest.raises(ValueError):
            UNetConfig(channel_multipliers=[1, 2, 2])

    def test_attention_levels_in_range(self):
        with pytest.raises(ValueError):
            UNetConfig(attention_levels=[4])
        assert UNetConfig(attention_levels=[3, 2, 3]).attention_levels == [2, 3]


def test_config_hash():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert config_hash(a) == config_hash(b)
    changed = load_config(None, ["seeds.root=1"])
    assert config_hash(changed) != config_hash(a)


class TestSettings:
    def test_environment(self, output_root):
        assert settings.output_root() == output_root
        assert settings.device_name() == "cpu"
        assert settings.log_level() == "WARNING"
        assert not settings.progress_enabled()

    def test_registry_defaults_under_output_root(self, monkeypatch, output_root):
        monkeypatch.delenv("SINOGUIDE_REGISTRY_URL")
        assert settings.registry_url() == f"sqlite:///{output_root / 'registry.db'}"

import os
from pathlib import Path

import pytest
import torch

from app.backbone import build_unet
from app.checkpoints import CheckpointManifest, rng_state_hash, save_checkpoint
from app.config import DataConfig, DiffusionConfig, OptimConfig, ScheduleConfig, UNetConfig
from app.tomo_sim import build_dataset

TINY_DATA = DataConfig(image_size=32, n_phantoms=4, rotations=2, mlem_iters=5, mlem_subsets=4)
TINY_NET = dict(base_channels=8, channel_multipliers=[1, 1, 2, 2], attention_levels=[3])


def pytest_collection_modifyitems(config, items):
    if os.getenv("SINOGUIDE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="training experiment; set SINOGUIDE_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    """Every test writes under its own output root and registry."""
    root = tmp_path / "runs"
    monkeypatch.setenv("SINOGUIDE_OUTPUT_ROOT", str(root))
    monkeypatch.setenv("SINOGUIDE_REGISTRY_URL", f"sqlite:///{tmp_path / 'registry.db'}")
    monkeypatch.setenv("SINOGUIDE_LOG_LEVEL", "WARNING")
    monkeypatch.setenv("SINOGUIDE_DEVICE", "cpu")
    return root


def _unet(size: int, **overrides) -> UNetConfig:
    fields = dict(TINY_NET, image_size=size)
    fields.update(overrides)
    return UNetConfig(**fields)


@pytest.fixture
def unet16():
    """Factory for 16x16 toy backbones."""
    return lambda **kw: _unet(16, **kw)


@pytest.fixture
def unet32():
    """Factory for 32x32 toy backbones (the tiny dataset's size)."""
    return lambda **kw: _unet(32, **kw)


@pytest.fixture
def prior_cfg32():
    return _unet(32, time_embedding=False)


@pytest.fixture
def denoiser_cfg32():
    return _unet(32, in_channels=2)


@pytest.fixture
def tiny_diffusion_cfg(denoiser_cfg32):
    return DiffusionConfig(
        unet=denoiser_cfg32,
        schedule=ScheduleConfig(T=10),
        optim=OptimConfig(lr=1e-3, batch_size=2, epochs=1),
        eval_every=1,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """4 phantoms x 2 rotations at 32x32: 4 train, 2 val, 2 test items. Read-only."""
    out = tmp_path_factory.mktemp("tiny_data")
    build_dataset(TINY_DATA, out, root_seed=0)
    return out


def write_checkpoint(
    path: Path, cfg: UNetConfig, kind: str, *, seed: int = 0, num_timesteps=None, prior_path=None, zero=False
) -> Path:
    torch.manual_seed(seed)
    net = build_unet(cfg)
    if zero:
        with torch.no_grad():
            for param in net.parameters():
                param.zero_()
    manifest = CheckpointManifest(
        kind=kind,
        unet=cfg,
        in_channels=cfg.in_channels,
        out_channels=cfg.out_channels,
        num_timesteps=num_timesteps,
        config_hash="test",
        root_seed=seed,
        rng_state_hash=rng_state_hash(),
        param_count=net.parameter_count,
        prior_path=str(prior_path) if prior_path else None,
    )
    return save_checkpoint(path, net, manifest)


@pytest.fixture
def make_checkpoint():
    return write_checkpoint


@pytest.fixture(scope="session")
def prior_ckpt(tmp_path_factory) -> Path:
    """Untrained 32x32 prior checkpoint shared by the feature tests."""
    cfg = _unet(32, time_embedding=False)
    return write_checkpoint(tmp_path_factory.mktemp("prior") / "best.pt", cfg, "prior", seed=3)


@pytest.fixture(scope="session")
def zero_prior_ckpt(tmp_path_factory) -> Path:
    """32x32 prior checkpoint with every weight zero, so all its taps are zero."""
    cfg = _unet(32, time_embedding=False)
    return write_checkpoint(tmp_path_factory.mktemp("zero_prior") / "best.pt", cfg, "prior", seed=3, zero=True)

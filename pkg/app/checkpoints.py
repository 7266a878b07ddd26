"""Checkpoint files and run manifests.

A checkpoint is ``<name>.pt`` (a ``torch.save`` dict with the model state)
next to ``<name>.json``, a :class:`CheckpointManifest` describing how to
rebuild the network and where the weights came from. Every directory a stage
writes also gets a ``run.json`` :class:`RunManifest`.
"""
from __future__ import annotations

import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, Field

from .backbone import FeatureUNet, build_unet
from .config import UNetConfig
from .errors import ConfigurationError, DependencyError

logger = logging.getLogger(__name__)

CheckpointKind = Literal["prior", "guided", "cdpm", "regression"]
RUN_MANIFEST_NAME = "run.json"


class CheckpointManifest(BaseModel):
    kind: CheckpointKind
    unet: UNetConfig
    in_channels: int
    out_channels: int
    epoch: int = 0
    step: int = 0
    num_timesteps: Optional[int] = None
    config_hash: str
    root_seed: int
    rng_state_hash: str
    param_count: int
    prior_hash: Optional[str] = None
    prior_path: Optional[str] = None
    ema: bool = False
    best_val_loss: Optional[float] = None


class RunManifest(BaseModel):
    stage: str
    config_hash: str
    root_seed: int
    created_at: datetime = Field(default_factory=datetime.utcnow)
    extra: Dict[str, Any] = Field(default_factory=dict)


def sidecar_path(ckpt_path: Path) -> Path:
    return Path(ckpt_path).with_suffix(".json")


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def rng_state_hash() -> str:
    return hashlib.sha256(torch.get_rng_state().numpy().tobytes()).hexdigest()


def save_checkpoint(path: Path, net: nn.Module, manifest: CheckpointManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
    torch.save({"model_state_dict": state, "epoch": manifest.epoch, "step": manifest.step}, path)
    sidecar_path(path).write_text(manifest.model_dump_json(indent=2))
    logger.debug("Saved %s checkpoint to %s (epoch %d)", manifest.kind, path, manifest.epoch)
    return path


def read_manifest(path: Path) -> CheckpointManifest:
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise DependencyError(f"checkpoint {path} (or its manifest) not found")
    return CheckpointManifest.model_validate_json(side.read_text())


def load_checkpoint(path: Path, kind: Optional[str] = None, map_location="cpu") -> Tuple[FeatureUNet, CheckpointManifest]:
    """Rebuild the network recorded in the manifest and load its weights."""
    manifest = read_manifest(path)
    if kind is not None and manifest.kind != kind:
        raise ConfigurationError(f"checkpoint {path} has kind '{manifest.kind}', expected '{kind}'")
    net = build_unet(manifest.unet)
    payload = torch.load(Path(path), map_location=map_location)
    net.load_state_dict(payload["model_state_dict"])
    net.eval()
    return net, manifest


def write_run_manifest(directory: Path, stage: str, config_hash: str, root_seed: int, **extra: Any) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(stage=stage, config_hash=config_hash, root_seed=root_seed, extra=extra)
    path = directory / RUN_MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2))
    return path


def append_metrics(path: Path, record: Dict[str, Any]) -> None:
    """Append one JSON line to a run's metrics log."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path: Path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

"""Deterministic sinogram -> image regression baseline trained with plain MSE."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FeatureUNet, build_unet
from .checkpoints import CheckpointManifest, load_checkpoint
from .config import RegressionConfig
from .data import PairDataset
from .errors import ConfigurationError
from .trainer import FitResult, fit_supervised

logger = logging.getLogger(__name__)


def train_regression(
    dataset_dir: Path,
    cfg: RegressionConfig,
    out_dir: Path,
    *,
    root_seed: int = 0,
    config_hash: str = "",
    device="cpu",
) -> FitResult:
    if cfg.unet.time_embedding or cfg.unet.in_channels != 1:
        raise ConfigurationError("the regression baseline takes one sinogram channel and no timestep")
    train_set = PairDataset(dataset_dir, "train")
    val_set = PairDataset(dataset_dir, "val")
    train_set.require_image_size(cfg.unet.image_size)

    torch.manual_seed(root_seed)
    net = build_unet(cfg.unet)
    return fit_supervised(
        net,
        train_set,
        val_set,
        F.mse_loss,
        cfg.optim,
        out_dir,
        kind="regression",
        run=f"regression:{config_hash[:12]}",
        config_hash=config_hash,
        root_seed=root_seed,
        device=device,
    )


def load_regression(path: Path, device="cpu") -> Tuple[FeatureUNet, CheckpointManifest]:
    net, manifest = load_checkpoint(path, kind="regression", map_location=device)
    return net.to(device), manifest


@torch.no_grad()
def predict(net: FeatureUNet, sinogram: Union[np.ndarray, torch.Tensor], device="cpu") -> np.ndarray:
    """One forward pass on a gridded sinogram; returns an (H, W) image."""
    x = torch.as_tensor(sinogram, dtype=torch.float32)
    while x.dim() < 4:
        x = x[None]
    net.eval()
    return net(x.to(device))[0, 0].cpu().numpy().astype(np.float64)

"""Prior network: a time-free U-Net trained to map sinograms to reference
images, whose hierarchical activations guide the diffusion denoiser.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FeaturePyramid, build_unet, forward_with_taps, tap_shapes
from .checkpoints import file_sha256, load_checkpoint
from .config import PriorConfig, PriorLossConfig, UNetConfig
from .data import PairDataset
from .errors import ConfigurationError, ShapeError, check_same_shape
from .tomo_sim import Sinogram, sinogram_to_grid
from .trainer import FitResult, fit_supervised
from .wavelet import dwt_loss

logger = logging.getLogger(__name__)


def prior_loss(pred: torch.Tensor, target: torch.Tensor, cfg: PriorLossConfig) -> torch.Tensor:
    """MSE plus ``lambda1`` times the high-frequency wavelet loss."""
    check_same_shape(pred.shape, target.shape, "prior_loss inputs")
    mse = F.mse_loss(pred, target)
    if cfg.lambda1 == 0:
        return mse
    return mse + cfg.lambda1 * dwt_loss(pred, target, include_ll=cfg.include_ll)


def train_prior(
    dataset_dir: Path,
    cfg: PriorConfig,
    out_dir: Path,
    *,
    root_seed: int = 0,
    config_hash: str = "",
    device="cpu",
) -> FitResult:
    if cfg.unet.in_channels != 1 or cfg.unet.time_embedding:
        raise ConfigurationError("the prior network takes one sinogram channel and no timestep")
    train_set = PairDataset(dataset_dir, "train")
    val_set = PairDataset(dataset_dir, "val")
    train_set.require_image_size(cfg.unet.image_size)

    torch.manual_seed(root_seed)
    net = build_unet(cfg.unet)
    return fit_supervised(
        net,
        train_set,
        val_set,
        lambda pred, target: prior_loss(pred, target, cfg.loss),
        cfg.optim,
        out_dir,
        kind="prior",
        run=f"prior:{config_hash[:12]}",
        config_hash=config_hash,
        root_seed=root_seed,
        device=device,
    )


def check_compatible(prior_cfg: UNetConfig, denoiser_cfg: UNetConfig) -> None:
    """Prior taps must have exactly the shapes the denoiser's bias ports take."""
    if tap_shapes(prior_cfg) != tap_shapes(denoiser_cfg):
        raise ConfigurationError(
            f"prior taps {tap_shapes(prior_cfg)} do not match denoiser ports {tap_shapes(denoiser_cfg)}"
        )


class PyramidCache:
    """On-disk pyramids, one file per item, under a directory named by the
    prior checkpoint's hash.
    """

    def __init__(self, root: Path, checkpoint_hash: str):
        self.dir = Path(root) / checkpoint_hash

    def path(self, item_id: str) -> Path:
        return self.dir / f"{item_id}.pt"

    def get(self, item_id: str) -> Optional[FeaturePyramid]:
        path = self.path(item_id)
        if not path.exists():
            return None
        payload = torch.load(path, map_location="cpu")
        return FeaturePyramid(payload["b_d"], payload["b_m"])

    def put(self, item_id: str, pyramid: FeaturePyramid) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        torch.save({"b_d": [t.cpu() for t in pyramid.b_d], "b_m": [t.cpu() for t in pyramid.b_m]}, self.path(item_id))


def _stack(pyramids: List[FeaturePyramid]) -> FeaturePyramid:
    return FeaturePyramid(
        [torch.stack([p.b_d[i] for p in pyramids]) for i in range(len(pyramids[0].b_d))],
        [torch.stack([p.b_m[i] for p in pyramids]) for i in range(len(pyramids[0].b_m))],
    )


def _unstack(pyramid: FeaturePyramid) -> List[FeaturePyramid]:
    batch = pyramid.b_d[0].shape[0]
    return [FeaturePyramid([t[i] for t in pyramid.b_d], [t[i] for t in pyramid.b_m]) for i in range(batch)]


class PriorFeatureExtractor:
    """Serves pyramids from a trained prior checkpoint.

    Frozen by default: parameters do not require grad and extraction runs
    under ``torch.no_grad`` in eval mode. ``trainable=True`` hands out a
    network that can be fine-tuned jointly; the checkpoint file is never
    written back.
    """

    def __init__(self, ckpt_path: Path, device="cpu", cache: Optional[PyramidCache] = None, trainable: bool = False):
        self.ckpt_path = Path(ckpt_path)
        self.net, self.manifest = load_checkpoint(self.ckpt_path, kind="prior")
        self.net.to(device)
        self.device = device
        self.checkpoint_hash = file_sha256(self.ckpt_path)
        self.trainable = trainable
        self.cache = None if trainable else cache
        if not trainable:
            self.net.requires_grad_(False)
        self.net.eval()

    @property
    def config(self) -> UNetConfig:
        return self.manifest.unet

    def check_compatible(self, denoiser_cfg: UNetConfig) -> None:
        check_compatible(self.config, denoiser_cfg)

    def _run(self, sinograms: torch.Tensor) -> FeaturePyramid:
        if self.trainable:
            self.net.train()
            return forward_with_taps(self.net, sinograms)[1]
        with torch.no_grad():
            return forward_with_taps(self.net, sinograms)[1]

    def __call__(self, sinograms: torch.Tensor, item_ids: Optional[Sequence[str]] = None) -> FeaturePyramid:
        sinograms = sinograms.to(self.device)
        if self.cache is None or item_ids is None:
            return self._run(sinograms)

        cached = [self.cache.get(item_id) for item_id in item_ids]
        missing = [i for i, p in enumerate(cached) if p is None]
        if missing:
            fresh = _unstack(self._run(sinograms[missing]))
            for i, pyramid in zip(missing, fresh):
                self.cache.put(item_ids[i], pyramid)
                cached[i] = pyramid
        return _stack(cached).to(self.device)

    def fill_cache(self, dataset: PairDataset, batch_size: int = 8) -> int:
        """Compute and store pyramids for every item of ``dataset``."""
        if self.cache is None:
            raise ConfigurationError("no pyramid cache configured")
        written = 0
        for start in range(0, len(dataset), batch_size):
            items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            ids = [it["item_id"] for it in items]
            if all(self.cache.path(i).exists() for i in ids):
                continue
            self(torch.stack([it["sinogram"] for it in items]), ids)
            written += len(ids)
        return written


SinogramInput = Union[Sinogram, np.ndarray, torch.Tensor]


def _as_grid(sinogram: SinogramInput, size: int) -> torch.Tensor:
    if isinstance(sinogram, torch.Tensor):
        grid = sinogram.float()
    else:
        grid = torch.from_numpy(sinogram_to_grid(sinogram, size).astype(np.float32))
    while grid.dim() < 4:
        grid = grid[None]
    if tuple(grid.shape[-2:]) != (size, size):
        raise ShapeError(f"sinogram grid {tuple(grid.shape)} does not match image size {size}")
    return grid


def extract_features(
    ckpt: Union[Path, PriorFeatureExtractor],
    sinogram: SinogramInput,
    denoiser_cfg: Optional[UNetConfig] = None,
) -> FeaturePyramid:
    """Pyramid of one (normalized) sinogram under a frozen prior checkpoint."""
    extractor = ckpt if isinstance(ckpt, PriorFeatureExtractor) else PriorFeatureExtractor(ckpt)
    if denoiser_cfg is not None:
        extractor.check_compatible(denoiser_cfg)
    return extractor(_as_grid(sinogram, extractor.config.image_size))

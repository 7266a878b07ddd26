"""Conditional DDPM over reconstruction images.

The denoiser sees the noisy image and the resampled sinogram as two input
channels, and optionally a prior-feature pyramid through its bias ports.
Conditioning (sinogram and pyramid together) is dropped per item with
probability ``p_dp`` during training so one network also learns the
unconditional prediction used by classifier-free guidance.

Timesteps are 1-based: ``t`` runs over 1..T and ``schedule.beta[t - 1]`` is
the variance added by step ``t``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn
from tqdm import tqdm

from .backbone import FeaturePyramid, FeatureUNet, build_unet, forward_with_biases, null_pyramid
from .checkpoints import CheckpointManifest, append_metrics, load_checkpoint, rng_state_hash, save_checkpoint
from .config import DiffusionConfig, GuidanceConfig, ScheduleConfig, UNetConfig
from .data import PairDataset, make_loader
from .errors import ConfigurationError, MisuseError, RangeError, check_same_shape
from .eval_metrics import build_report
from .models import record_metric
from .prior import PriorFeatureExtractor, PyramidCache
from .settings import progress_enabled
from .tomo_sim import derive_seed

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]


# --- schedule ---
@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray

    @property
    def T(self) -> int:
        return int(len(self.beta))

    @classmethod
    def from_betas(cls, beta: Sequence[float]) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        denom = 1.0 - alpha_bar
        posterior_variance = np.divide(beta * (1.0 - alpha_bar_prev), denom, out=np.zeros_like(beta), where=denom > 0)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_variance=posterior_variance)


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def _check_timestep(t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    steps = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if steps.numel() == 0 or int(steps.min()) < 1 or int(steps.max()) > sched.T:
        raise RangeError(f"timestep {t} outside 1..{sched.T}")
    return steps


def _extract(table: np.ndarray, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Gather ``table[t - 1]`` shaped to broadcast against ``like``."""
    steps = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    values = torch.from_numpy(np.asarray(table, dtype=np.float64))[steps - 1]
    shape = [1] * like.dim() if values.numel() == 1 else [-1] + [1] * (like.dim() - 1)
    return values.reshape(shape).to(device=like.device, dtype=like.dtype)


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    check_same_shape(x0.shape, eps.shape, "x0 and eps")
    _check_timestep(t, sched)
    alpha_bar = np.asarray(sched.alpha_bar, dtype=np.float64)
    return _extract(np.sqrt(alpha_bar), t, x0) * x0 + _extract(np.sqrt(1.0 - alpha_bar), t, x0) * eps


def posterior_mean(x_t: torch.Tensor, t: Timestep, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """mu = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)."""
    check_same_shape(x_t.shape, eps_hat.shape, "x_t and eps_hat")
    _check_timestep(t, sched)
    alpha = np.asarray(sched.alpha, dtype=np.float64)
    alpha_bar = np.asarray(sched.alpha_bar, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(alpha < 1.0, (1.0 - alpha) / np.sqrt(1.0 - alpha_bar), 0.0)
    return (x_t - _extract(coef, t, x_t) * eps_hat) / _extract(np.sqrt(alpha), t, x_t)


def to_model_range(image: torch.Tensor) -> torch.Tensor:
    """[0, 1] dataset range to the [-1, 1] diffusion range."""
    return image * 2.0 - 1.0


def from_model_range(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


# --- conditioning ---
@dataclass
class ConditioningSet:
    sinogram: torch.Tensor  # (B, 1, H, W) on the image grid
    pyramid: FeaturePyramid
    is_null: bool = False

    @property
    def batch_size(self) -> int:
        return int(self.sinogram.shape[0])

    def null(self) -> "ConditioningSet":
        return ConditioningSet(torch.zeros_like(self.sinogram), self.pyramid.zeros_like(), is_null=True)

    def drop(self, mask: torch.Tensor) -> "ConditioningSet":
        """Null out the items where ``mask`` is True; sinogram and pyramid go together."""
        keep = ~mask.to(self.sinogram.device)
        sinogram = self.sinogram * keep.to(self.sinogram.dtype).view(-1, 1, 1, 1)
        return ConditioningSet(sinogram, self.pyramid.masked(keep), is_null=bool(mask.all()))


def dropout_mask(batch: int, p_dp: float, generator: torch.Generator) -> torch.Tensor:
    return torch.rand(batch, generator=generator) < p_dp


@dataclass
class DropoutCounter:
    conditioned: int = 0
    null: int = 0

    def update(self, mask: torch.Tensor) -> None:
        dropped = int(mask.sum())
        self.null += dropped
        self.conditioned += int(mask.numel()) - dropped


class ConditionalDenoiser(nn.Module):
    """epsilon-prediction network: U-Net on [x_t, sinogram] with pyramid biases."""

    def __init__(self, net: FeatureUNet, num_timesteps: int):
        super().__init__()
        cfg = net.config
        if cfg.in_channels != 2 or not cfg.time_embedding:
            raise ConfigurationError("the denoiser needs in_channels=2 (image, sinogram) and a time embedding")
        self.net = net
        self.num_timesteps = num_timesteps

    @property
    def config(self) -> UNetConfig:
        return self.net.config

    def forward(self, x_t: torch.Tensor, t: Timestep, cond: ConditioningSet) -> torch.Tensor:
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(x_t.shape[0])
        return forward_with_biases(self.net, torch.cat([x_t, cond.sinogram], dim=1), t, cond.pyramid)


def build_denoiser(cfg: UNetConfig, num_timesteps: int) -> ConditionalDenoiser:
    return ConditionalDenoiser(build_unet(cfg), num_timesteps)


def load_denoiser(path: Path, device="cpu") -> Tuple[ConditionalDenoiser, CheckpointManifest]:
    net, manifest = load_checkpoint(path, map_location=device)
    if manifest.kind not in ("guided", "cdpm"):
        raise ConfigurationError(f"checkpoint {path} is a '{manifest.kind}' network, not a denoiser")
    return ConditionalDenoiser(net, manifest.num_timesteps).to(device), manifest


# --- training objective ---
def training_step(
    denoiser: ConditionalDenoiser,
    x0: torch.Tensor,
    cond: ConditioningSet,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    generator: torch.Generator,
    counter: Optional[DropoutCounter] = None,
) -> torch.Tensor:
    """Noise-prediction loss for one batch.

    Draw order from ``generator``: timesteps, noise, dropout mask.
    """
    batch = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    mask = dropout_mask(batch, guidance.p_dp, generator)
    if counter is not None:
        counter.update(mask)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat = denoiser(x_t, t.to(x0.device), cond.drop(mask))
    return F.mse_loss(eps_hat, eps)


# --- guidance and sampling ---
def combine_guidance(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, lambda2: float) -> torch.Tensor:
    return (1.0 + lambda2) * eps_cond - lambda2 * eps_uncond


def guided_epsilon(
    denoiser: ConditionalDenoiser, x_t: torch.Tensor, t: Timestep, cond: ConditioningSet, lambda2: float
) -> torch.Tensor:
    if cond.is_null:
        raise MisuseError("guided evaluation needs real conditioning, got the null set")
    eps_cond = denoiser(x_t, t, cond)
    if lambda2 == 0:
        return eps_cond
    return combine_guidance(eps_cond, denoiser(x_t, t, cond.null()), lambda2)


@dataclass
class SampleResult:
    raw: torch.Tensor
    clamped: torch.Tensor


def _generator(rng: Union[int, torch.Generator]) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(int(rng))


@torch.no_grad()
def sample(
    denoiser: ConditionalDenoiser,
    cond: ConditioningSet,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    rng: Union[int, torch.Generator],
    clip_range: Tuple[float, float] = (-1.0, 3.0),
) -> SampleResult:
    """Ancestral sampling from x_T ~ N(0, I) down to t = 1 (model range)."""
    if denoiser.num_timesteps != sched.T:
        raise ConfigurationError(f"denoiser was trained with T={denoiser.num_timesteps}, schedule has T={sched.T}")
    generator = _generator(rng)
    device = cond.sinogram.device
    cfg = denoiser.config
    shape = (cond.batch_size, cfg.out_channels, cfg.image_size, cfg.image_size)
    sigma = np.sqrt(sched.posterior_variance)

    x = torch.randn(shape, generator=generator).to(device)
    for t in tqdm(range(sched.T, 0, -1), desc="sample", leave=False, disable=not progress_enabled()):
        eps = guided_epsilon(denoiser, x, t, cond, guidance.lambda2)
        mu = posterior_mean(x, t, eps, sched)
        if t > 1:
            z = torch.randn(shape, generator=generator).to(device)
            x = mu + float(sigma[t - 1]) * z
        else:
            x = mu
    return SampleResult(raw=x, clamped=x.clamp(*clip_range))


def conditioning_for(
    sinograms: torch.Tensor,
    item_ids: Sequence[str],
    unet_cfg: UNetConfig,
    extractor: Optional[PriorFeatureExtractor],
) -> ConditioningSet:
    """Sinogram plus prior pyramid, or a zero pyramid when there is no prior."""
    if extractor is not None:
        pyramid = extractor(sinograms, list(item_ids))
    else:
        pyramid = null_pyramid(unet_cfg, sinograms.shape[0], device=sinograms.device, dtype=sinograms.dtype)
    return ConditioningSet(sinograms, pyramid)


def sample_dataset(
    denoiser: ConditionalDenoiser,
    dataset: PairDataset,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    extractor: Optional[PriorFeatureExtractor],
    *,
    seed: int = 0,
    batch_size: int = 4,
    clip_range: Tuple[float, float] = (-1.0, 3.0),
    device="cpu",
) -> Dict[str, Dict[str, np.ndarray]]:
    """One seeded sample per item, mapped back to the dataset range.

    Returns ``{item_id: {"clamped": (H, W), "raw": (H, W)}}``.
    """
    denoiser.eval()
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for b, batch in enumerate(make_loader(dataset, batch_size, shuffle=False)):
        sino = batch["sinogram"].to(device)
        cond = conditioning_for(sino, batch["item_id"], denoiser.config, extractor)
        result = sample(denoiser, cond, sched, guidance, derive_seed(seed, b), clip_range)
        for i, item_id in enumerate(batch["item_id"]):
            out[item_id] = {
                "clamped": from_model_range(result.clamped[i, 0]).cpu().numpy().astype(np.float64),
                "raw": from_model_range(result.raw[i, 0]).cpu().numpy().astype(np.float64),
            }
    return out


# --- training driver ---
def epoch_grid(epochs: int, cadence: int) -> List[int]:
    """Multiples of ``cadence`` up to ``epochs``, plus the final epoch."""
    if cadence <= 0 or epochs <= 0:
        return []
    grid = list(range(cadence, epochs + 1, cadence))
    if grid[-1:] != [epochs]:
        grid.append(epochs)
    return grid


@dataclass
class DiffusionRun:
    kind: str
    last_path: Path
    history: List[Dict] = field(default_factory=list)
    snapshots: Dict[int, Path] = field(default_factory=dict)
    counter: DropoutCounter = field(default_factory=DropoutCounter)

    @property
    def train_losses(self) -> List[float]:
        return [r["train_loss"] for r in self.history]


def train_diffusion(
    dataset_dir: Path,
    cfg: DiffusionConfig,
    out_dir: Path,
    *,
    prior_ckpt: Optional[Path] = None,
    root_seed: int = 0,
    config_hash: str = "",
    pyramid_cache: Optional[Path] = None,
    device="cpu",
) -> DiffusionRun:
    """Train the feature-guided denoiser, or the plain conditional baseline
    when ``prior_ckpt`` is None (zero pyramids, same RNG consumption).
    """
    kind = "guided" if prior_ckpt is not None else "cdpm"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = PairDataset(dataset_dir, "train")
    val_set = PairDataset(dataset_dir, "val", max_items=cfg.val_items)
    train_set.require_image_size(cfg.unet.image_size)
    sched = schedule_from_config(cfg.schedule)

    extractor = None
    if prior_ckpt is not None:
        extractor = PriorFeatureExtractor(prior_ckpt, device, trainable=cfg.unfreeze_prior)
        if pyramid_cache is not None and not cfg.unfreeze_prior:
            extractor.cache = PyramidCache(pyramid_cache, extractor.checkpoint_hash)
        extractor.check_compatible(cfg.unet)

    torch.manual_seed(root_seed)
    denoiser = build_denoiser(cfg.unet, sched.T).to(device)
    params = list(denoiser.parameters())
    if extractor is not None and extractor.trainable:
        params += list(extractor.net.parameters())
    opt = torch.optim.Adam(params, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    ema = AveragedModel(denoiser, multi_avg_fn=get_ema_multi_avg_fn(cfg.ema_decay)) if cfg.ema else None
    generator = torch.Generator().manual_seed(derive_seed(root_seed, 0xD1F))
    loader = make_loader(train_set, cfg.optim.batch_size, shuffle=True, seed=root_seed)
    grid = set(epoch_grid(cfg.optim.epochs, cfg.eval_every))
    run = DiffusionRun(kind=kind, last_path=out_dir / "last.pt")
    run_name = f"{kind}:{config_hash[:12]}:{root_seed}"
    step = 0

    def manifest(epoch: int) -> CheckpointManifest:
        return CheckpointManifest(
            kind=kind,
            unet=cfg.unet,
            in_channels=cfg.unet.in_channels,
            out_channels=cfg.unet.out_channels,
            epoch=epoch,
            step=step,
            num_timesteps=sched.T,
            config_hash=config_hash,
            root_seed=root_seed,
            rng_state_hash=rng_state_hash(),
            param_count=denoiser.net.parameter_count,
            prior_hash=extractor.checkpoint_hash if extractor else None,
            prior_path=str(prior_ckpt) if prior_ckpt is not None else None,
            ema=cfg.ema,
        )

    def current() -> ConditionalDenoiser:
        return ema.module if ema is not None else denoiser

    for epoch in range(1, cfg.optim.epochs + 1):
        start = time.time()
        denoiser.train()
        losses = []
        for batch in tqdm(loader, desc=f"{kind} epoch {epoch}", leave=False, disable=not progress_enabled()):
            sino = batch["sinogram"].to(device)
            x0 = to_model_range(batch["reference"].to(device))
            cond = conditioning_for(sino, batch["item_id"], cfg.unet, extractor)
            loss = training_step(denoiser, x0, cond, sched, cfg.guidance, generator, run.counter)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema is not None:
                ema.update_parameters(denoiser)
            losses.append(float(loss))
            step += 1

        record: Dict = {"epoch": epoch, "train_loss": sum(losses) / len(losses), "wall_time": 0.0}
        if epoch in grid and len(val_set):
            samples = sample_dataset(
                current(), val_set, sched, cfg.guidance, extractor,
                seed=root_seed, batch_size=cfg.optim.batch_size, clip_range=cfg.clip_range, device=device,
            )
            val_items = [val_set[i] for i in range(len(val_set))]
            references = {it["item_id"]: it["reference"][0].numpy().astype(np.float64) for it in val_items}
            report = build_report(kind, {k: v["clamped"] for k, v in samples.items()}, references)
            record["val_psnr"] = report.aggregate["psnr"].mean
            record["val_ssim"] = report.aggregate["ssim"].mean
        if cfg.save_snapshots and epoch in grid:
            run.snapshots[epoch] = save_checkpoint(out_dir / "snapshots" / f"epoch_{epoch:04d}.pt", current().net, manifest(epoch))
        record["wall_time"] = time.time() - start
        run.history.append(record)
        logger.info(
            "%s epoch %d/%d train_loss=%.6f val_psnr=%s val_ssim=%s (%.1fs)",
            kind, epoch, cfg.optim.epochs, record["train_loss"],
            _fmt(record.get("val_psnr")), _fmt(record.get("val_ssim")), record["wall_time"],
        )
        append_metrics(out_dir / "metrics.jsonl", record)
        record_metric(run_name, record)

    save_checkpoint(run.last_path, current().net, manifest(cfg.optim.epochs))
    if extractor is not None and extractor.trainable:
        tuned = extractor.manifest.model_copy(update={"epoch": cfg.optim.epochs, "config_hash": config_hash})
        save_checkpoint(out_dir / "prior_finetuned.pt", extractor.net, tuned)
    logger.info("%s training done: conditioned=%d null=%d", kind, run.counter.conditioned, run.counter.null)
    return run


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return "n/a"
    return "inf" if math.isinf(value) else f"{value:.4f}"

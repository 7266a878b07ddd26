"""Image-quality metrics and checkpoint evaluation.

PSNR and SSIM are computed on the dataset's [0, 1] range. SSIM uses an 11x11
Gaussian window (sigma 1.5) with K1=0.01, K2=0.03 and population statistics.
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel
from skimage.metrics import structural_similarity

from .baseline_regression import load_regression, predict
from .checkpoints import write_run_manifest
from .config import EvalConfig, GuidanceConfig, ScheduleConfig
from .data import PairDataset
from .errors import ConfigurationError, DependencyError, check_same_shape
from .prior import PriorFeatureExtractor
from .wavelet import high_frequency_energy

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_NAME = "report.json"


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    check_same_shape(pred.shape, target.shape, "pred and target")
    return pred, target


def psnr(pred, target, data_range: float = 1.0) -> float:
    """10 log10(data_range^2 / MSE); identical images give +inf."""
    pred, target = _pair(pred, target)
    if data_range <= 0:
        raise ConfigurationError(f"data_range must be > 0, got {data_range}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(pred, target, data_range: float = 1.0) -> float:
    pred, target = _pair(pred, target)
    if pred.ndim != 2:
        raise ConfigurationError(f"ssim expects a single 2D image, got shape {pred.shape}")
    if min(pred.shape) < SSIM_WINDOW:
        raise ConfigurationError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape}")
    return float(
        structural_similarity(
            pred,
            target,
            data_range=data_range,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def error_map(pred, target) -> np.ndarray:
    pred, target = _pair(pred, target)
    return (pred - target) ** 2


class ItemMetric(BaseModel):
    item_id: str
    psnr: float
    ssim: float
    hf_energy: Optional[float] = None


class AggregateStat(BaseModel):
    mean: float
    std: float


class MetricReport(BaseModel):
    method: str
    split: str = "test"
    data_range: float = 1.0
    per_item: List[ItemMetric]
    aggregate: Dict[str, AggregateStat]
    param_count: Optional[int] = None
    checkpoint: Optional[str] = None
    predictions_dir: Optional[str] = None
    config_hash: str = ""
    root_seed: int = 0

    @property
    def item_ids(self) -> List[str]:
        return [m.item_id for m in self.per_item]

    def save(self, path: Path) -> Path:
        # stdlib json keeps +inf PSNR values as Infinity
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(mode="python"), indent=2))
        return path

    @classmethod
    def load(cls, path: Path) -> "MetricReport":
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"metric report {path} not found")
        return cls.model_validate(json.loads(path.read_text()))


def _stat(values: List[float]) -> AggregateStat:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return AggregateStat(mean=math.nan, std=math.nan)
    with np.errstate(invalid="ignore"):
        return AggregateStat(mean=float(np.mean(arr)), std=float(np.std(arr)))


def build_report(
    method: str,
    predictions: Dict[str, np.ndarray],
    references: Dict[str, np.ndarray],
    data_range: float = 1.0,
    split: str = "test",
    **fields,
) -> MetricReport:
    """Per-item PSNR/SSIM/high-frequency energy in sorted item order plus aggregates."""
    missing = sorted(set(references) - set(predictions))
    if missing:
        raise DependencyError(f"no prediction for items {missing[:5]}")
    per_item = []
    for item_id in sorted(references):
        pred, ref = predictions[item_id], references[item_id]
        per_item.append(
            ItemMetric(
                item_id=item_id,
                psnr=psnr(pred, ref, data_range),
                ssim=ssim(pred, ref, data_range),
                hf_energy=high_frequency_energy(np.asarray(pred, dtype=np.float64)),
            )
        )
    aggregate = {
        "psnr": _stat([m.psnr for m in per_item]),
        "ssim": _stat([m.ssim for m in per_item]),
        "hf_energy": _stat([m.hf_energy for m in per_item]),
    }
    return MetricReport(method=method, split=split, data_range=data_range, per_item=per_item, aggregate=aggregate, **fields)


def evaluate_checkpoint(
    kind: str,
    ckpt_path: Path,
    dataset_dir: Path,
    eval_cfg: EvalConfig,
    out_dir: Path,
    *,
    guidance: Optional[GuidanceConfig] = None,
    schedule: Optional[ScheduleConfig] = None,
    clip_range=(-1.0, 3.0),
    batch_size: int = 4,
    config_hash: str = "",
    root_seed: int = 0,
    device="cpu",
) -> MetricReport:
    """Reconstruct every item of a split with a checkpoint and score it.

    Diffusion kinds draw one seeded sample per item; ``regression`` runs a
    single forward pass. Writes ``report.json``, per-item predictions and,
    if enabled, squared-error maps under ``out_dir``.
    """
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.exists():
        raise DependencyError(f"checkpoint {ckpt_path} not found")
    dataset = PairDataset(dataset_dir, eval_cfg.split, max_items=eval_cfg.max_items)
    items = [dataset[i] for i in range(len(dataset))]
    references = {it["item_id"]: it["reference"][0].numpy().astype(np.float64) for it in items}

    if kind == "regression":
        net, manifest = load_regression(ckpt_path, device=device)
        dataset.require_image_size(net.config.image_size)
        predictions = {it["item_id"]: predict(net, it["sinogram"], device=device) for it in items}
    elif kind in ("guided", "cdpm"):
        # diffusion imports this module for validation metrics
        from .diffusion import load_denoiser, sample_dataset, schedule_from_config

        denoiser, manifest = load_denoiser(ckpt_path, device=device)
        if manifest.kind != kind:
            raise ConfigurationError(f"checkpoint {ckpt_path} is '{manifest.kind}', not '{kind}'")
        dataset.require_image_size(denoiser.config.image_size)
        extractor = None
        if kind == "guided":
            if not manifest.prior_path:
                raise DependencyError(f"guided checkpoint {ckpt_path} does not record its prior checkpoint")
            extractor = PriorFeatureExtractor(Path(manifest.prior_path), device)
            extractor.check_compatible(denoiser.config)
        sched = schedule_from_config(schedule or ScheduleConfig())
        samples = sample_dataset(
            denoiser, dataset, sched, guidance or GuidanceConfig(), extractor,
            seed=eval_cfg.seed, batch_size=batch_size, clip_range=clip_range, device=device,
        )
        predictions = {k: v["clamped"] for k, v in samples.items()}
    else:
        raise ConfigurationError(f"unknown checkpoint kind '{kind}'")

    out_dir = Path(out_dir)
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for item_id, pred in predictions.items():
        np.save(pred_dir / f"{item_id}.npy", pred.astype(np.float32))
    if eval_cfg.save_error_maps:
        err_dir = out_dir / "error_maps"
        err_dir.mkdir(parents=True, exist_ok=True)
        for item_id, pred in predictions.items():
            np.save(err_dir / f"{item_id}.npy", error_map(pred, references[item_id]).astype(np.float32))

    report = build_report(
        kind,
        predictions,
        references,
        eval_cfg.data_range,
        split=eval_cfg.split,
        param_count=manifest.param_count,
        checkpoint=str(ckpt_path),
        predictions_dir=str(pred_dir),
        config_hash=config_hash,
        root_seed=root_seed,
    )
    report.save(out_dir / REPORT_NAME)
    write_run_manifest(out_dir, "eval", config_hash, root_seed, kind=kind, split=eval_cfg.split)
    for sub in ("predictions", "error_maps"):
        if (out_dir / sub).exists():
            write_run_manifest(out_dir / sub, "eval", config_hash, root_seed, kind=kind, split=eval_cfg.split)
    logger.info(
        "%s on %s: PSNR %.3f dB, SSIM %.4f over %d items",
        kind, eval_cfg.split, report.aggregate["psnr"].mean, report.aggregate["ssim"].mean, len(report.per_item),
    )
    return report

"""Guided-vs-baseline training curves and the guidance-scale sweep.

Both arms train with conditioning dropout disabled, the same seeds and the
same optimizer; the only difference is whether the prior pyramid is added.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from .checkpoints import write_run_manifest  # noqa: E402
from .config import ExperimentConfig, config_hash  # noqa: E402
from .diffusion import epoch_grid, train_diffusion  # noqa: E402
from .eval_metrics import evaluate_checkpoint  # noqa: E402

logger = logging.getLogger(__name__)

ARMS = ("cdpm", "guided")
METRICS = ("psnr", "ssim")


class AblationCurves(BaseModel):
    epochs: List[int]
    seeds: List[int]
    # metric -> arm -> per-epoch mean over seeds
    curves: Dict[str, Dict[str, List[float]]]
    # metric -> arm -> seed -> per-epoch values
    per_seed: Dict[str, Dict[str, Dict[str, List[float]]]]

    def final(self, metric: str, arm: str) -> float:
        return self.curves[metric][arm][-1]


def ablation_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Diffusion settings for both arms: no conditioning dropout, ablation epochs and cadence."""
    diffusion = cfg.diffusion.model_copy(
        update={
            "guidance": cfg.diffusion.guidance.model_copy(update={"p_dp": 0.0}),
            "optim": cfg.diffusion.optim.model_copy(update={"epochs": cfg.ablation.epochs}),
            "eval_every": cfg.ablation.cadence,
        }
    )
    return cfg.model_copy(update={"diffusion": diffusion})


def _plot(path: Path, epochs: List[int], series: Dict[str, List[float]], ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for arm, values in series.items():
        ax.plot(epochs, values, marker="o", label=arm)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def run_ablation(
    cfg: ExperimentConfig,
    dataset_dir: Path,
    prior_ckpt: Path,
    out_dir: Path,
    device="cpu",
) -> AblationCurves:
    """Train both arms for every seed and write ``curves.json``, ``psnr.png``, ``ssim.png``."""
    cfg = ablation_config(cfg)
    digest = config_hash(cfg)
    out_dir = Path(out_dir)
    grid = epoch_grid(cfg.ablation.epochs, cfg.ablation.cadence)
    per_seed: Dict[str, Dict[str, Dict[str, List[float]]]] = {m: {a: {} for a in ARMS} for m in METRICS}

    for seed in cfg.ablation.seeds:
        for arm in ARMS:
            logger.info("Ablation arm %s, seed %d", arm, seed)
            run = train_diffusion(
                dataset_dir,
                cfg.diffusion,
                out_dir / f"seed_{seed}" / arm,
                prior_ckpt=prior_ckpt if arm == "guided" else None,
                root_seed=seed,
                config_hash=digest,
                device=device,
            )
            write_run_manifest(out_dir / f"seed_{seed}" / arm, "ablation", digest, seed, arm=arm)
            by_epoch = {r["epoch"]: r for r in run.history}
            for metric in METRICS:
                per_seed[metric][arm][str(seed)] = [float(by_epoch[e].get(f"val_{metric}", np.nan)) for e in grid]

    curves = {
        metric: {arm: np.mean(list(per_seed[metric][arm].values()), axis=0).tolist() for arm in ARMS}
        for metric in METRICS
    }
    result = AblationCurves(epochs=grid, seeds=list(cfg.ablation.seeds), curves=curves, per_seed=per_seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "curves.json").write_text(result.model_dump_json(indent=2))
    _plot(out_dir / "psnr.png", grid, curves["psnr"], "val PSNR (dB)")
    _plot(out_dir / "ssim.png", grid, curves["ssim"], "val SSIM")
    write_run_manifest(out_dir, "ablation", digest, cfg.seeds.root, seeds=list(cfg.ablation.seeds))
    logger.info(
        "Final val PSNR cdpm=%.3f guided=%.3f; SSIM cdpm=%.4f guided=%.4f",
        result.final("psnr", "cdpm"), result.final("psnr", "guided"),
        result.final("ssim", "cdpm"), result.final("ssim", "guided"),
    )
    return result


class SweepPoint(BaseModel):
    lambda2: float
    psnr: float
    ssim: float


def run_lambda2_sweep(
    cfg: ExperimentConfig,
    ckpt_path: Path,
    dataset_dir: Path,
    out_dir: Path,
    split: Optional[str] = None,
    device="cpu",
) -> List[SweepPoint]:
    """Evaluate one guided checkpoint at every guidance scale in ``ablation.lambda2_sweep``."""
    out_dir = Path(out_dir)
    digest = config_hash(cfg)
    eval_cfg = cfg.eval.model_copy(update={"split": split or "val", "save_error_maps": False})
    points = []
    for lambda2 in cfg.ablation.lambda2_sweep:
        guidance = cfg.diffusion.guidance.model_copy(update={"lambda2": lambda2})
        report = evaluate_checkpoint(
            "guided", ckpt_path, dataset_dir, eval_cfg, out_dir / f"lambda2_{lambda2:g}",
            guidance=guidance, schedule=cfg.diffusion.schedule, clip_range=cfg.diffusion.clip_range,
            batch_size=cfg.diffusion.optim.batch_size, config_hash=digest, root_seed=cfg.seeds.root, device=device,
        )
        points.append(SweepPoint(lambda2=lambda2, psnr=report.aggregate["psnr"].mean, ssim=report.aggregate["ssim"].mean))
        logger.info("lambda2=%g: PSNR %.3f SSIM %.4f", lambda2, points[-1].psnr, points[-1].ssim)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "lambda2_sweep.json").write_text(json.dumps([p.model_dump() for p in points], indent=2))
    write_run_manifest(out_dir, "lambda2-sweep", digest, cfg.seeds.root, checkpoint=str(ckpt_path))
    return points

"""Supervised (sinogram -> image) training loop shared by the prior network and
the regression baseline.

Each epoch logs one line, appends the same record to ``metrics.jsonl`` and the
run registry, and refreshes ``last.pt``; ``best.pt`` tracks the lowest
validation loss (training loss when the split has no validation items).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch
import torch.nn as nn
from tqdm import tqdm

from .backbone import FeatureUNet
from .checkpoints import CheckpointManifest, append_metrics, rng_state_hash, save_checkpoint
from .config import OptimConfig
from .data import PairDataset, make_loader
from .models import record_metric
from .settings import progress_enabled

logger = logging.getLogger(__name__)

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class FitResult:
    best_path: Path
    last_path: Path
    history: List[Dict] = field(default_factory=list)

    @property
    def train_losses(self) -> List[float]:
        return [r["train_loss"] for r in self.history]


@torch.no_grad()
def evaluate_loss(net: nn.Module, dataset: PairDataset, loss_fn: LossFn, batch_size: int, device) -> Optional[float]:
    if len(dataset) == 0:
        return None
    net.eval()
    total, count = 0.0, 0
    for batch in make_loader(dataset, batch_size, shuffle=False):
        pred = net(batch["sinogram"].to(device))
        n = pred.shape[0]
        total += float(loss_fn(pred, batch["reference"].to(device))) * n
        count += n
    return total / count


def fit_supervised(
    net: FeatureUNet,
    train_set: PairDataset,
    val_set: PairDataset,
    loss_fn: LossFn,
    optim: OptimConfig,
    out_dir: Path,
    *,
    kind: str,
    run: str,
    config_hash: str,
    root_seed: int,
    device="cpu",
) -> FitResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net.to(device)
    opt = torch.optim.Adam(net.parameters(), lr=optim.lr, weight_decay=optim.weight_decay)
    loader = make_loader(train_set, optim.batch_size, shuffle=True, seed=root_seed)
    best_path, last_path = out_dir / "best.pt", out_dir / "last.pt"

    def manifest(epoch: int, step: int, best: Optional[float]) -> CheckpointManifest:
        return CheckpointManifest(
            kind=kind,
            unet=net.config,
            in_channels=net.config.in_channels,
            out_channels=net.config.out_channels,
            epoch=epoch,
            step=step,
            config_hash=config_hash,
            root_seed=root_seed,
            rng_state_hash=rng_state_hash(),
            param_count=net.parameter_count,
            best_val_loss=best,
        )

    best, step = math.inf, 0
    history: List[Dict] = []
    if optim.epochs == 0:
        save_checkpoint(best_path, net, manifest(0, 0, None))
        save_checkpoint(last_path, net, manifest(0, 0, None))
        logger.info("Zero epochs requested; saved the initialization as %s", last_path)
        return FitResult(best_path, last_path, history)

    for epoch in range(1, optim.epochs + 1):
        start = time.time()
        net.train()
        losses = []
        for batch in tqdm(loader, desc=f"{run} epoch {epoch}", leave=False, disable=not progress_enabled()):
            pred = net(batch["sinogram"].to(device))
            loss = loss_fn(pred, batch["reference"].to(device))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
            step += 1

        train_loss = sum(losses) / len(losses)
        val_loss = evaluate_loss(net, val_set, loss_fn, optim.batch_size, device)
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "wall_time": time.time() - start,
        }
        history.append(record)
        logger.info(
            "%s epoch %d/%d train_loss=%.6f val_loss=%s (%.1fs)",
            run, epoch, optim.epochs, train_loss, "n/a" if val_loss is None else f"{val_loss:.6f}", record["wall_time"],
        )
        append_metrics(out_dir / "metrics.jsonl", record)
        record_metric(run, record)

        score = train_loss if val_loss is None else val_loss
        if score < best:
            best = score
            save_checkpoint(best_path, net, manifest(epoch, step, best))
        save_checkpoint(last_path, net, manifest(epoch, step, best))

    return FitResult(best_path, last_path, history)

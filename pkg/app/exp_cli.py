"""Command-line entry point for the reconstruction pipeline.

Stages write under the output root (``paths.output_root`` or
``SINOGUIDE_OUTPUT_ROOT``)::

    data/                   gen-data
    prior/                  train-prior
    diffusion/<kind>/       train-diffusion (kind: guided | cdpm)
    regression/             train-regression
    samples/<kind>_<split>/ sample
    eval/<kind>_<split>/    eval
    ablation/               ablation
    report/                 report

A stage refuses to overwrite its own output unless ``--overwrite`` is given.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from . import settings
from .ablation import run_ablation, run_lambda2_sweep
from .baseline_regression import train_regression
from .checkpoints import write_run_manifest
from .config import ExperimentConfig, load_config
from .data import PairDataset
from .diffusion import (
    conditioning_for,
    from_model_range,
    load_denoiser,
    sample,
    schedule_from_config,
    train_diffusion,
)
from .errors import ArtifactExistsError, ConfigurationError, DependencyError, PipelineError
from .eval_metrics import REPORT_NAME, MetricReport, evaluate_checkpoint
from .models import find_artifact, register_artifact
from .prior import PriorFeatureExtractor, train_prior
from .report import make_report
from .tomo_sim import MANIFEST_NAME, build_dataset

logger = logging.getLogger(__name__)


@dataclass
class Context:
    cfg: ExperimentConfig
    root: Path
    overwrite: bool
    device: str

    @property
    def seed(self) -> int:
        return self.cfg.seeds.root

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def prior_ckpt(self) -> Path:
        return self.root / "prior" / "best.pt"

    def diffusion_dir(self, kind: str) -> Path:
        return self.root / "diffusion" / kind

    @property
    def regression_ckpt(self) -> Path:
        return self.root / "regression" / "best.pt"

    def eval_dir(self, kind: str, split: str) -> Path:
        return self.root / "eval" / f"{kind}_{split}"

    def default_ckpt(self, kind: str) -> Path:
        if kind == "regression":
            return self.regression_ckpt
        return self.diffusion_dir(kind) / "last.pt"


def stage_hash(cfg: ExperimentConfig, *sections: str, **extra) -> str:
    """Hash of the config sections a stage's output depends on."""
    payload = {name: getattr(cfg, name).model_dump(mode="json") for name in sections}
    payload["seeds"] = cfg.seeds.model_dump(mode="json")
    payload.update(extra)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _guard(ctx: Context, stage: str, marker: Path, digest: str, kind: Optional[str] = None) -> None:
    if ctx.overwrite:
        return
    existing = find_artifact(stage, digest, kind)
    if existing is not None or marker.exists():
        where = existing.path if existing is not None else marker
        raise ArtifactExistsError(f"{stage} output already exists at {where}; pass --overwrite to rebuild")


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{what} not found at {path}; run {stage} first")
    return path


def _reset_metrics(ctx: Context, out_dir: Path) -> None:
    # metrics.jsonl is append-only within a run
    if ctx.overwrite:
        (out_dir / "metrics.jsonl").unlink(missing_ok=True)


# --- stages ---
def cmd_gen_data(args: argparse.Namespace, ctx: Context) -> int:
    digest = stage_hash(ctx.cfg, "data")
    _guard(ctx, "gen-data", ctx.data_dir / MANIFEST_NAME, digest)
    build_dataset(ctx.cfg.data, ctx.data_dir, root_seed=ctx.seed, overwrite=ctx.overwrite)
    write_run_manifest(ctx.data_dir, "gen-data", digest, ctx.seed)
    register_artifact("gen-data", ctx.data_dir / MANIFEST_NAME, digest, ctx.seed)
    return 0


def cmd_train_prior(args: argparse.Namespace, ctx: Context) -> int:
    _require(ctx.data_dir / MANIFEST_NAME, "dataset", "gen-data")
    digest = stage_hash(ctx.cfg, "data", "prior")
    _guard(ctx, "train-prior", ctx.prior_ckpt, digest, "prior")
    _reset_metrics(ctx, ctx.prior_ckpt.parent)
    result = train_prior(ctx.data_dir, ctx.cfg.prior, ctx.prior_ckpt.parent, root_seed=ctx.seed, config_hash=digest, device=ctx.device)
    write_run_manifest(ctx.prior_ckpt.parent, "train-prior", digest, ctx.seed)
    register_artifact("train-prior", result.best_path, digest, ctx.seed, kind="prior")
    return 0


def cmd_train_diffusion(args: argparse.Namespace, ctx: Context) -> int:
    _require(ctx.data_dir / MANIFEST_NAME, "dataset", "gen-data")
    guided = ctx.cfg.diffusion.use_prior_features
    kind = "guided" if guided else "cdpm"
    prior_ckpt = None
    if guided:
        prior_ckpt = _require(Path(args.prior_ckpt) if args.prior_ckpt else ctx.prior_ckpt, "prior checkpoint", "train-prior")
    sections = ("data", "diffusion", "prior") if guided else ("data", "diffusion")
    digest = stage_hash(ctx.cfg, *sections, kind=kind)
    out_dir = ctx.diffusion_dir(kind)
    _guard(ctx, "train-diffusion", out_dir / "last.pt", digest, kind)
    _reset_metrics(ctx, out_dir)
    run = train_diffusion(
        ctx.data_dir,
        ctx.cfg.diffusion,
        out_dir,
        prior_ckpt=prior_ckpt,
        root_seed=ctx.seed,
        config_hash=digest,
        pyramid_cache=ctx.root / "pyramids" if args.use_cache else None,
        device=ctx.device,
    )
    write_run_manifest(out_dir, "train-diffusion", digest, ctx.seed, kind=kind,
                       conditioned=run.counter.conditioned, null=run.counter.null)
    if run.snapshots:
        write_run_manifest(out_dir / "snapshots", "train-diffusion", digest, ctx.seed, kind=kind)
    register_artifact("train-diffusion", run.last_path, digest, ctx.seed, kind=kind)
    return 0


def cmd_train_regression(args: argparse.Namespace, ctx: Context) -> int:
    _require(ctx.data_dir / MANIFEST_NAME, "dataset", "gen-data")
    digest = stage_hash(ctx.cfg, "data", "regression")
    _guard(ctx, "train-regression", ctx.regression_ckpt, digest, "regression")
    _reset_metrics(ctx, ctx.regression_ckpt.parent)
    result = train_regression(
        ctx.data_dir, ctx.cfg.regression, ctx.regression_ckpt.parent, root_seed=ctx.seed, config_hash=digest, device=ctx.device
    )
    write_run_manifest(ctx.regression_ckpt.parent, "train-regression", digest, ctx.seed)
    register_artifact("train-regression", result.best_path, digest, ctx.seed, kind="regression")
    return 0


def cmd_sample(args: argparse.Namespace, ctx: Context) -> int:
    cfg = ctx.cfg
    _require(ctx.data_dir / MANIFEST_NAME, "dataset", "gen-data")
    ckpt = _require(Path(args.ckpt) if args.ckpt else ctx.default_ckpt(args.kind), "checkpoint", "train-diffusion")
    split = cfg.eval.split
    digest = stage_hash(cfg, "data", "eval", guidance=cfg.diffusion.guidance.model_dump(), ckpt=str(ckpt), n=args.n)
    out_dir = ctx.root / "samples" / f"{args.kind}_{split}"
    _guard(ctx, "sample", out_dir / "run.json", digest, args.kind)

    denoiser, manifest = load_denoiser(ckpt, device=ctx.device)
    if manifest.kind != args.kind:
        raise ConfigurationError(f"checkpoint {ckpt} is '{manifest.kind}', not '{args.kind}'")
    extractor = None
    if manifest.kind == "guided":
        extractor = PriorFeatureExtractor(Path(manifest.prior_path or ctx.prior_ckpt), ctx.device)
    dataset = PairDataset(ctx.data_dir, split, max_items=args.n)
    items = [dataset[i] for i in range(len(dataset))]
    sino = torch.stack([it["sinogram"] for it in items]).to(ctx.device)
    cond = conditioning_for(sino, [it["item_id"] for it in items], denoiser.config, extractor)
    result = sample(denoiser, cond, schedule_from_config(cfg.diffusion.schedule), cfg.diffusion.guidance,
                    cfg.eval.seed, cfg.diffusion.clip_range)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, it in enumerate(items):
        np.save(out_dir / f"{it['item_id']}_clamped.npy", from_model_range(result.clamped[i, 0]).cpu().numpy())
        np.save(out_dir / f"{it['item_id']}_raw.npy", from_model_range(result.raw[i, 0]).cpu().numpy())
    write_run_manifest(out_dir, "sample", digest, ctx.seed, kind=manifest.kind, checkpoint=str(ckpt))
    register_artifact("sample", out_dir / "run.json", digest, ctx.seed, kind=args.kind)
    logger.info("Wrote %d samples to %s", len(items), out_dir)
    return 0


def cmd_eval(args: argparse.Namespace, ctx: Context) -> int:
    cfg = ctx.cfg
    _require(ctx.data_dir / MANIFEST_NAME, "dataset", "gen-data")
    stage = "train-regression" if args.kind == "regression" else "train-diffusion"
    ckpt = _require(Path(args.ckpt) if args.ckpt else ctx.default_ckpt(args.kind), "checkpoint", stage)
    split = cfg.eval.split
    digest = stage_hash(cfg, "data", "eval", guidance=cfg.diffusion.guidance.model_dump(), ckpt=str(ckpt))
    out_dir = ctx.eval_dir(args.kind, split)
    _guard(ctx, "eval", out_dir / REPORT_NAME, digest, args.kind)
    evaluate_checkpoint(
        args.kind,
        ckpt,
        ctx.data_dir,
        cfg.eval,
        out_dir,
        guidance=cfg.diffusion.guidance,
        schedule=cfg.diffusion.schedule,
        clip_range=cfg.diffusion.clip_range,
        batch_size=cfg.diffusion.optim.batch_size,
        config_hash=digest,
        root_seed=ctx.seed,
        device=ctx.device,
    )
    register_artifact("eval", out_dir / REPORT_NAME, digest, ctx.seed, kind=args.kind)
    return 0


def cmd_ablation(args: argparse.Namespace, ctx: Context) -> int:
    cfg = ctx.cfg
    _require(ctx.data_dir / MANIFEST_NAME, "dataset", "gen-data")
    if args.lambda2_sweep:
        ckpt = _require(ctx.default_ckpt("guided"), "guided checkpoint", "train-diffusion")
        out_dir = ctx.root / "ablation" / "lambda2_sweep"
        digest = stage_hash(cfg, "data", "diffusion", "ablation", "eval", ckpt=str(ckpt))
        _guard(ctx, "lambda2-sweep", out_dir / "lambda2_sweep.json", digest)
        run_lambda2_sweep(cfg, ckpt, ctx.data_dir, out_dir, device=ctx.device)
        register_artifact("lambda2-sweep", out_dir / "lambda2_sweep.json", digest, ctx.seed)
        return 0

    prior_ckpt = _require(ctx.prior_ckpt, "prior checkpoint", "train-prior")
    out_dir = ctx.root / "ablation"
    digest = stage_hash(cfg, "data", "prior", "diffusion", "ablation")
    _guard(ctx, "ablation", out_dir / "curves.json", digest)
    run_ablation(cfg, ctx.data_dir, prior_ckpt, out_dir, device=ctx.device)
    register_artifact("ablation", out_dir / "curves.json", digest, ctx.seed)
    return 0


def cmd_report(args: argparse.Namespace, ctx: Context) -> int:
    cfg = ctx.cfg
    split = cfg.eval.split
    reports: List[MetricReport] = []
    for method in cfg.report.methods:
        path = ctx.eval_dir(method, split) / REPORT_NAME
        if path.exists():
            reports.append(MetricReport.load(path))
        else:
            logger.warning("No %s evaluation on %s at %s; leaving it out", method, split, path)
    if len(reports) < 2:
        raise DependencyError(f"report needs at least 2 evaluated methods on '{split}', found {len(reports)}; run eval first")
    digest = stage_hash(cfg, "report", methods=[r.method for r in reports], reports=[r.config_hash for r in reports])
    out_dir = ctx.root / "report"
    _guard(ctx, "report", out_dir / "table.md", digest)
    result = make_report(reports, out_dir, dataset_dir=ctx.data_dir, n_panels=cfg.report.n_panels)
    write_run_manifest(out_dir, "report", digest, ctx.seed, methods=[r.method for r in reports], split=split)
    register_artifact("report", result.table_path, digest, ctx.seed)
    print(result.table_path.read_text())
    return 0


# --- parser ---
def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. diffusion.guidance.p_dp=0.2 (repeatable)")
    parser.add_argument("--overwrite", action="store_true", help="rebuild this stage's output if it exists")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinoguide", description="Feature-guided diffusion reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(handler=handler)
        return p

    add("gen-data", cmd_gen_data, "simulate phantoms, sinograms and reference reconstructions")
    add("train-prior", cmd_train_prior, "train the prior network")
    p = add("train-diffusion", cmd_train_diffusion, "train the conditional diffusion model")
    p.add_argument("--no-guidance-features", action="store_true", help="train the plain conditional baseline (kind cdpm)")
    p.add_argument("--p-dp", type=float, default=None, help="conditioning dropout probability")
    p.add_argument("--prior-ckpt", default=None, help="prior checkpoint (default: <root>/prior/best.pt)")
    p.add_argument("--use-cache", action="store_true", help="read/write prior pyramids under <root>/pyramids")
    add("train-regression", cmd_train_regression, "train the regression baseline")
    p = add("sample", cmd_sample, "draw samples for the first items of a split")
    p.add_argument("--kind", choices=["guided", "cdpm"], default="guided")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)
    p.add_argument("--n", type=int, default=4, help="number of items")
    p.add_argument("--lambda2", type=float, default=None, help="guidance scale")
    p = add("eval", cmd_eval, "score a checkpoint on a split")
    p.add_argument("--kind", choices=["guided", "cdpm", "regression"], default="guided")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)
    p = add("ablation", cmd_ablation, "guided vs baseline curves over training epochs")
    p.add_argument("--lambda2-sweep", action="store_true", help="sweep the guidance scale on the guided checkpoint instead")
    add("report", cmd_report, "comparison table and figure panels from evaluated methods")
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    """Subcommand flags that are shorthands for config keys."""
    extra = []
    if getattr(args, "no_guidance_features", False):
        extra.append("diffusion.use_prior_features=false")
    if getattr(args, "p_dp", None) is not None:
        extra.append(f"diffusion.guidance.p_dp={args.p_dp}")
    if getattr(args, "lambda2", None) is not None:
        extra.append(f"diffusion.guidance.lambda2={args.lambda2}")
    if getattr(args, "split", None):
        extra.append(f"eval.split={json.dumps(args.split)}")
    return extra


def cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    settings.configure_logging()
    try:
        cfg = load_config(args.config, list(args.overrides) + _flag_overrides(args))
        root = Path(cfg.paths.output_root) if cfg.paths.output_root else settings.output_root()
        ctx = Context(cfg=cfg, root=root, overwrite=args.overwrite, device=settings.device_name())
        logger.info("%s: output root %s, device %s", args.command, root, ctx.device)
        return args.handler(args, ctx)
    except PipelineError as e:
        logger.debug("stage failed", exc_info=True)
        print(f"{args.command}: {e}", file=sys.stderr)
        return e.exit_code


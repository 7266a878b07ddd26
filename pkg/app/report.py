"""Method comparison table and side-by-side figure panels."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ConfigurationError, ConsistencyError, DependencyError  # noqa: E402
from .eval_metrics import MetricReport, error_map  # noqa: E402
from .tomo_sim import load_manifest  # noqa: E402

logger = logging.getLogger(__name__)

TABLE_NAME = "table.md"


@dataclass
class ReportRow:
    method: str
    psnr: float
    ssim: float
    hf_energy: Optional[float]
    param_count: Optional[int]
    flags: Dict[str, str] = field(default_factory=dict)  # metric -> "best" | "second"


@dataclass
class ReportResult:
    rows: List[ReportRow]
    table_path: Path
    panel_paths: List[Path]


def rank_flags(values: Sequence[float]) -> Dict[int, str]:
    """Index -> "best"/"second" for the two highest values; ties go to the earlier entry."""
    order = sorted(range(len(values)), key=lambda i: -_sortable(values[i]))
    flags = {}
    if order:
        flags[order[0]] = "best"
    if len(order) > 1:
        flags[order[1]] = "second"
    return flags


def _sortable(value: float) -> float:
    return -math.inf if value is None or math.isnan(value) else value


def _check_items(reports: Sequence[MetricReport]) -> None:
    first = set(reports[0].item_ids)
    for report in reports[1:]:
        if set(report.item_ids) != first:
            raise ConsistencyError(f"reports '{reports[0].method}' and '{report.method}' cover different items")


def build_rows(reports: Sequence[MetricReport]) -> List[ReportRow]:
    if len(reports) < 2:
        raise ConfigurationError(f"a comparison needs at least 2 metric reports, got {len(reports)}")
    _check_items(reports)
    rows = [
        ReportRow(
            method=r.method,
            psnr=r.aggregate["psnr"].mean,
            ssim=r.aggregate["ssim"].mean,
            hf_energy=r.aggregate["hf_energy"].mean if "hf_energy" in r.aggregate else None,
            param_count=r.param_count,
        )
        for r in reports
    ]
    for metric in ("psnr", "ssim"):
        for index, flag in rank_flags([getattr(row, metric) for row in rows]).items():
            rows[index].flags[metric] = flag
    return rows


def _cell(value: Optional[float], fmt: str, flag: Optional[str]) -> str:
    if value is None:
        return "n/a"
    text = fmt.format(value)
    if flag == "best":
        return f"**{text}**"
    if flag == "second":
        return f"_{text}_"
    return text


def render_table(rows: Sequence[ReportRow]) -> str:
    lines = [
        "| method | PSNR (dB) | SSIM | HF energy | parameters |",
        "|---|---|---|---|---|",
    ]
    for row in rows:
        params = f"{row.param_count / 1e6:.2f}M" if row.param_count else "n/a"
        lines.append(
            f"| {row.method} | {_cell(row.psnr, '{:.2f}', row.flags.get('psnr'))} "
            f"| {_cell(row.ssim, '{:.4f}', row.flags.get('ssim'))} "
            f"| {_cell(row.hf_energy, '{:.3e}', None)} | {params} |"
        )
    lines.append("")
    lines.append("**bold**: best, _italic_: second best; ties go to the method listed first.")
    return "\n".join(lines) + "\n"


def _load_prediction(report: MetricReport, item_id: str) -> np.ndarray:
    if not report.predictions_dir:
        raise DependencyError(f"report '{report.method}' has no saved predictions")
    path = Path(report.predictions_dir) / f"{item_id}.npy"
    if not path.exists():
        raise DependencyError(f"prediction {path} not found")
    return np.load(path).astype(np.float64)


def render_panel(
    path: Path, item_id: str, sinogram: np.ndarray, reference: np.ndarray, reports: Sequence[MetricReport]
) -> Path:
    """Sinogram | reference | each method | each method's squared-error map."""
    preds = [_load_prediction(r, item_id) for r in reports]
    errors = [error_map(p, reference) for p in preds]
    vmax = float(reference.max()) or 1.0
    emax = max(float(e.max()) for e in errors) or 1.0
    n = 2 + 2 * len(reports)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6))
    axes[0].imshow(sinogram, cmap="gray", aspect="auto")
    axes[0].set_title("sinogram")
    axes[1].imshow(reference, cmap="gray", vmin=0, vmax=vmax)
    axes[1].set_title("reference")
    for k, (report, pred, err) in enumerate(zip(reports, preds, errors)):
        axes[2 + k].imshow(pred, cmap="gray", vmin=0, vmax=vmax)
        axes[2 + k].set_title(report.method)
        axes[2 + len(reports) + k].imshow(err, cmap="magma", vmin=0, vmax=emax)
        axes[2 + len(reports) + k].set_title(f"{report.method} err")
    for ax in axes:
        ax.axis("off")
    fig.suptitle(item_id, fontsize=9)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def make_report(
    reports: Sequence[MetricReport],
    out_dir: Path,
    *,
    dataset_dir: Optional[Path] = None,
    n_panels: int = 2,
) -> ReportResult:
    """Write ``table.md`` and ``n_panels`` PNG panels for the first items."""
    rows = build_rows(reports)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / TABLE_NAME
    table_path.write_text(render_table(rows))

    panel_paths: List[Path] = []
    if n_panels > 0:
        if dataset_dir is None:
            raise DependencyError("figure panels need the dataset for sinograms and references")
        manifest = load_manifest(dataset_dir)
        by_id = {item.item_id: item for item in manifest.items}
        for item_id in sorted(reports[0].item_ids)[:n_panels]:
            item = by_id[item_id]
            sinogram = np.load(Path(dataset_dir) / item.sinogram)
            reference = np.load(Path(dataset_dir) / item.reference).astype(np.float64)
            panel_paths.append(render_panel(out_dir / f"panel_{item_id}.png", item_id, sinogram, reference, reports))
    logger.info("Wrote comparison of %d methods and %d panels to %s", len(rows), len(panel_paths), out_dir)
    return ReportResult(rows=rows, table_path=table_path, panel_paths=panel_paths)

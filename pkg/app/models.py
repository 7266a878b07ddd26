"""Run registry tables and helpers.

Every stage registers the artifacts it writes so reruns can be refused or
reused by (stage, config hash), and every training epoch record is mirrored
here next to the run's ``metrics.jsonl``.
"""
from __future__ import annotations

from datetime import datetime
from pathlib import Path
from typing import List, Optional

from sqlmodel import Field, SQLModel, desc, select

from .db import get_session


class Artifact(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    created_at: datetime = Field(default_factory=datetime.utcnow, index=True)

    stage: str = Field(index=True, description="gen-data|train-prior|train-diffusion|...")
    kind: Optional[str] = Field(default=None, index=True, description="guided|cdpm|regression|prior")
    path: str
    config_hash: str = Field(index=True)
    root_seed: int


class RunMetric(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    created_at: datetime = Field(default_factory=datetime.utcnow, index=True)

    run: str = Field(index=True)
    epoch: int
    train_loss: Optional[float] = None
    val_loss: Optional[float] = None
    val_psnr: Optional[float] = None
    val_ssim: Optional[float] = None
    wall_time: float = 0.0


def register_artifact(stage: str, path: Path, config_hash: str, root_seed: int, kind: Optional[str] = None) -> Artifact:
    row = Artifact(stage=stage, kind=kind, path=str(path), config_hash=config_hash, root_seed=root_seed)
    with get_session() as session:
        session.add(row)
        session.commit()
        session.refresh(row)
    return row


def find_artifact(stage: str, config_hash: str, kind: Optional[str] = None) -> Optional[Artifact]:
    """Latest registered artifact for the stage and config whose file still exists."""
    stmt = select(Artifact).where((Artifact.stage == stage) & (Artifact.config_hash == config_hash))
    if kind is not None:
        stmt = stmt.where(Artifact.kind == kind)
    stmt = stmt.order_by(desc(Artifact.id))  # type: ignore
    with get_session() as session:
        for row in session.exec(stmt).all():
            if Path(row.path).exists():
                return row
    return None


def list_artifacts(limit: int = 50) -> List[Artifact]:
    with get_session() as session:
        stmt = select(Artifact).order_by(desc(Artifact.id)).limit(limit)  # type: ignore
        return list(session.exec(stmt).all())


def record_metric(run: str, record: dict) -> None:
    row = RunMetric(
        run=run,
        epoch=int(record["epoch"]),
        train_loss=record.get("train_loss"),
        val_loss=record.get("val_loss"),
        val_psnr=_finite_or_none(record.get("val_psnr")),
        val_ssim=record.get("val_ssim"),
        wall_time=float(record.get("wall_time", 0.0)),
    )
    with get_session() as session:
        session.add(row)
        session.commit()


def _finite_or_none(value):
    if value is None or value != value or value in (float("inf"), float("-inf")):
        return None
    return value

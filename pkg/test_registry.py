import json
import math

import pytest
import torch
from sqlmodel import select

from app.backbone import build_unet
from app.checkpoints import (
    RUN_MANIFEST_NAME,
    append_metrics,
    load_checkpoint,
    read_manifest,
    read_metrics,
    sidecar_path,
    write_run_manifest,
)
from app.db import get_session
from app.errors import ConfigurationError, DependencyError
from app.models import RunMetric, find_artifact, list_artifacts, record_metric, register_artifact


class TestArtifacts:
    def test_register_and_find(self, tmp_path):
        target = tmp_path / "best.pt"
        target.write_bytes(b"x")
        register_artifact("train-prior", target, "abc", 0, kind="prior")
        found = find_artifact("train-prior", "abc")
        assert found is not None and found.path == str(target)
        assert find_artifact("train-prior", "abc", kind="prior") is not None
        assert find_artifact("train-prior", "abc", kind="cdpm") is None
        assert find_artifact("train-prior", "other") is None

    def test_deleted_files_are_ignored(self, tmp_path):
        target = tmp_path / "table.md"
        target.write_text("|")
        register_artifact("report", target, "h", 0)
        target.unlink()
        assert find_artifact("report", "h") is None

    def test_latest_first(self, tmp_path):
        for name in ("a", "b"):
            (tmp_path / name).write_text(name)
            register_artifact("eval", tmp_path / name, "h", 0, kind="cdpm")
        assert [a.path for a in list_artifacts(2)] == [str(tmp_path / "b"), str(tmp_path / "a")]
        assert find_artifact("eval", "h").path == str(tmp_path / "b")


def test_record_metric_drops_infinite_psnr():
    record_metric("cdpm:x", {"epoch": 1, "train_loss": 0.5, "val_psnr": math.inf, "val_ssim": 0.9, "wall_time": 1.0})
    with get_session() as session:
        row = session.exec(select(RunMetric).where(RunMetric.run == "cdpm:x")).one()
    assert (row.epoch, row.train_loss, row.val_psnr, row.val_ssim) == (1, 0.5, None, 0.9)


class TestCheckpoints:
    def test_round_trip(self, tmp_path, make_checkpoint, unet16):
        cfg = unet16(zero_init_output=False)
        path = make_checkpoint(tmp_path / "n.pt", cfg, "cdpm", seed=1, num_timesteps=10)
        assert sidecar_path(path).exists()
        net, manifest = load_checkpoint(path, kind="cdpm")
        torch.manual_seed(1)
        fresh = build_unet(cfg)
        for key, value in fresh.state_dict().items():
            assert torch.equal(net.state_dict()[key], value)
        assert manifest.param_count == fresh.parameter_count
        assert manifest.unet == cfg

    def test_wrong_kind(self, prior_ckpt):
        with pytest.raises(ConfigurationError):
            load_checkpoint(prior_ckpt, kind="regression")

    def test_missing(self, tmp_path):
        with pytest.raises(DependencyError):
            read_manifest(tmp_path / "none.pt")

    def test_metrics_log_appends(self, tmp_path):
        path = tmp_path / "run" / "metrics.jsonl"
        assert read_metrics(path) == []
        append_metrics(path, {"epoch": 1, "train_loss": 0.3})
        append_metrics(path, {"epoch": 2, "train_loss": 0.2})
        assert [r["epoch"] for r in read_metrics(path)] == [1, 2]

    def test_run_manifest(self, tmp_path):
        write_run_manifest(tmp_path, "eval", "hash", 3, kind="guided")
        data = json.loads((tmp_path / RUN_MANIFEST_NAME).read_text())
        assert (data["stage"], data["config_hash"], data["root_seed"]) == ("eval", "hash", 3)
        assert data["extra"] == {"kind": "guided"}

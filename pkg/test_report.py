import math

import numpy as np
import pytest

from app.data import PairDataset
from app.errors import ConfigurationError, ConsistencyError, DependencyError
from app.eval_metrics import build_report
from app.report import build_rows, make_report, rank_flags, render_table


class TestRankFlags:
    def test_two_highest(self):
        assert rank_flags([1.0, 3.0, 2.0]) == {1: "best", 2: "second"}

    def test_ties_go_to_earlier_entry(self):
        assert rank_flags([2.0, 2.0, 1.0]) == {0: "best", 1: "second"}

    def test_nan_ranks_last(self):
        assert rank_flags([math.nan, 1.0, 0.5]) == {1: "best", 2: "second"}

    def test_infinite_psnr_wins(self):
        assert rank_flags([30.0, math.inf]) == {1: "best", 0: "second"}

    def test_single(self):
        assert rank_flags([4.0]) == {0: "best"}


def _reports(tmp_path, dataset_dir, noise=(0.2, 0.1, 0.05)):
    """Reports for three fake methods with decreasing error, predictions on disk."""
    data = PairDataset(dataset_dir, "test")
    refs = {data[i]["item_id"]: data[i]["reference"][0].numpy().astype(np.float64) for i in range(len(data))}
    rng = np.random.default_rng(0)
    reports = []
    for method, sigma in zip(("regression", "cdpm", "guided"), noise):
        pred_dir = tmp_path / method
        pred_dir.mkdir()
        preds = {k: v + sigma * rng.standard_normal(v.shape) for k, v in refs.items()}
        for k, v in preds.items():
            np.save(pred_dir / f"{k}.npy", v)
        reports.append(build_report(method, preds, refs, predictions_dir=str(pred_dir), param_count=1_500_000))
    return reports


class TestBuildRows:
    def test_flags_follow_quality(self, tmp_path, tiny_dataset):
        rows = build_rows(_reports(tmp_path, tiny_dataset))
        assert [r.method for r in rows] == ["regression", "cdpm", "guided"]
        assert rows[2].flags == {"psnr": "best", "ssim": "best"}
        assert rows[1].flags == {"psnr": "second", "ssim": "second"}
        assert rows[0].flags == {}

    def test_needs_two_reports(self, tmp_path, tiny_dataset):
        with pytest.raises(ConfigurationError):
            build_rows(_reports(tmp_path, tiny_dataset)[:1])

    def test_item_sets_must_agree(self, tmp_path, tiny_dataset):
        reports = _reports(tmp_path, tiny_dataset)
        reports[1].per_item = reports[1].per_item[:1]
        with pytest.raises(ConsistencyError):
            build_rows(reports)


def test_render_table(tmp_path, tiny_dataset):
    text = render_table(build_rows(_reports(tmp_path, tiny_dataset)))
    lines = text.splitlines()
    assert lines[0].startswith("| method | PSNR (dB) | SSIM")
    guided = next(line for line in lines if line.startswith("| guided"))
    assert guided.count("**") == 4
    assert "1.50M" in guided


class TestMakeReport:
    def test_table_and_panels(self, tmp_path, tiny_dataset):
        result = make_report(_reports(tmp_path, tiny_dataset), tmp_path / "out", dataset_dir=tiny_dataset, n_panels=1)
        assert result.table_path.read_text().startswith("| method")
        assert len(result.panel_paths) == 1
        assert result.panel_paths[0].suffix == ".png"
        assert result.panel_paths[0].stat().st_size > 0

    def test_no_panels_needs_no_dataset(self, tmp_path, tiny_dataset):
        result = make_report(_reports(tmp_path, tiny_dataset), tmp_path / "out", n_panels=0)
        assert result.panel_paths == []

    def test_panels_need_dataset(self, tmp_path, tiny_dataset):
        with pytest.raises(DependencyError):
            make_report(_reports(tmp_path, tiny_dataset), tmp_path / "out", n_panels=1)

    def test_missing_predictions(self, tmp_path, tiny_dataset):
        reports = _reports(tmp_path, tiny_dataset)
        for path in (tmp_path / "cdpm").glob("*.npy"):
            path.unlink()
        with pytest.raises(DependencyError):
            make_report(reports, tmp_path / "out", dataset_dir=tiny_dataset, n_panels=1)

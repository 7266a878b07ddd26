import math

import numpy as np
import pytest

from app.checkpoints import RUN_MANIFEST_NAME
from app.config import EvalConfig, GuidanceConfig, ScheduleConfig
from app.errors import ConfigurationError, DependencyError, ShapeError
from app.eval_metrics import REPORT_NAME, MetricReport, build_report, error_map, evaluate_checkpoint, psnr, ssim


def _mse_oracle_psnr(pred, target, data_range=1.0):
    mse = sum((p - t) ** 2 for p, t in zip(np.ravel(pred), np.ravel(target))) / np.size(pred)
    return 10 * math.log10(data_range ** 2 / mse)


class TestPsnr:
    def test_identical_is_infinite(self):
        x = np.random.default_rng(0).random((16, 16))
        assert psnr(x, x) == math.inf

    def test_constant_offset(self):
        x = np.zeros((8, 8))
        assert psnr(x + 0.1, x) == pytest.approx(20.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert psnr(a, b, 2.0) == pytest.approx(_mse_oracle_psnr(a, b, 2.0), rel=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert psnr(a, b) == psnr(b, a)

    def test_decreases_with_noise(self):
        rng = np.random.default_rng(3)
        x = rng.random((32, 32))
        noise = rng.standard_normal((32, 32))
        values = [psnr(x + s * noise, x) for s in (0.01, 0.05, 0.2)]
        assert values == sorted(values, reverse=True)

    def test_errors(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ConfigurationError):
            psnr(np.zeros((4, 4)), np.ones((4, 4)), data_range=0)


class TestSsim:
    def test_identical_is_one(self):
        x = np.random.default_rng(0).random((32, 32))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_constant_images_closed_form(self):
        # flat images reduce to the luminance term
        a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.6)
        c1 = (0.01 * 1.0) ** 2
        expected = (2 * 0.2 * 0.6 + c1) / (0.2 ** 2 + 0.6 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-6)

    def test_degrades_with_noise_and_is_symmetric(self):
        rng = np.random.default_rng(4)
        x = rng.random((32, 32))
        noisy = x + 0.3 * rng.standard_normal((32, 32))
        assert ssim(noisy, x) < ssim(x + 0.01 * rng.standard_normal((32, 32)), x) < 1.0
        assert ssim(noisy, x) == pytest.approx(ssim(x, noisy))

    def test_bounded(self):
        rng = np.random.default_rng(5)
        value = ssim(rng.random((24, 24)), rng.random((24, 24)))
        assert -1.0 <= value <= 1.0

    def test_small_images_rejected(self):
        with pytest.raises(ConfigurationError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_error_map():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.array([[1.0, 0.0], [5.0, 4.5]])
    np.testing.assert_allclose(error_map(pred, target), [[0.0, 4.0], [4.0, 0.25]])


class TestBuildReport:
    def _pairs(self, n=3):
        rng = np.random.default_rng(6)
        refs = {f"item_{i}": rng.random((16, 16)) for i in range(n)}
        preds = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in refs.items()}
        return preds, refs

    def test_aggregates(self):
        preds, refs = self._pairs()
        report = build_report("regression", preds, refs)
        values = [psnr(preds[k], refs[k]) for k in sorted(refs)]
        assert report.item_ids == sorted(refs)
        assert report.aggregate["psnr"].mean == pytest.approx(np.mean(values))
        assert report.aggregate["psnr"].std == pytest.approx(np.std(values))
        assert report.aggregate["ssim"].mean == pytest.approx(np.mean([m.ssim for m in report.per_item]))

    def test_missing_prediction(self):
        preds, refs = self._pairs()
        preds.pop("item_1")
        with pytest.raises(DependencyError):
            build_report("cdpm", preds, refs)

    def test_save_load_keeps_infinite_psnr(self, tmp_path):
        preds, refs = self._pairs(2)
        preds["item_0"] = refs["item_0"]
        report = build_report("guided", preds, refs, config_hash="h", param_count=12)
        loaded = MetricReport.load(report.save(tmp_path / "r.json"))
        assert loaded.per_item[0].psnr == math.inf
        assert loaded.aggregate["psnr"].mean == math.inf
        assert (loaded.config_hash, loaded.param_count) == ("h", 12)

    def test_load_missing(self, tmp_path):
        with pytest.raises(DependencyError):
            MetricReport.load(tmp_path / "nope.json")


class TestEvaluateCheckpoint:
    def test_regression(self, tmp_path, tiny_dataset, make_checkpoint, prior_cfg32):
        ckpt = make_checkpoint(tmp_path / "reg.pt", prior_cfg32, "regression")
        out = tmp_path / "eval"
        report = evaluate_checkpoint("regression", ckpt, tiny_dataset, EvalConfig(), out, config_hash="c")
        assert len(report.per_item) == 2
        assert MetricReport.load(out / REPORT_NAME).item_ids == report.item_ids
        for item_id in report.item_ids:
            assert (out / "predictions" / f"{item_id}.npy").exists()
            assert (out / "error_maps" / f"{item_id}.npy").exists()
        assert (out / RUN_MANIFEST_NAME).exists()
        assert (out / "predictions" / RUN_MANIFEST_NAME).exists()

    def test_diffusion_is_seeded(self, tmp_path, tiny_dataset, make_checkpoint, denoiser_cfg32):
        ckpt = make_checkpoint(tmp_path / "cdpm.pt", denoiser_cfg32, "cdpm", num_timesteps=10)
        kwargs = dict(guidance=GuidanceConfig(), schedule=ScheduleConfig(T=10), batch_size=2)
        cfg = EvalConfig(save_error_maps=False, max_items=1)
        a = evaluate_checkpoint("cdpm", ckpt, tiny_dataset, cfg, tmp_path / "a", **kwargs)
        b = evaluate_checkpoint("cdpm", ckpt, tiny_dataset, cfg, tmp_path / "b", **kwargs)
        assert a.per_item[0].psnr == b.per_item[0].psnr
        assert not (tmp_path / "a" / "error_maps").exists()
        c = evaluate_checkpoint("cdpm", ckpt, tiny_dataset, cfg.model_copy(update={"seed": 1}), tmp_path / "c", **kwargs)
        assert c.per_item[0].psnr != a.per_item[0].psnr

    def test_guided_uses_recorded_prior(self, tmp_path, tiny_dataset, make_checkpoint, denoiser_cfg32, prior_ckpt):
        ckpt = make_checkpoint(tmp_path / "g.pt", denoiser_cfg32, "guided", num_timesteps=10, prior_path=prior_ckpt)
        report = evaluate_checkpoint(
            "guided", ckpt, tiny_dataset, EvalConfig(max_items=1), tmp_path / "g", schedule=ScheduleConfig(T=10)
        )
        assert report.method == "guided"

    def test_guided_without_prior_path(self, tmp_path, tiny_dataset, make_checkpoint, denoiser_cfg32):
        ckpt = make_checkpoint(tmp_path / "g.pt", denoiser_cfg32, "guided", num_timesteps=10)
        with pytest.raises(DependencyError):
            evaluate_checkpoint("guided", ckpt, tiny_dataset, EvalConfig(), tmp_path / "g", schedule=ScheduleConfig(T=10))

    def test_kind_mismatch(self, tmp_path, tiny_dataset, make_checkpoint, denoiser_cfg32):
        ckpt = make_checkpoint(tmp_path / "c.pt", denoiser_cfg32, "cdpm", num_timesteps=10)
        with pytest.raises(ConfigurationError):
            evaluate_checkpoint("guided", ckpt, tiny_dataset, EvalConfig(), tmp_path / "x")
        with pytest.raises(ConfigurationError):
            evaluate_checkpoint("bogus", ckpt, tiny_dataset, EvalConfig(), tmp_path / "x")

    def test_missing_checkpoint(self, tmp_path, tiny_dataset):
        with pytest.raises(DependencyError):
            evaluate_checkpoint("regression", tmp_path / "none.pt", tiny_dataset, EvalConfig(), tmp_path / "x")

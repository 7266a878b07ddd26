import numpy as np
import pytest
import torch
import torch.nn.functional as F

from app.backbone import build_unet, tap_shapes
from app.checkpoints import file_sha256, load_checkpoint, read_metrics
from app.config import OptimConfig, PriorConfig, PriorLossConfig
from app.data import PairDataset
from app.errors import ConfigurationError, ShapeError
from app.prior import PriorFeatureExtractor, PyramidCache, check_compatible, extract_features, prior_loss, train_prior


class TestPriorLoss:
    def test_identical_is_zero(self):
        x = torch.rand(2, 1, 16, 16)
        assert prior_loss(x, x, PriorLossConfig()).item() == 0.0

    def test_lambda_zero_is_mse(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(2, 1, 16, 16, generator=g), torch.rand(2, 1, 16, 16, generator=g)
        assert torch.equal(prior_loss(a, b, PriorLossConfig(lambda1=0.0)), F.mse_loss(a, b))

    def test_single_pixel_closed_form(self):
        # one perturbed pixel shows up as +-delta/2 in each high band of one block
        target = torch.rand(16, 16, dtype=torch.float64)
        pred = target.clone()
        delta = 0.3
        pred[4, 7] += delta
        mse = delta ** 2 / 256
        high_band_mse = 3 * (delta / 2) ** 2 / (3 * 8 * 8)
        got = prior_loss(pred, target, PriorLossConfig(lambda1=0.1)).item()
        assert got == pytest.approx(mse + 0.1 * high_band_mse, rel=1e-9)

    def test_monotone_in_lambda(self):
        g = torch.Generator().manual_seed(2)
        a, b = torch.rand(16, 16, generator=g), torch.rand(16, 16, generator=g)
        losses = [prior_loss(a, b, PriorLossConfig(lambda1=l)).item() for l in (0.0, 0.1, 1.0)]
        assert losses == sorted(losses)
        assert losses[0] < losses[-1]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            prior_loss(torch.zeros(8, 8), torch.zeros(4, 4), PriorLossConfig())


class TestTrainPrior:
    def _cfg(self, unet, epochs):
        return PriorConfig(unet=unet, optim=OptimConfig(lr=1e-3, batch_size=2, epochs=epochs))

    def test_zero_epochs_saves_initialization(self, tmp_path, tiny_dataset, prior_cfg32):
        result = train_prior(tiny_dataset, self._cfg(prior_cfg32, 0), tmp_path, root_seed=4)
        net, manifest = load_checkpoint(result.last_path, kind="prior")
        torch.manual_seed(4)
        fresh = build_unet(prior_cfg32)
        for key, value in fresh.state_dict().items():
            assert torch.equal(net.state_dict()[key], value)
        assert manifest.epoch == 0
        assert result.best_path.exists()

    def test_seeded_runs_reproduce(self, tmp_path, tiny_dataset, prior_cfg32):
        a = train_prior(tiny_dataset, self._cfg(prior_cfg32, 2), tmp_path / "a", root_seed=1, config_hash="h")
        b = train_prior(tiny_dataset, self._cfg(prior_cfg32, 2), tmp_path / "b", root_seed=1, config_hash="h")
        assert a.train_losses == b.train_losses
        assert [r["epoch"] for r in read_metrics(tmp_path / "a" / "metrics.jsonl")] == [1, 2]
        _, manifest = load_checkpoint(a.best_path, kind="prior")
        assert manifest.config_hash == "h"
        assert manifest.best_val_loss is not None

    def test_rejects_time_conditioned_backbone(self, tmp_path, tiny_dataset, unet32):
        with pytest.raises(ConfigurationError):
            train_prior(tiny_dataset, self._cfg(unet32(), 0), tmp_path)

    def test_rejects_size_mismatch(self, tmp_path, tiny_dataset, unet16):
        with pytest.raises(ConfigurationError):
            train_prior(tiny_dataset, self._cfg(unet16(time_embedding=False), 0), tmp_path)

    @pytest.mark.slow
    def test_loss_halves(self, tmp_path, prior_cfg32):
        from app.config import DataConfig
        from app.tomo_sim import build_dataset

        build_dataset(DataConfig(image_size=32, n_phantoms=20, rotations=5, mlem_iters=20), tmp_path / "data")
        result = train_prior(tmp_path / "data", self._cfg(prior_cfg32, 30), tmp_path / "prior")
        assert result.train_losses[-1] < 0.5 * result.train_losses[0]


class TestExtractFeatures:
    def test_repeatable(self, prior_ckpt, tiny_dataset):
        sino = PairDataset(tiny_dataset, "train")[0]["sinogram"]
        a = extract_features(prior_ckpt, sino)
        b = extract_features(prior_ckpt, sino)
        assert all(torch.equal(x, y) for x, y in zip(a.tensors(), b.tensors()))

    def test_shapes_match_tap_table(self, prior_ckpt, prior_cfg32, denoiser_cfg32, tiny_dataset):
        sino = PairDataset(tiny_dataset, "train")[0]["sinogram"]
        pyr = extract_features(prior_ckpt, sino, denoiser_cfg32)
        assert pyr.shapes() == tap_shapes(prior_cfg32)
        assert not any(t.requires_grad for t in pyr.tensors())

    def test_different_sinograms_differ(self, prior_ckpt, tiny_dataset):
        data = PairDataset(tiny_dataset, "train")
        a = extract_features(prior_ckpt, data[0]["sinogram"])
        b = extract_features(prior_ckpt, data[1]["sinogram"])
        assert not torch.equal(a.b_d[0], b.b_d[0])

    def test_raw_sinogram_is_resampled(self, prior_ckpt, tiny_dataset):
        data = PairDataset(tiny_dataset, "train")
        raw = data.raw_sinogram(0)
        assert raw.shape != (32, 32)
        a = extract_features(prior_ckpt, raw)
        b = extract_features(prior_ckpt, data[0]["sinogram"])
        torch.testing.assert_close(a.b_m[1], b.b_m[1])

    def test_config_mismatch(self, prior_ckpt, unet16):
        with pytest.raises(ConfigurationError):
            extract_features(prior_ckpt, np.zeros((32, 32)), unet16(in_channels=2))

    def test_check_compatible(self, prior_cfg32, denoiser_cfg32, unet32):
        check_compatible(prior_cfg32, denoiser_cfg32)
        with pytest.raises(ConfigurationError):
            check_compatible(prior_cfg32, unet32(base_channels=16))

    def test_rejects_other_checkpoint_kinds(self, tmp_path, make_checkpoint, denoiser_cfg32):
        path = make_checkpoint(tmp_path / "den.pt", denoiser_cfg32, "cdpm", num_timesteps=10)
        with pytest.raises(ConfigurationError):
            PriorFeatureExtractor(path)

    def test_frozen(self, prior_ckpt):
        extractor = PriorFeatureExtractor(prior_ckpt)
        assert not any(p.requires_grad for p in extractor.net.parameters())
        assert extractor.checkpoint_hash == file_sha256(prior_ckpt)


class TestPyramidCache:
    def test_cached_pyramids_match_fresh(self, tmp_path, prior_ckpt, tiny_dataset):
        data = PairDataset(tiny_dataset, "train")
        plain = PriorFeatureExtractor(prior_ckpt)
        cached = PriorFeatureExtractor(prior_ckpt, cache=PyramidCache(tmp_path, plain.checkpoint_hash))
        assert cached.fill_cache(data, batch_size=3) == len(data)
        assert cached.fill_cache(data, batch_size=3) == 0
        assert len(list((tmp_path / plain.checkpoint_hash).glob("*.pt"))) == len(data)

        items = [data[i] for i in range(2)]
        sinos = torch.stack([it["sinogram"] for it in items])
        ids = [it["item_id"] for it in items]
        for a, b in zip(cached(sinos, ids).tensors(), plain(sinos).tensors()):
            torch.testing.assert_close(a, b)

    def test_trainable_extractor_skips_cache(self, tmp_path, prior_ckpt):
        extractor = PriorFeatureExtractor(prior_ckpt, cache=PyramidCache(tmp_path, "x"), trainable=True)
        assert extractor.cache is None
        assert all(p.requires_grad for p in extractor.net.parameters())

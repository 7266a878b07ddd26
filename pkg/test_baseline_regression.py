import numpy as np
import pytest
import torch

from app.backbone import build_unet
from app.baseline_regression import load_regression, predict, train_regression
from app.config import OptimConfig, RegressionConfig
from app.data import PairDataset
from app.errors import ConfigurationError


def _cfg(unet, epochs):
    return RegressionConfig(unet=unet, optim=OptimConfig(lr=1e-3, batch_size=2, epochs=epochs))


def test_zero_epochs_saves_initialization(tmp_path, tiny_dataset, prior_cfg32):
    result = train_regression(tiny_dataset, _cfg(prior_cfg32, 0), tmp_path, root_seed=2)
    net, manifest = load_regression(result.last_path)
    torch.manual_seed(2)
    fresh = build_unet(prior_cfg32)
    assert manifest.kind == "regression"
    for key, value in fresh.state_dict().items():
        assert torch.equal(net.state_dict()[key], value)


def test_predict_is_deterministic(tmp_path, tiny_dataset, prior_cfg32):
    result = train_regression(tiny_dataset, _cfg(prior_cfg32.model_copy(update={"zero_init_output": False}), 1), tmp_path)
    net, _ = load_regression(result.best_path)
    sino = PairDataset(tiny_dataset, "test")[0]["sinogram"]
    a, b = predict(net, sino), predict(net, sino.numpy())
    assert a.shape == (32, 32)
    assert a.dtype == np.float64
    assert np.array_equal(a, b)


def test_seeded_runs_reproduce(tmp_path, tiny_dataset, prior_cfg32):
    a = train_regression(tiny_dataset, _cfg(prior_cfg32, 2), tmp_path / "a", root_seed=9)
    b = train_regression(tiny_dataset, _cfg(prior_cfg32, 2), tmp_path / "b", root_seed=9)
    assert a.train_losses == b.train_losses
    assert len(a.history) == 2


def test_rejects_time_conditioned_network(tmp_path, tiny_dataset, unet32):
    with pytest.raises(ConfigurationError):
        train_regression(tiny_dataset, _cfg(unet32(), 1), tmp_path)


def test_rejects_other_checkpoints(prior_ckpt):
    with pytest.raises(ConfigurationError):
        load_regression(prior_ckpt)


@pytest.mark.slow
def test_learns_the_training_set(tmp_path, prior_cfg32):
    from app.config import DataConfig
    from app.tomo_sim import build_dataset

    build_dataset(DataConfig(image_size=32, n_phantoms=20, rotations=5, mlem_iters=20), tmp_path / "data")
    result = train_regression(tmp_path / "data", _cfg(prior_cfg32, 30), tmp_path / "reg")
    assert result.train_losses[-1] < 0.5 * result.train_losses[0]

import math

import numpy as np
import pytest

from rfnet.datagen import SceneSpec, make_dataset
from rfnet.network import VARIANTS, ModelConfig, RFNetModel, bce_loss, forward, iou_loss
from rfnet.tensor import ShapeError, Tensor
from rfnet.tensor.checkpoint import load_file, save_file
from rfnet.training import TrainConfig, TrainingError, augment, step_lr, train
from rfnet.tensor.init import make_rng

MICRO = (4, 8, 8, 8, 8)


@pytest.fixture(scope="module")
def default_model():
    return RFNetModel.init(seed=0)


def test_default_shapes(default_model, rng):
    out = forward(rng.random((3, 64, 64)), rng.random((1, 64, 64)), default_model)
    assert out.diagnostics.fused_shapes == [(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4), (256, 2, 2)]
    assert out.logits.shape == (1, 64, 64)
    assert out.lambdas.shape == (5,)
    assert np.all((out.lambdas.data > 0) & (out.lambdas.data < 1))


def test_forward_deterministic(rng):
    rgb, depth = rng.random((3, 32, 32)), rng.random((1, 32, 32))
    a = forward(rgb, depth, RFNetModel.init(ModelConfig(MICRO), seed=3)).logits.data
    b = forward(rgb, depth, RFNetModel.init(ModelConfig(MICRO), seed=3)).logits.data
    assert a.tobytes() == b.tobytes()


def test_zero_head_gives_half(rng):
    model = RFNetModel.init(ModelConfig(MICRO), seed=0)
    model.decoder.head.kernel.data[...] = 0.0
    model.decoder.head.bias.data[...] = 0.0
    logits = forward(rng.random((3, 32, 32)), rng.random((1, 32, 32)), model).logits.data
    np.testing.assert_array_equal(logits, 0.0)


def test_rejects_bad_resolution(rng):
    model = RFNetModel.init(ModelConfig(MICRO), seed=0)
    with pytest.raises(ShapeError):
        forward(rng.random((3, 48, 40)), rng.random((1, 48, 40)), model)
    with pytest.raises(ShapeError):
        forward(rng.random((3, 32, 32)), rng.random((1, 64, 64)), model)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_checkpoint_round_trip_rebuilds_variant(variant, tmp_path, rng):
    model = RFNetModel.init(ModelConfig(MICRO, variant), seed=2)
    save_file(model.state_dict(), tmp_path / "m.rfnt")
    back = RFNetModel.from_state_dict(load_file(tmp_path / "m.rfnt"))
    assert back.config.variant == variant
    rgb, depth = rng.random((3, 32, 32)), rng.random((1, 32, 32))
    assert forward(rgb, depth, back).logits.data.tobytes() == forward(rgb, depth, model).logits.data.tobytes()


def test_variant_without_lwa_uses_unit_lambdas(rng):
    model = RFNetModel.init(ModelConfig(MICRO, "ca_tsa"), seed=0)
    out = forward(rng.random((3, 32, 32)), rng.random((1, 32, 32)), model)
    np.testing.assert_array_equal(out.lambdas.data, 1.0)


# -- losses -------------------------------------------------------------------

def test_bce_examples(rng):
    gt = (rng.random((1, 4, 4)) > 0.5).astype(np.float64)
    assert bce_loss(Tensor(np.zeros((1, 4, 4))), gt).item() == pytest.approx(math.log(2), abs=1e-12)
    sat = Tensor(np.where(gt > 0, 20.0, -20.0))
    assert bce_loss(sat, gt).item() < 1e-8


def test_bce_pixel_permutation_invariant(rng):
    z, g = rng.standard_normal(30), (rng.random(30) > 0.5).astype(float)
    perm = rng.permutation(30)
    a = bce_loss(Tensor(z.reshape(1, 5, 6)), g.reshape(1, 5, 6)).item()
    b = bce_loss(Tensor(z[perm].reshape(1, 5, 6)), g[perm].reshape(1, 5, 6)).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_iou_hand_example():
    gt = np.array([[[1.0, 1.0], [0.0, 0.0]]])
    assert iou_loss(Tensor(np.zeros((1, 2, 2))), gt).item() == pytest.approx(0.5, abs=1e-12)


def test_iou_range_and_saturation(rng):
    for _ in range(50):
        z = rng.standard_normal((1, 4, 4)) * 5
        g = (rng.random((1, 4, 4)) > 0.5).astype(float)
        v = iou_loss(Tensor(z), g).item()
        assert 0.0 <= v < 1.0
    g = np.zeros((1, 4, 4))
    g[0, :2] = 1
    assert iou_loss(Tensor(np.where(g > 0, 40.0, -40.0)), g).item() < 1e-12


def test_iou_spatial_permutation_invariant(rng):
    z, g = rng.standard_normal(16), (rng.random(16) > 0.5).astype(float)
    perm = rng.permutation(16)
    a = iou_loss(Tensor(z.reshape(1, 4, 4)), g.reshape(1, 4, 4)).item()
    b = iou_loss(Tensor(z[perm].reshape(1, 4, 4)), g[perm].reshape(1, 4, 4)).item()
    assert a == pytest.approx(b, rel=1e-12)


# -- training --------------------------------------------------------------------

def test_step_lr():
    assert step_lr(1e-4, 1, 15) == 1e-4
    assert step_lr(1e-4, 15, 15) == 1e-4
    assert step_lr(1e-4, 16, 15) == pytest.approx(1e-5)
    assert step_lr(1e-4, 31, 15) == pytest.approx(1e-6)


def test_augment_keeps_shapes_and_binary_gt():
    s = make_dataset(1, SceneSpec(seed=4))[0]
    rng = make_rng(0)
    for _ in range(10):
        a = augment(s, rng)
        assert a.rgb.shape == s.rgb.shape and a.depth.shape == s.depth.shape
        assert set(np.unique(a.gt)) <= {0.0, 1.0}


def test_train_reproducible_to_the_bit():
    data = make_dataset(6, SceneSpec(seed=9, size=(32, 32)))
    cfg = TrainConfig(seed=1, epochs=5, batch=3, channel_plan=MICRO)
    _, h1 = train(data, cfg)
    _, h2 = train(data, cfg)
    assert h1[4].loss == h2[4].loss


def test_train_rejects_empty():
    with pytest.raises(TrainingError):
        train([], TrainConfig(epochs=1, channel_plan=MICRO))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_reports_batch():
    data = make_dataset(4, SceneSpec(seed=9, size=(32, 32)))
    data[2].rgb = np.full_like(data[2].rgb, np.nan)
    with pytest.raises(TrainingError, match="batch"):
        train(data, TrainConfig(epochs=1, batch=2, channel_plan=MICRO, augment=False))


@pytest.mark.slow
def test_loss_halves_on_small_set():
    data = make_dataset(20, SceneSpec(seed=11))
    ok = 0
    for seed in range(5):
        _, hist = train(data, TrainConfig(seed=seed, epochs=10))
        ok += hist[9].loss < 0.5 * hist[0].loss
    assert ok >= 4

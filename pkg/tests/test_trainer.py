import re

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stackseg import ConfigError, DataError, Param
from stackseg.data import Sample, synth_dataset
from stackseg.errors import DivergenceError
from stackseg.network import StackedNet, mini_config
from stackseg.trainer import (
    TrainConfig,
    augment,
    benchmark_profile,
    evaluate,
    poly_lr,
    sgd_step,
    train,
)


# ---------------------------------------------------------------------------
# schedule


def test_poly_lr_endpoints_and_midpoint():
    assert poly_lr(2.5e-4, 0, 1000) == 2.5e-4
    # 2.5e-4 * (1 - 0.5)^0.9, evaluated independently
    assert poly_lr(2.5e-4, 500, 1000, power=0.9) == \
        pytest.approx(1.3397168281703665e-04, rel=1e-12)
    assert poly_lr(2.5e-4, 1000, 1000) == 0.0
    assert poly_lr(2.5e-4, 5000, 1000) == 0.0  # clamped past the horizon
    assert poly_lr(0.1, 3, 10, power=1.0) == pytest.approx(0.07)
    with pytest.raises(ConfigError):
        poly_lr(0.1, 0, 0)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_two_steps_match_hand_value():
    p = Param(np.array([1.0, 2.0], dtype=np.float32), name="w")
    g = np.array([0.5, -1.0], dtype=np.float32)
    for _ in range(2):
        p.accumulate_grad(g)
        sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    # w2 = w0 - lr*g*(1 + (1 + momentum)) = w0 - lr*g*2.9
    assert_allclose(p.value, [1.0 - 0.1 * 0.5 * 2.9, 2.0 + 0.1 * 1.0 * 2.9],
                    rtol=1e-6)


def test_sgd_weight_decay_and_exemption():
    decayed = Param(np.array([2.0], dtype=np.float32), name="w")
    exempt = Param(np.array([2.0], dtype=np.float32), name="b",
                   decay_exempt=True)
    for p in (decayed, exempt):
        p.accumulate_grad(np.zeros(1, dtype=np.float32))
    sgd_step([decayed, exempt], lr=0.1, momentum=0.9, weight_decay=0.5)
    assert_allclose(decayed.value, [2.0 - 0.1 * 0.5 * 2.0], rtol=1e-6)
    assert_allclose(exempt.value, [2.0])


def test_sgd_consumes_grads_and_skips_untouched_params():
    touched = Param(np.array([1.0], dtype=np.float32), name="a")
    untouched = Param(np.array([3.0], dtype=np.float32), name="b")
    touched.accumulate_grad(np.array([1.0], dtype=np.float32))
    sgd_step([touched, untouched], lr=0.1)
    assert (touched._grad == 0).all()
    assert untouched._grad is None and untouched.value[0] == 3.0


# ---------------------------------------------------------------------------
# augmentation


def base_cfg(**kw):
    defaults = dict(crop=32, scales=(1.0,), aspects=(1.0,), hflip_prob=0.0,
                    max_iter=10)
    defaults.update(kw)
    return TrainConfig(**defaults)


def asym_sample(size=64):
    rng = np.random.default_rng(0)
    image = rng.random((3, size, size), dtype=np.float32)
    labels = np.arange(size * size, dtype=np.int64).reshape(size, size) % 3
    return Sample(image, labels, "s")


def test_augment_is_deterministic_per_seed():
    s = asym_sample()
    cfg = base_cfg(scales=(0.8, 1.0, 1.2), aspects=(0.9, 1.0), hflip_prob=0.5)
    a_img, a_lab = augment(s, cfg, np.random.default_rng(7), fill=[0.5] * 3)
    b_img, b_lab = augment(s, cfg, np.random.default_rng(7), fill=[0.5] * 3)
    assert (a_img == b_img).all() and (a_lab == b_lab).all()
    assert a_img.shape == (3, 32, 32) and a_lab.shape == (32, 32)


def test_augment_pads_small_scales_with_fill_and_ignore():
    s = asym_sample(64)
    cfg = base_cfg(scales=(0.25,))  # resize to 16, crop 32 forces padding
    img, lab = augment(s, cfg, np.random.default_rng(0), fill=[0.1, 0.2, 0.3])
    assert img.shape == (3, 32, 32)
    assert (lab == 255).sum() == 32 * 32 - 16 * 16
    assert_allclose(img[:, 20, 20], [0.1, 0.2, 0.3], rtol=1e-6)


def test_augment_mirror():
    s = asym_sample()
    flipped_img, flipped_lab = augment(s, base_cfg(hflip_prob=1.0),
                                       np.random.default_rng(3), fill=[0] * 3)
    plain_img, plain_lab = augment(s, base_cfg(hflip_prob=0.0),
                                   np.random.default_rng(3), fill=[0] * 3)
    assert (flipped_lab == plain_lab[:, ::-1]).all()
    assert_allclose(flipped_img, plain_img[:, :, ::-1])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(crop=30).validate()
    with pytest.raises(ConfigError):
        TrainConfig(max_iter=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(scales=()).validate()
    with pytest.raises(ConfigError):
        TrainConfig(aspects=(0.0,)).validate()
    benchmark_profile().validate()
    assert benchmark_profile(max_iter=5).max_iter == 5


# ---------------------------------------------------------------------------
# the loop


def tiny_net():
    return StackedNet(mini_config(3, num_units=1, supervision_ratios=(4,)),
                      seed=0)


def test_train_smoke_history_and_log_format():
    net = tiny_net()
    samples = synth_dataset(6, size=64, seed=11)
    rows = []
    cfg = TrainConfig(max_iter=3, batch_size=2, crop=32, log_every=1, seed=1)
    history = train(net, samples, cfg, log_fn=rows.append)
    assert len(history) == 3 and len(rows) == 3
    pattern = re.compile(r"^\d+\t[\d.eE+-]+\t[\d.eE+-]+\t"
                         r"\S+=[\d.eE+-]+(,\S+=[\d.eE+-]+)*$")
    for row in rows:
        assert pattern.match(row), row
    assert list(history[0]["head_losses"]) == ["unit1.r4"]
    assert history[0]["lr"] == pytest.approx(2.5e-4)
    assert all(np.isfinite(h["total_loss"]) for h in history)


def test_train_is_reproducible_for_fixed_seed():
    samples = synth_dataset(6, size=64, seed=11)
    cfg = TrainConfig(max_iter=3, batch_size=2, crop=32, seed=5)
    n1, n2 = tiny_net(), tiny_net()
    h1 = train(n1, samples, cfg)
    h2 = train(n2, samples, cfg)
    assert h1[-1]["total_loss"] == h2[-1]["total_loss"]
    for a, b in zip(n1.params(), n2.params()):
        assert (a.value == b.value).all(), a.name


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # inf weights on purpose
def test_train_aborts_on_non_finite_loss():
    net = tiny_net()
    net.params()[0].value[:] = np.inf
    samples = synth_dataset(4, size=64, seed=11)
    with pytest.raises(DivergenceError, match="unit1.r4"):
        train(net, samples, TrainConfig(max_iter=2, batch_size=2, crop=32))


def test_train_rejects_bad_datasets():
    net = tiny_net()
    with pytest.raises(DataError):
        train(net, [], TrainConfig(max_iter=1))
    unlabeled = [Sample(np.zeros((3, 64, 64), dtype=np.float32), None, "u")]
    with pytest.raises(DataError):
        train(net, unlabeled, TrainConfig(max_iter=1))


class StubNet:
    def predict(self, x):
        return np.zeros((x.shape[0], x.shape[2], x.shape[3]), dtype=np.int64)


def test_evaluate_pads_crops_and_scores():
    labels = np.zeros((30, 30), dtype=np.int64)
    labels[:3] = 255  # ignored strip must not count against the stub
    sample = Sample(np.full((3, 30, 30), 0.5, dtype=np.float32), labels, "s")
    acc = evaluate(StubNet(), [sample], num_classes=2)
    assert acc.mean_iou() == 1.0
    assert acc.excluded_classes() == [1]
    assert acc.matrix[0, 0] == 27 * 30
    with pytest.raises(DataError):
        evaluate(StubNet(), [Sample(sample.image, None, "x")], num_classes=2)

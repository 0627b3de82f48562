import math

import numpy as np
import pytest

from nexusseg.errors import ParameterError, ShapeError
from nexusseg.layers import softmax
from nexusseg.loss import PHASE2_WEIGHTS, LossConfig, nll_loss
from nexusseg.optim import SGD, Schedule, lr_schedule
from nexusseg.selftest import check_softmax_nll
from nexusseg.tensor import new_rng


def test_loss_examples():
    assert nll_loss(np.array([[0, 1.0, 0, 0, 0]]), [1]).loss == 0.0
    assert nll_loss(np.full((1, 5), 0.2), [3]).loss == pytest.approx(math.log(5), abs=1e-12)
    p = softmax(new_rng(0).normal(size=(1, 5)), axis=1)
    w = LossConfig(PHASE2_WEIGHTS)
    assert nll_loss(p, [0], w).loss == pytest.approx(8 * nll_loss(p, [0]).loss, rel=1e-15)
    assert nll_loss(p, [2], w).loss == pytest.approx(2 * nll_loss(p, [2]).loss, rel=1e-15)


def test_loss_clamp_is_flagged():
    r = nll_loss(np.array([[1.0, 0, 0, 0, 0]]), [4])
    assert np.isfinite(r.loss) and r.clamped == 1
    assert r.loss == pytest.approx(-math.log(1e-12))


def test_equal_weights_scale_loss_exactly():
    rng = new_rng(1)
    p = softmax(rng.normal(size=(16, 5)), axis=1)
    y = rng.integers(0, 5, 16)
    base = nll_loss(p, y)
    assert nll_loss(p, y, LossConfig({c: 1.0 for c in range(5)})).loss == base.loss
    three = nll_loss(p, y, LossConfig({c: 3.0 for c in range(5)}))
    assert three.loss == pytest.approx(3 * base.loss, rel=1e-14)


def test_fused_gradient_matches_finite_differences():
    rng = new_rng(2)
    for _ in range(5):
        assert check_softmax_nll(rng.normal(size=(6, 5)), rng.integers(0, 5, 6), PHASE2_WEIGHTS) < 1e-4


def test_loss_errors():
    with pytest.raises(ShapeError):
        nll_loss(np.full((2, 5), 0.2), [0])
    with pytest.raises(ParameterError):
        nll_loss(np.full((1, 5), 0.2), [5])
    with pytest.raises(ParameterError):
        LossConfig({0: 0.0})


def test_zero_gradient_coasts():
    opt = SGD(0.1, 0.9, "nesterov")
    opt.velocity["t"] = np.array([0.5])
    theta = {"t": np.array([2.0])}
    opt.step(theta, {"t": np.array([0.0])})
    assert opt.velocity["t"][0] == 0.45 and theta["t"][0] == 2.45


def test_lr_zero_only_coasts():
    opt = SGD(0.0, 0.9, "classical")
    opt.velocity["t"] = np.array([1.0, -2.0])
    theta = {"t": np.array([0.0, 0.0])}
    opt.step(theta, {"t": np.array([123.0, 7.0])})
    assert theta["t"].tolist() == [0.9, -1.8]


def test_plain_and_zero_momentum():
    for opt in (SGD(0.1, 0.0, "classical"), SGD(0.1, 0.9, "plain")):
        theta = {"t": np.array([1.0])}
        opt.step(theta, {"t": np.array([2.0])})
        opt.step(theta, {"t": np.array([2.0])})
        assert theta["t"][0] == pytest.approx(0.6, abs=1e-15)


def test_nesterov_reference_iteration():
    opt = SGD(0.1, 0.9, "nesterov")
    theta = {"t": np.array([1.0])}
    t, v = 1.0, 0.0
    for _ in range(50):
        opt.minimize_step(theta, lambda p: {"t": 2 * p["t"]})
        v = 0.9 * v - 0.1 * 2 * (t + 0.9 * v)
        t = t + v
        assert abs(theta["t"][0] - t) <= 1e-12


def test_optimizer_errors():
    with pytest.raises(ParameterError):
        SGD(mode="adam")
    with pytest.raises(ParameterError):
        SGD(momentum=1.0)
    opt = SGD()
    with pytest.raises(ShapeError):
        opt.step({"a": np.zeros(2)}, {"a": np.zeros(3)})


def test_schedule():
    s = Schedule(0.01, 1e-6, 4)
    assert lr_schedule(0, s) == 0.01
    assert lr_schedule(4, s) == 1e-6 and lr_schedule(9, s) == 1e-6
    assert lr_schedule(2, s) == pytest.approx(1e-4, rel=1e-12)
    lrs = [lr_schedule(e) for e in range(40)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ParameterError):
        lr_schedule(-1)

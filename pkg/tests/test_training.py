import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pmf
from dfguide.guidance import ApproxGuidance, ExactGuidance
from dfguide.nn import OptimizerConfig, make_approximator
from dfguide.paths import make_path
from dfguide.posterior import DivergenceError, ExactPosterior, training_batch
from dfguide.statespace import DensityRatio, Pmf, StateSpace, enumerate_states
from dfguide.training import (
    MissingTargetData,
    RatioModel,
    bregman_loss_posterior,
    bregman_loss_rate,
    density_ratio_loss,
    fit_guidance,
    fit_ratio,
    grad_check,
    regularization_loss,
)


class ConstH:
    """Guidance stand-in with h identically c."""

    def __init__(self, c, dims, size):
        self.c, self.dims, self.size = c, dims, size

    def matrix(self, t, states):
        return np.full((len(states), self.dims, self.size), self.c)

    def scalar(self, t, states):
        return np.full(len(states), self.c)


def _setup(rng, dims=2, size=3):
    sp = StateSpace(dims, size)
    p1 = random_pmf(sp, rng)
    r = DensityRatio.from_table(sp, 0.2 + 2 * rng.random(sp.n_states))
    return sp, p1, r, make_path("mixture-uniform", sp)


def test_bregman_unit_case():
    x = np.zeros((10, 2), dtype=np.int64)
    res = bregman_loss_posterior(ConstH(1.0, 2, 3), np.full(10, 0.5), x, x, np.ones(10))
    assert res.loss == pytest.approx(2.0)
    assert bregman_loss_rate(ConstH(1.0, 2, 3), np.full(10, 0.5), x, x, np.ones(10)).loss == pytest.approx(1.0)


@given(st.integers(0, 2**31 - 1))
def test_bregman_minimized_at_mean_ratio(seed):
    """Over constant h the loss h - mean(r) log h bottoms out at mean(r)."""
    rng = np.random.default_rng(seed)
    r = 0.1 + 3 * rng.random(50)
    x = np.zeros((50, 1), dtype=np.int64)
    t = np.full(50, 0.5)
    m = r.mean()
    best = bregman_loss_rate(ConstH(m, 1, 2), t, x, x, r).loss
    assert best == pytest.approx(m - m * np.log(m), rel=1e-12)
    for c in (0.5 * m, 0.9 * m, 1.1 * m, 2 * m):
        assert bregman_loss_rate(ConstH(c, 1, 2), t, x, x, r).loss > best


def test_bregman_rejects_bad_ratio():
    x = np.zeros((3, 1), dtype=np.int64)
    with pytest.raises(ValueError):
        bregman_loss_rate(ConstH(1.0, 1, 2), np.zeros(3), x, x, np.array([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        bregman_loss_rate(ConstH(1.0, 1, 2), np.zeros(3), x, x, np.zeros(3))


def test_regularization_with_constant_h_is_zero(rng):
    x = rng.integers(0, 3, (20, 2))
    p = rng.random((20, 2, 3))
    p /= p.sum(-1, keepdims=True)
    assert regularization_loss(ConstH(4.0, 2, 3), p, np.full(20, 0.3), x, x).loss == pytest.approx(0.0, abs=1e-12)


def test_ratio_loss_at_unit_ratio():
    sp = StateSpace(2, 3)
    model = RatioModel(make_approximator(sp, (1,), {"kind": "tabular", "n_buckets": 1}), sp)
    x = np.zeros((5, 2), dtype=np.int64)
    assert density_ratio_loss(model, x, x).loss == pytest.approx(2 * np.log(2))


def _perturbed(model, rng):
    return model.params + 0.3 * rng.standard_normal(model.params.size)


BACKENDS = [
    ({"kind": "tabular", "n_buckets": 4}, 1e-5),
    ({"kind": "mlp", "hidden": (16,), "activation": "tanh"}, 1e-4),
    ({"kind": "mlp", "hidden": (8, 8), "activation": "relu", "encoding": "scalar"}, 1e-4),
]


@pytest.mark.parametrize("backend,tol", BACKENDS)
def test_gradients_match_finite_differences(backend, tol, rng):
    sp, p1, r, path = _setup(rng)
    t, x1, xt = training_batch(p1, path, 64, rng)
    rv = r(x1)
    post = ExactPosterior(p1, path)(t, xt)
    gm = ApproxGuidance(make_approximator(sp, (2, 3), backend), sp, "posterior")
    gs = ApproxGuidance(make_approximator(sp, (1,), backend), sp, "rate")
    rm = RatioModel(make_approximator(sp, (1,), {**backend, "n_buckets": 1}), sp)
    th = _perturbed(gm, rng)
    assert grad_check(lambda p: bregman_loss_posterior(gm, t, x1, xt, rv, True, p), th) < tol
    assert grad_check(lambda p: regularization_loss(gm, post, t, x1, xt, True, p), th) < tol
    assert grad_check(lambda p: bregman_loss_rate(gs, t, x1, xt, rv, True, p), _perturbed(gs, rng)) < tol
    assert grad_check(lambda p: density_ratio_loss(rm, x1, xt, True, p), _perturbed(rm, rng)) < tol


def test_grad_check_detects_wrong_gradient():
    from dfguide.training import LossResult

    bad = lambda p: LossResult(float((p ** 2).sum()), 3 * p)
    assert grad_check(bad, np.array([1.0, -2.0])) > 0.3


def test_missing_target_data(rng):
    sp, p1, r, path = _setup(rng)
    with pytest.raises(MissingTargetData):
        fit_guidance(p1, path, r, {"kind": "tabular"}, OptimizerConfig(lam=0.5, steps=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(rng):
    sp, p1, r, path = _setup(rng)
    with pytest.raises(DivergenceError):
        fit_guidance(p1, path, r, {"kind": "tabular", "n_buckets": 1}, OptimizerConfig(algorithm="sgd", lr=1e6, steps=50, lr_decay=False), gap_times=())


def test_fit_is_deterministic(rng):
    sp, p1, r, path = _setup(rng)
    cfg = OptimizerConfig(steps=30, batch_size=64, seed=4)
    a, _ = fit_guidance(p1, path, r, {"kind": "tabular", "n_buckets": 2}, cfg, gap_times=())
    b, _ = fit_guidance(p1, path, r, {"kind": "tabular", "n_buckets": 2}, cfg, gap_times=())
    assert np.array_equal(a.params, b.params)


@pytest.mark.slow
def test_single_coordinate_guidance_converges_to_ratio(rng):
    """With D = 1 the exact h^1(s, x) is r(s) wherever the posterior has mass."""
    sp = StateSpace(1, 4)
    p1 = Pmf(sp, [0.1, 0.2, 0.3, 0.4])
    r = DensityRatio.from_table(sp, [2.0, 0.5, 1.0, 1.5])
    path = make_path("mixture-uniform", sp)
    model, rep = fit_guidance(p1, path, r, {"kind": "tabular", "n_buckets": 1}, OptimizerConfig(lr=0.05, steps=1500, batch_size=1024), gap_times=(0.2, 0.8))
    assert rep["gap_to_exact"] < 0.05
    h = model.matrix(0.5, enumerate_states(sp))
    assert np.allclose(h[:, 0], [2.0, 0.5, 1.0, 1.5], atol=0.05)
    assert rep["grad_check"]["bregman_loss_posterior"] < 1e-5


@pytest.mark.slow
def test_rate_guidance_masked_converges(rng):
    sp = StateSpace.with_mask(2, 3)
    p1 = random_pmf(sp, rng)
    data = sp.is_data_state(enumerate_states(sp))
    r = DensityRatio.from_table(sp, np.where(data, 0.3 + rng.random(sp.n_states), 1.0))
    path = make_path("mixture-masked", sp)
    model, rep = fit_guidance(p1, path, r, {"kind": "tabular", "n_buckets": 1}, OptimizerConfig(lr=0.02, steps=3000, batch_size=1024), kind="rate")
    assert rep["gap_to_exact"] < 0.05


@pytest.mark.slow
def test_ratio_fit_recovers_true_ratio(rng):
    sp = StateSpace(1, 4)
    p = Pmf(sp, [0.4, 0.3, 0.2, 0.1])
    q = Pmf(sp, [0.1, 0.2, 0.3, 0.4])
    model, rep = fit_ratio(p, q, sp, {"kind": "tabular"}, OptimizerConfig(lr=0.05, steps=1500, batch_size=2048))
    got = model(enumerate_states(sp))
    assert np.allclose(got, q.weights / p.weights, rtol=0.1)
    assert rep["grad_check"]["density_ratio_loss"] < 1e-5


def test_exact_guidance_is_bregman_stationary(rng):
    """Exact h has lower expected Bregman loss than perturbed versions of itself."""
    sp, p1, r, path = _setup(rng)
    t, x1, xt = training_batch(p1, path, 100_000, rng)
    rv = r(x1)
    exact = ExactGuidance(p1, r, path)
    base = bregman_loss_posterior(exact, t, x1, xt, rv).loss

    class Scaled:
        def __init__(self, c):
            self.c = c

        def matrix(self, t, s):
            return exact.matrix(t, s) * self.c

    for c in (0.9, 1.1):
        assert bregman_loss_posterior(Scaled(c), t, x1, xt, rv).loss > base

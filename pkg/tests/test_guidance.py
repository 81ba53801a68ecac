import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import as_dict, random_pmf
from dfguide.ctmc import SamplerConfig, sample_unguided
from dfguide.guidance import (
    CallCountMismatch,
    ExactGuidance,
    GuidanceScheme,
    call_count,
    exact_guidance_h,
    exact_guided_target,
    exact_scalar_h,
    first_order_factor,
    guided_posterior,
    guided_rows_affine,
    guided_rows_posterior,
    guided_rows_rate,
    predictor_strength_factor,
    rate_based_factor,
    sample_guided,
)
from dfguide.paths import make_path
from dfguide.posterior import ExactPosterior
from dfguide.statespace import DensityRatio, FactorizedPosterior, Pmf, StateSpace, empirical_pmf, enumerate_states, pmf_total_variation


def _problem(rng, dims=2, size=3, path="mixture-uniform", zero_frac=0.0):
    sp = StateSpace.with_mask(dims, size - 1) if path == "mixture-masked" else StateSpace(dims, size)
    p1 = random_pmf(sp, rng, zero_frac=zero_frac)
    table = 0.2 + 2.0 * rng.random(sp.n_states)
    return sp, p1, DensityRatio.from_table(sp, table), make_path(path, sp)


def test_guided_posterior_example():
    out = guided_posterior(np.array([0.1, 0.3, 0.5]) / 0.9, np.array([1.0, 1.0, 2.0]))
    assert np.allclose(out, [1 / 14, 3 / 14, 10 / 14], atol=1e-15)
    assert np.allclose(out, [0.0714, 0.2143, 0.7143], atol=5e-5)


def test_guided_posterior_ignores_h_off_support():
    out = guided_posterior(np.array([0.0, 0.5, 0.5]), np.array([np.nan, 1.0, 3.0]))
    assert np.allclose(out, [0.0, 0.25, 0.75])
    with pytest.raises(ValueError):
        guided_posterior(np.array([0.5, 0.5]), np.array([0.0, 1.0]))
    wrapped = guided_posterior(FactorizedPosterior(np.array([[0.5, 0.5]])), np.array([[1.0, 3.0]]))
    assert isinstance(wrapped, FactorizedPosterior)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_guided_posterior_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    p = rng.random((4, 2, 5))
    p /= p.sum(-1, keepdims=True)
    h = 0.1 + rng.random((4, 2, 5))
    assert np.allclose(guided_posterior(p, h), guided_posterior(p, c * h), atol=1e-13)


def test_constant_ratio_leaves_posterior_unchanged(rng):
    sp = StateSpace(2, 4)
    p1 = random_pmf(sp, rng)
    path = make_path("mixture-uniform", sp)
    states = enumerate_states(sp)
    g = ExactGuidance(p1, DensityRatio.constant(2.5), path)
    h = g.matrix(0.4, states)
    assert np.abs(h - 2.5).max() < 1e-14
    p = ExactPosterior(p1, path)(0.4, states)
    assert np.abs(guided_posterior(p, h) - p).max() < 1e-14


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.95))
def test_exact_h_matches_oracle(seed, t):
    rng = np.random.default_rng(seed)
    sp, p1, r, path = _problem(rng, zero_frac=0.3)
    k = oracles.kappa_cos(t)
    q0 = [1 / 3] * 3
    pd = as_dict(p1)
    rd = {s: float(v) for s, v in zip(pd, r.table(sp))}
    states = enumerate_states(sp)
    h = exact_guidance_h(p1, r, path, t, states)
    hs = exact_scalar_h(p1, r, path, t, states)
    for x, hx, sx in zip(states, h, hs):
        assert np.allclose(hx, oracles.guidance_h(pd, rd, tuple(x), k, q0, 2, 3), atol=1e-12)
        assert sx == pytest.approx(oracles.scalar_h(pd, rd, tuple(x), k, q0), abs=1e-12)


def test_single_coordinate_h_is_ratio(rng):
    sp, p1, r, path = _problem(rng, dims=1, size=5)
    h = exact_guidance_h(p1, r, path, 0.3, np.array([[2]]))[0, 0]
    assert np.allclose(h, r(enumerate_states(sp)), atol=1e-14)


def test_scalar_h_is_posterior_average_of_h(rng):
    sp, p1, r, path = _problem(rng)
    states = enumerate_states(sp)
    h = exact_guidance_h(p1, r, path, 0.6, states)
    p = ExactPosterior(p1, path)(0.6, states)
    hs = exact_scalar_h(p1, r, path, 0.6, states)
    for d in range(2):
        assert np.allclose((h[:, d] * p[:, d]).sum(-1), hs, atol=1e-13)


def test_masked_guidance_time_independent(rng):
    sp, p1, r, path = _problem(rng, size=4, path="mixture-masked")
    states = enumerate_states(sp)
    g = ExactGuidance(p1, r, path)
    a, b = g.matrix(0.1, states), g.matrix(0.9, states)
    ok = np.isfinite(a)
    assert np.array_equal(ok, np.isfinite(b))
    assert np.abs(a[ok] - b[ok]).max() < 1e-9


def test_rate_factor_examples():
    h = lambda t, x: 1.0 + x.sum(-1).astype(float)
    x = np.array([[1, 1]])
    assert rate_based_factor(h, 0.5, x, x)[0] == 1.0
    assert rate_based_factor(h, 0.5, x, np.array([[1, 3]]))[0] == pytest.approx(5 / 3)
    with pytest.raises(ValueError):
        rate_based_factor(h, 0.5, x, np.array([[0, 0]]))
    with pytest.raises(ZeroDivisionError):
        rate_based_factor(lambda t, s: np.zeros(len(s)), 0.5, x, x)


@given(st.integers(0, 3), st.integers(0, 3))
def test_predictor_factor_limits(a, b):
    h = lambda t, x: 0.5 + x[:, 0] ** 2.0
    x, z = np.array([[a]]), np.array([[b]])
    assert predictor_strength_factor(h, 0.0, 0.3, x, z)[0] == 1.0
    assert predictor_strength_factor(h, 1.0, 0.3, x, z)[0] == rate_based_factor(h, 0.3, x, z)[0]
    assert predictor_strength_factor(h, 2.0, 0.3, x, z)[0] == pytest.approx(rate_based_factor(h, 0.3, x, z)[0] ** 2)


def test_first_order_factor():
    g = np.array([0.5, -1.0])
    assert first_order_factor(g, [2, 3], [2, 3]) == 1.0
    assert first_order_factor(g, [4, 2], [2, 3]) == pytest.approx(np.exp(2.0))


def test_call_count_table():
    masked = StateSpace.with_mask(2, 33)
    grid = StateSpace(2, 33)
    P = GuidanceScheme.parse
    assert call_count(P("posterior"), grid, "uniform") == 1
    assert call_count(P("first-order"), grid, "uniform") == 2
    assert call_count(P("rate"), masked, "masked") == 3
    assert call_count(P("predictor:3"), masked, "masked") == 3
    assert call_count(P("rate"), grid, "uniform") == 65
    assert call_count(P("rate"), masked, "uniform") == 67
    assert call_count(P("none"), grid, "uniform") == 0


def test_scheme_parse_roundtrip():
    for text in ("posterior", "rate", "predictor:3", "first-order", "none"):
        assert str(GuidanceScheme.parse(text)) == text
    with pytest.raises(ValueError):
        GuidanceScheme.parse("rate:2")
    with pytest.raises(ValueError):
        GuidanceScheme("bogus")
    with pytest.raises(ValueError):
        GuidanceScheme("predictor", -1.0)


@pytest.mark.parametrize("init,path_name", [("uniform", "mixture-uniform"), ("masked", "mixture-masked")])
@pytest.mark.parametrize("scheme", ["posterior", "rate", "predictor:2", "first-order"])
def test_observed_call_counts(scheme, init, path_name, rng):
    sp, p1, r, path = _problem(rng, size=4, path=path_name)
    g = ExactGuidance(p1, r, path)
    s = GuidanceScheme.parse(scheme)
    out, rep = sample_guided(ExactPosterior(p1, path), path, s, g, SamplerConfig(steps=8, chains=64, initial=init))
    assert rep["observed_calls_per_step"] == [call_count(s, sp, init)]
    assert g.calls == call_count(s, sp, init) * rep["loop_steps"] + (1 if s.variant == "posterior" else 0)


def test_mismatched_guidance_model_is_caught(rng):
    sp, p1, r, path = _problem(rng)

    class Doubled(ExactGuidance):
        def matrix(self, t, states):
            super().matrix(t, states)
            return super().matrix(t, states)

    with pytest.raises(CallCountMismatch):
        sample_guided(ExactPosterior(p1, path), path, GuidanceScheme("posterior"), Doubled(p1, r, path), SamplerConfig(steps=4, chains=8))


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_affine_form_matches_reweighted_rows(seed, t):
    rng = np.random.default_rng(seed)
    sp, p1, r, path = _problem(rng, size=4, path="mixture-masked")
    states = enumerate_states(sp)
    reach = np.isfinite(ExactPosterior(p1, path, on_unreachable="factorized")(t, states)).all(axis=(1, 2))
    p = ExactPosterior(p1, path)(t, states)
    h = ExactGuidance(p1, r, path).matrix(t, states)
    ok = np.all(np.isfinite(np.where(p > 0, h, 1.0)), axis=(1, 2)) & reach
    a = guided_rows_affine(path, t, states[ok], p[ok], h[ok])
    b = guided_rows_posterior(path, t, states[ok], p[ok], h[ok])
    assert np.abs(a - b).max() < 1e-9


def test_rate_guided_rows_are_generator(rng):
    sp, p1, r, path = _problem(rng, size=4)
    states = enumerate_states(sp)
    p = ExactPosterior(p1, path)(0.5, states)
    rows = guided_rows_rate(path, 0.5, states, p, ExactGuidance(p1, r, path).scalar)
    assert np.abs(rows.sum(-1)).max() < 1e-12
    off = rows.copy()
    np.put_along_axis(off, states[..., None], 0.0, axis=-1)
    assert off.min() >= 0


@pytest.mark.parametrize("init,path_name", [("uniform", "mixture-uniform"), ("masked", "mixture-masked")])
@pytest.mark.parametrize("scheme", ["predictor:0", "posterior"])
def test_no_op_guidance_is_bit_identical_to_unguided(scheme, init, path_name, rng):
    sp, p1, _, path = _problem(rng, size=4, path=path_name)
    post = ExactPosterior(p1, path)
    cfg = SamplerConfig(steps=16, chains=500, initial=init, seed=9)
    g = ExactGuidance(p1, DensityRatio.constant(1.0), path)
    guided, _ = sample_guided(post, path, GuidanceScheme.parse(scheme), g, cfg)
    assert np.array_equal(guided.states, sample_unguided(post, path, cfg).states)


def test_exact_guided_target(rng):
    sp, p1, r, _ = _problem(rng)
    q = exact_guided_target(p1, r)
    w = p1.weights * r.table(sp)
    assert np.allclose(q.weights, w / w.sum())


@pytest.mark.slow
@pytest.mark.parametrize("init,path_name", [("uniform", "mixture-uniform"), ("masked", "mixture-masked")])
def test_exact_posterior_guidance_hits_guided_target(init, path_name, rng):
    sp, p1, r, path = _problem(rng, size=5, path=path_name)
    q1 = exact_guided_target(p1, r)
    out, _ = sample_guided(ExactPosterior(p1, path), path, GuidanceScheme("posterior"), ExactGuidance(p1, r, path), SamplerConfig(steps=128, chains=100_000, initial=init, seed=1))
    floor = pmf_total_variation(empirical_pmf(q1.sample(100_000, rng), sp), q1)
    assert pmf_total_variation(empirical_pmf(out, sp), q1) < floor + 0.02


@pytest.mark.parametrize("scheme", ["rate", "first-order"])
def test_constant_ratio_rate_schemes_match_unguided(scheme, rng):
    """Rate-type schemes see h(z)/h(x) = 1 only up to rounding; nearly every chain agrees."""
    sp, p1, _, path = _problem(rng, size=4)
    post = ExactPosterior(p1, path)
    cfg = SamplerConfig(steps=16, chains=2000, seed=9)
    g = ExactGuidance(p1, DensityRatio.constant(1.0), path)
    guided, _ = sample_guided(post, path, GuidanceScheme.parse(scheme), g, cfg)
    assert np.mean(np.all(guided.states == sample_unguided(post, path, cfg).states, axis=1)) > 0.999


def test_rate_scheme_metric_path_uses_marginal_rates(rng):
    sp, p1, r, _ = _problem(rng, size=4)
    path = make_path("metric", sp)
    q1 = exact_guided_target(p1, r)
    out, rep = sample_guided(ExactPosterior(p1, path), path, GuidanceScheme("rate"), ExactGuidance(p1, r, path), SamplerConfig(steps=128, chains=20_000, seed=2))
    assert rep["calls_per_step"] == 2 * 3 + 1
    assert pmf_total_variation(empirical_pmf(out, sp), q1) < pmf_total_variation(p1, q1)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pmf
from dfguide.statespace import (
    DensityRatio,
    EnumerationInfeasible,
    FactorizedPosterior,
    Pmf,
    SampleBatch,
    StateSpace,
    empirical_pmf,
    enumerate_states,
    pmf_kl_divergence,
    pmf_total_variation,
)


def test_enumerate_single_coordinate():
    assert enumerate_states(StateSpace(1, 3)).tolist() == [[0], [1], [2]]


def test_enumerate_lexicographic():
    assert enumerate_states(StateSpace(2, 2)).tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]


def test_enumerate_grid_size():
    assert enumerate_states(StateSpace(2, 33)).shape == (1089, 2)


def test_enumeration_cap():
    with pytest.raises(EnumerationInfeasible):
        enumerate_states(StateSpace(8, 33))


def test_space_validation():
    with pytest.raises(ValueError):
        StateSpace(0, 3)
    with pytest.raises(ValueError):
        StateSpace(2, 1)
    with pytest.raises(ValueError):
        StateSpace(2, 3, mask_symbol=3)
    sp = StateSpace.with_mask(2, 33)
    assert sp.alphabet_size == 34 and sp.mask_symbol == 33
    assert sp.data_symbols.tolist() == list(range(33))


@given(st.integers(1, 3), st.integers(2, 6), st.data())
def test_index_roundtrip(dims, size, data):
    sp = StateSpace(dims, size)
    idx = np.arange(sp.n_states)
    assert np.array_equal(sp.index_of(sp.state_of(idx)), idx)
    assert np.array_equal(sp.index_of(enumerate_states(sp)), idx)


def test_tv_examples():
    sp = StateSpace(2, 2)
    a = Pmf.point_mass(sp, [0, 0])
    assert pmf_total_variation(a, a) == 0.0
    assert pmf_total_variation(a, Pmf.point_mass(sp, [1, 1])) == 1.0
    u = Pmf(sp, np.full(4, 0.25))
    assert pmf_total_variation(u, a) == pytest.approx(0.75, abs=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_tv_metric_properties(seed):
    rng = np.random.default_rng(seed)
    sp = StateSpace(2, 3)
    a, b, c = (random_pmf(sp, rng, zero_frac=0.3) for _ in range(3))
    ab = pmf_total_variation(a, b)
    assert ab == pytest.approx(pmf_total_variation(b, a), abs=1e-15)
    assert 0.0 <= ab <= 1.0
    assert ab <= pmf_total_variation(a, c) + pmf_total_variation(c, b) + 1e-12
    assert pmf_total_variation(a, a) == 0.0


def test_pmf_normalization_rules():
    sp = StateSpace(1, 3)
    with pytest.raises(ValueError):
        Pmf(sp, [-0.1, 0.6, 0.5])
    with pytest.raises(ValueError):
        Pmf(sp, [0.2, 0.3, 0.6])  # off by 0.1
    p = Pmf(sp, [0.2, 0.3, 0.5 + 5e-10])
    assert abs(p.weights.sum() - 1.0) < 1e-12


def test_factorized_rows_validated():
    with pytest.raises(ValueError):
        FactorizedPosterior(np.array([[[0.5, 0.6]]]))
    FactorizedPosterior(np.array([[[0.5, 0.5]], [[1.0, 0.0]]]))


def test_empirical_pmf_examples():
    sp = StateSpace(2, 2)
    e = empirical_pmf(SampleBatch(np.zeros((4, 2), dtype=np.int64), 1.0, sp), sp)
    assert e.weights.tolist() == [1.0, 0.0, 0.0, 0.0]
    e = empirical_pmf(np.array([[0, 0], [0, 1], [0, 0], [0, 1]]), sp)
    assert e.weights.tolist() == [0.5, 0.5, 0.0, 0.0]


def test_empirical_concentration(rng):
    sp = StateSpace(2, 5)
    p = random_pmf(sp, rng)
    e = empirical_pmf(p.sample(100_000, rng), sp)
    assert pmf_total_variation(e, p) < 0.02


def test_kl_examples():
    sp = StateSpace(1, 2)
    a = Pmf(sp, [0.5, 0.5])
    b = Pmf(sp, [0.25, 0.75])
    assert pmf_kl_divergence(a, a) == 0.0
    assert pmf_kl_divergence(a, b) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(0.5 / 0.75))
    assert pmf_kl_divergence(a, Pmf(sp, [1.0, 0.0])) == float("inf")


def test_density_ratio_between():
    sp = StateSpace(1, 3)
    q = Pmf(sp, [0.5, 0.5, 0.0])
    p = Pmf(sp, [0.25, 0.25, 0.5])
    r = DensityRatio.between(q, p)
    assert np.allclose(r(np.array([[0], [1]])), [2.0, 2.0])
    with pytest.raises(ValueError):
        DensityRatio.between(p, q)  # target mass outside the source support

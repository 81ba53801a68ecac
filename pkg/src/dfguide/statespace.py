"""Finite state spaces S^D, dense pmfs over them, and per-coordinate posteriors.

States are integer arrays of shape ``(..., D)``. The flat index of a state is
its position in lexicographic order, i.e. ``sum_d x[d] * S**(D-1-d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

ENUMERATION_CAP = 2**20
PMF_ATOL = 1e-12
RENORMALIZE_LIMIT = 1e-9
ROW_ATOL = 1e-10


class EnumerationInfeasible(ValueError):
    """Raised when a dense object over S^D would exceed the enumeration cap."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateSpace:
    dims: int
    alphabet_size: int
    mask_symbol: Optional[int] = None

    def __post_init__(self):
        if self.dims < 1:
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if self.alphabet_size < 2:
            raise ValueError(f"alphabet_size must be >= 2, got {self.alphabet_size}")
        if self.mask_symbol is not None and not 0 <= self.mask_symbol < self.alphabet_size:
            raise ValueError(f"mask_symbol {self.mask_symbol} outside [0, {self.alphabet_size})")

    @classmethod
    def with_mask(cls, dims: int, data_symbols: int) -> "StateSpace":
        """Space whose last symbol is an absorbing mask appended after the data symbols."""
        return cls(dims, data_symbols + 1, data_symbols)

    @property
    def n_states(self) -> int:
        return self.alphabet_size**self.dims

    @property
    def data_symbols(self) -> np.ndarray:
        s = np.arange(self.alphabet_size)
        if self.mask_symbol is None:
            return s
        return s[s != self.mask_symbol]

    @property
    def n_data_symbols(self) -> int:
        return self.alphabet_size - (self.mask_symbol is not None)

    def check_enumerable(self, cap: int = ENUMERATION_CAP) -> None:
        if self.n_states > cap:
            raise EnumerationInfeasible(
                f"enumeration infeasible: |S|^D = {self.alphabet_size}^{self.dims} "
                f"= {self.n_states} exceeds cap {cap}"
            )

    def index_of(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        weights = self.alphabet_size ** np.arange(self.dims - 1, -1, -1, dtype=np.int64)
        return states @ weights

    def state_of(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.int64)
        out = np.empty(index.shape + (self.dims,), dtype=np.int64)
        rem = index.copy()
        for d in range(self.dims - 1, -1, -1):
            out[..., d] = rem % self.alphabet_size
            rem //= self.alphabet_size
        return out

    def is_data_state(self, states) -> np.ndarray:
        """True where no coordinate holds the mask symbol."""
        states = np.asarray(states)
        if self.mask_symbol is None:
            return np.ones(states.shape[:-1], dtype=bool)
        return np.all(states != self.mask_symbol, axis=-1)

    def validate_states(self, states) -> np.ndarray:
        states = np.asarray(states)
        if states.ndim < 1 or states.shape[-1] != self.dims:
            raise ValueError(f"states must have trailing dimension {self.dims}, got {states.shape}")
        if not np.issubdtype(states.dtype, np.integer):
            raise TypeError("states must be integer symbol indices")
        if states.size and (states.min() < 0 or states.max() >= self.alphabet_size):
            raise ValueError(f"state entries must lie in [0, {self.alphabet_size})")
        return states.astype(np.int64, copy=False)


def enumerate_states(space: StateSpace, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All states of S^D in lexicographic order, shape (|S|^D, D)."""
    space.check_enumerable(cap)
    return space.state_of(np.arange(space.n_states))


@dataclass(frozen=True)
class Pmf:
    """Dense probability vector over S^D, indexed by lexicographic state index."""

    space: StateSpace
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.space.check_enumerable()
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape != (self.space.n_states,):
            raise ValueError(f"expected {self.space.n_states} weights, got {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("pmf weights must be finite")
        if np.any(w < 0):
            raise ValueError(f"pmf has negative weight {w.min():.3e}")
        total = w.sum()
        if abs(total - 1.0) >= RENORMALIZE_LIMIT:
            raise ValueError(f"pmf weights sum to {total!r}, deviation exceeds {RENORMALIZE_LIMIT}")
        if total != 1.0:
            w = w / total
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def from_unnormalized(cls, space: StateSpace, weights) -> "Pmf":
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if np.any(w < 0):
            raise ValueError("unnormalized weights must be non-negative")
        total = w.sum()
        if not total > 0:
            raise ValueError("total mass is zero")
        return cls(space, w / total)

    @classmethod
    def point_mass(cls, space: StateSpace, state) -> "Pmf":
        w = np.zeros(space.n_states)
        w[int(space.index_of(state))] = 1.0
        return cls(space, w)

    @classmethod
    def uniform_over_data(cls, space: StateSpace) -> "Pmf":
        states = enumerate_states(space)
        return cls.from_unnormalized(space, space.is_data_state(states).astype(float))

    def probability(self, states) -> np.ndarray:
        return self.weights[self.space.index_of(states)]

    @property
    def support(self) -> np.ndarray:
        return self.weights > 0

    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` states, shape (n, D)."""
        cdf = np.cumsum(self.weights)
        idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        idx = np.minimum(idx, self.space.n_states - 1)
        return self.space.state_of(idx)

    def as_grid(self) -> np.ndarray:
        return self.weights.reshape((self.space.alphabet_size,) * self.space.dims)


@dataclass(frozen=True)
class FactorizedPosterior:
    """Per-coordinate posterior rows, shape (..., D, |S|); each row is a pmf over S."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim < 2:
            raise ValueError("posterior matrix needs shape (..., D, |S|)")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("posterior entries must be finite and non-negative")
        err = np.abs(m.sum(axis=-1) - 1.0).max(initial=0.0)
        if err > ROW_ATOL:
            raise ValueError(f"posterior rows deviate from 1 by {err:.3e}")
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def dims(self) -> int:
        return self.matrix.shape[-2]

    @property
    def alphabet_size(self) -> int:
        return self.matrix.shape[-1]


@dataclass(frozen=True)
class SampleBatch:
    states: np.ndarray = field(repr=False)
    time: float = 1.0
    space: Optional[StateSpace] = None

    def __post_init__(self):
        states = np.asarray(self.states)
        if states.ndim != 2:
            raise ValueError(f"sample batch states must be (N, D), got {states.shape}")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"time {self.time} outside [0, 1]")
        if self.space is not None:
            states = self.space.validate_states(states)
        elif states.size and states.min() < 0:
            raise ValueError("negative symbol index in sample batch")
        object.__setattr__(self, "states", _frozen(states.astype(np.int64)))

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class DensityRatio:
    """Positive ratio r(x1) = q1(x1) / p1(x1), possibly known only up to a constant."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    support_mask: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, states) -> np.ndarray:
        states = np.asarray(states)
        vals = np.asarray(self.evaluator(states), dtype=np.float64)
        if self.support_mask is not None:
            on = np.asarray(self.support_mask(states), dtype=bool)
            bad = on & ~(vals > 0)
        else:
            bad = ~(vals > 0)
        if np.any(bad):
            raise ValueError("density ratio must be strictly positive on the source support")
        return vals

    @classmethod
    def from_table(cls, space: StateSpace, table) -> "DensityRatio":
        table = _frozen(np.asarray(table, dtype=np.float64).reshape(-1))
        if table.shape != (space.n_states,):
            raise ValueError("ratio table must have one entry per state")
        return cls(lambda s: table[space.index_of(s)])

    @classmethod
    def constant(cls, c: float = 1.0) -> "DensityRatio":
        if not c > 0:
            raise ValueError("constant ratio must be positive")
        return cls(lambda s: np.full(np.asarray(s).shape[:-1], float(c)))

    @classmethod
    def between(cls, target: Pmf, source: Pmf) -> "DensityRatio":
        """Exact q1/p1 on the source support; requires supp(q1) within supp(p1)."""
        if target.space != source.space:
            raise ValueError("pmfs live on different spaces")
        if np.any((target.weights > 0) & (source.weights == 0)):
            raise ValueError("target is not absolutely continuous w.r.t. source")
        table = np.ones_like(source.weights)
        on = source.weights > 0
        table[on] = target.weights[on] / source.weights[on]
        # states with q1 = 0 inside the support get a tiny positive ratio
        table[on & (table == 0)] = np.finfo(float).tiny
        return cls.from_table(source.space, table)

    def table(self, space: StateSpace) -> np.ndarray:
        return self(enumerate_states(space))


def _check_same_space(a: Pmf, b: Pmf) -> None:
    if a.space != b.space:
        raise ValueError(f"pmfs live on different spaces: {a.space} vs {b.space}")


def pmf_total_variation(a: Pmf, b: Pmf) -> float:
    _check_same_space(a, b)
    return float(0.5 * np.abs(a.weights - b.weights).sum())


def pmf_kl_divergence(a: Pmf, b: Pmf) -> float:
    """KL(a || b); infinite when a puts mass outside supp(b)."""
    _check_same_space(a, b)
    on = a.weights > 0
    if np.any(b.weights[on] == 0):
        return float("inf")
    return float(np.sum(a.weights[on] * np.log(a.weights[on] / b.weights[on])))


def off_support_mass(a: Pmf, b: Pmf) -> float:
    """Mass that ``a`` places where ``b`` is zero (what makes KL(a || b) infinite)."""
    _check_same_space(a, b)
    return float(a.weights[b.weights == 0].sum())


def empirical_pmf(batch, space: StateSpace) -> Pmf:
    """Normalized histogram of a SampleBatch (or raw (N, D) array) over S^D."""
    states = batch.states if isinstance(batch, SampleBatch) else np.asarray(batch)
    if states.shape[0] == 0:
        raise ValueError("empirical pmf of an empty batch")
    states = space.validate_states(states)
    counts = np.bincount(space.index_of(states), minlength=space.n_states)
    return Pmf(space, counts / counts.sum())

"""Schedulers, per-coordinate conditional probability paths and their rates.

Rate convention everywhere: ``u(z, x | x1)`` is the intensity of jumping from
``x`` to ``z``. Rate tensors are stored as ``R[x, z, x1]`` so that
``R[x, :, x1]`` is the outgoing row of current symbol ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .statespace import StateSpace

SCHEDULER_GRID = 1001
TIME_EPS = 1e-3


class TerminalTimeError(ValueError):
    """The conditional rate has a pole at kappa_t = 1."""


@dataclass(frozen=True)
class Scheduler:
    kappa: Callable[[np.ndarray], np.ndarray]
    kappa_dot: Callable[[np.ndarray], np.ndarray]
    name: str

    def __post_init__(self):
        grid = np.linspace(0.0, 1.0, SCHEDULER_GRID)
        k = np.asarray(self.kappa(grid), dtype=float)
        kd = np.asarray(self.kappa_dot(grid), dtype=float)
        if abs(k[0]) > 1e-12 or abs(k[-1] - 1.0) > 1e-12:
            raise ValueError(f"scheduler {self.name!r} must satisfy kappa(0)=0, kappa(1)=1")
        if np.any(np.diff(k) < -1e-12) or np.any(kd < -1e-12):
            raise ValueError(f"scheduler {self.name!r} is not non-decreasing")

    def rate_scale(self, t) -> np.ndarray:
        """kappa_dot / (1 - kappa), the jump intensity towards x1."""
        t = np.asarray(t, dtype=float)
        one_minus = 1.0 - self.kappa(t)
        if np.any(one_minus <= 0.0):
            raise TerminalTimeError(f"terminal-time rate undefined: kappa_t = 1 at t = {t}")
        return self.kappa_dot(t) / one_minus


def scheduler_linear() -> Scheduler:
    return Scheduler(
        kappa=lambda t: np.asarray(t, dtype=float),
        kappa_dot=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        name="linear",
    )


def scheduler_cosine() -> Scheduler:
    """kappa_t = cos^2(pi/2 (1 - t))."""

    def kappa(t):
        return np.cos(0.5 * np.pi * (1.0 - np.asarray(t, dtype=float))) ** 2

    def kappa_dot(t):
        a = 0.5 * np.pi * (1.0 - np.asarray(t, dtype=float))
        return np.pi * np.sin(a) * np.cos(a)

    return Scheduler(kappa=kappa, kappa_dot=kappa_dot, name="cosine")


SCHEDULERS = {"linear": scheduler_linear, "cosine": scheduler_cosine}


def get_scheduler(name: str) -> Scheduler:
    try:
        return SCHEDULERS[name]()
    except KeyError:
        raise ValueError(f"unknown scheduler {name!r}; choose from {sorted(SCHEDULERS)}") from None


def finite_difference(f: Callable, t: float, h: float = 1e-6) -> float:
    """Central difference of a scalar function; test-only fallback for derivatives."""
    return float((f(t + h) - f(t - h)) / (2 * h))


def _check_time(t, upper_open: bool = False):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0) or (upper_open and np.any(t >= 1.0)):
        raise ValueError(f"invalid time {t}")
    return t


@dataclass(frozen=True)
class ConditionalPath:
    """Coordinate-wise conditional path q_{t|1}^d and its conditional rate.

    ``kind`` is ``"mixture"`` (noise pmf ``init`` blended with a point mass) or
    ``"metric"`` (softmax of ``-beta_t * distance``) with the kinetic-optimal rate.
    """

    kind: str
    scheduler: Scheduler
    space: StateSpace
    init: np.ndarray = field(repr=False)
    name: str = ""
    distance: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("mixture", "metric"):
            raise ValueError(f"unknown path kind {self.kind!r}")
        init = np.asarray(self.init, dtype=float)
        if init.shape != (self.space.alphabet_size,) or np.any(init < 0) or abs(init.sum() - 1) > 1e-12:
            raise ValueError("init must be a pmf over the alphabet")
        init = init.copy()
        init.setflags(write=False)
        object.__setattr__(self, "init", init)
        if self.kind == "metric":
            if self.space.mask_symbol is not None:
                raise ValueError("metric-induced paths are defined on mask-free alphabets")
            dist = self.distance
            if dist is None:
                s = np.arange(self.space.alphabet_size)
                dist = np.abs(s[:, None] - s[None, :]).astype(float)
            dist = np.array(dist, dtype=float)
            dist.setflags(write=False)
            object.__setattr__(self, "distance", dist)

    @property
    def masked(self) -> bool:
        m = self.space.mask_symbol
        return m is not None and self.init[m] == 1.0

    # -- metric-path schedule: beta_t = -log(1 - kappa_t), so beta_0 = 0, beta_1 = inf
    def beta(self, t) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return -np.log1p(-self.scheduler.kappa(t))

    def beta_dot(self, t) -> np.ndarray:
        return self.scheduler.rate_scale(t)

    def likelihood(self, t: float) -> np.ndarray:
        """L[x, x1] = q_{t|1}(x | x1) for one coordinate, shape (|S|, |S|)."""
        t = float(_check_time(t))
        n = self.space.alphabet_size
        if self.kind == "mixture":
            k = float(self.scheduler.kappa(t))
            return (1.0 - k) * self.init[:, None] + k * np.eye(n)
        if t >= 1.0:
            return np.eye(n)
        logits = -self.beta(t) * self.distance  # [x1, x] symmetric distance
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p.T.copy()

    def likelihood_pairs(self, t, xd, x1d) -> np.ndarray:
        """q_{t|1}(xd | x1d) for per-row times ``t`` (M,), symbols ``xd`` (M,) and ``x1d`` (K,): shape (M, K).

        Mixture paths are evaluated in closed form; other kinds fall back to one
        likelihood matrix per distinct time.
        """
        t = np.asarray(t, dtype=float)
        xd = np.asarray(xd)
        x1d = np.asarray(x1d)
        if self.kind == "mixture":
            k = np.asarray(self.scheduler.kappa(_check_time(t)), dtype=float)[:, None]
            return (1.0 - k) * self.init[xd][:, None] + k * (xd[:, None] == x1d[None, :])
        uniq, inv = np.unique(t, return_inverse=True)
        liks = np.stack([self.likelihood(float(tt)) for tt in uniq])
        return liks[inv, xd][:, x1d]

    def cond_prob(self, t: float, x1d: int) -> np.ndarray:
        """Row q_{t|1}(. | x1d) over the alphabet."""
        return self.likelihood(t)[:, int(x1d)].copy()

    def rate_tensor(self, t: float) -> np.ndarray:
        """R[x, z, x1] = u_t(z, x | x1), diagonal = minus the off-diagonal row sum."""
        t = float(_check_time(t))
        n = self.space.alphabet_size
        eye = np.eye(n)
        if self.kind == "mixture":
            lam = float(self.scheduler.rate_scale(t))
            # lam * (delta_{x1}(z) - delta_x(z))
            return lam * (eye[None, :, :] - eye[:, :, None])
        bdot = float(self.beta_dot(t))
        p = self.likelihood(t)  # p[z, x1]
        d = self.distance  # d[a, x1]
        gap = np.maximum(d[:, None, :] - d[None, :, :], 0.0)  # [x, z, x1] = [d(x,x1) - d(z,x1)]_+
        r = bdot * p[None, :, :] * gap
        idx = np.arange(n)
        r[idx, idx, :] = 0.0
        r[idx, idx, :] = -r.sum(axis=1)
        return r

    def cond_rate(self, t: float, zd: int, xd: int, x1d: int) -> float:
        t = float(_check_time(t))
        if self.kind == "mixture" and float(self.scheduler.kappa(t)) >= 1.0:
            raise TerminalTimeError("terminal-time rate undefined")
        if self.kind == "mixture":
            lam = float(self.scheduler.rate_scale(t))
            return lam * (float(zd == x1d) - float(zd == xd))
        return float(self.rate_tensor(t)[xd, zd, x1d])

    def rate_rows(self, t: float, xd, x1d) -> np.ndarray:
        """Outgoing rows u_t(., xd | x1d) for arrays of symbols, shape xd.shape + (|S|,)."""
        xd = np.asarray(xd)
        x1d = np.asarray(x1d)
        n = self.space.alphabet_size
        if self.kind == "mixture":
            lam = float(self.scheduler.rate_scale(t))
            eye = np.eye(n)
            return lam * (eye[x1d] - eye[xd])
        return self.rate_tensor(t)[xd, :, x1d]

    def marginal_rate_rows(self, t: float, xd, posterior_rows) -> np.ndarray:
        """sum_{x1d} u_t(., xd | x1d) p(x1d | x): the per-coordinate marginal rate rows."""
        xd = np.asarray(xd)
        post = np.asarray(posterior_rows, dtype=float)
        if self.kind == "mixture":
            lam = float(self.scheduler.rate_scale(t))
            eye = np.eye(self.space.alphabet_size)
            return lam * (post - eye[xd] * post.sum(axis=-1, keepdims=True))
        r = self.rate_tensor(t)  # [x, z, x1]
        return np.einsum("...zk,...k->...z", r[xd], post)


def mixture_path(space: StateSpace, scheduler: Scheduler, init: str = "uniform") -> ConditionalPath:
    """Mixture path with uniform noise over data symbols or an absorbing mask."""
    q0 = np.zeros(space.alphabet_size)
    if init == "uniform":
        q0[space.data_symbols] = 1.0 / space.n_data_symbols
    elif init == "masked":
        if space.mask_symbol is None:
            raise ValueError("masked init requires a space with a mask symbol")
        q0[space.mask_symbol] = 1.0
    else:
        raise ValueError(f"unknown init {init!r}; choose 'uniform' or 'masked'")
    return ConditionalPath("mixture", scheduler, space, q0, name=f"mixture-{init}")


def metric_path(space: StateSpace, scheduler: Scheduler, distance=None) -> ConditionalPath:
    q0 = np.full(space.alphabet_size, 1.0 / space.alphabet_size)
    return ConditionalPath("metric", scheduler, space, q0, name="metric", distance=distance)


PATH_NAMES = ("mixture-uniform", "mixture-masked", "metric")


def make_path(name: str, space: StateSpace, scheduler: str | Scheduler = "cosine") -> ConditionalPath:
    sched = get_scheduler(scheduler) if isinstance(scheduler, str) else scheduler
    if name == "mixture-uniform":
        return mixture_path(space, sched, "uniform")
    if name == "mixture-masked":
        return mixture_path(space, sched, "masked")
    if name == "metric":
        return metric_path(space, sched)
    raise ValueError(f"unknown path {name!r}; choose from {PATH_NAMES}")


def sample_conditional(path: ConditionalPath, t, x1: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw x_t ~ q_{t|1}(. | x1) coordinate-wise; ``t`` scalar or one time per row."""
    x1 = np.asarray(x1, dtype=np.int64)
    n, dims = x1.shape
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    if path.kind == "mixture":
        keep = rng.random((n, dims)) < path.scheduler.kappa(t)[:, None]
        cdf = np.cumsum(path.init)
        noise = np.searchsorted(cdf, rng.random((n, dims)) * cdf[-1], side="right")
        noise = np.minimum(noise, path.space.alphabet_size - 1)
        return np.where(keep, x1, noise)
    out = np.empty_like(x1)
    u = rng.random((n, dims))
    for i in range(n):
        cdf = np.cumsum(path.likelihood(t[i])[:, x1[i]], axis=0)  # [x, d]
        out[i] = np.minimum((cdf < u[i][None, :] * cdf[-1]).sum(axis=0), path.space.alphabet_size - 1)
    return out

"""Posterior models p_{1|t}(x1 | x): exact enumeration, tabular and MLP backends."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .ctmc import normalize_rows
from .nn import Optimizer, OptimizerConfig, Tabular, make_approximator
from .paths import ConditionalPath, sample_conditional
from .statespace import FactorizedPosterior, Pmf, StateSpace, enumerate_states

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
FULL_TABLE_LIMIT = 4096  # evaluate on the whole space at once below this many states


class UnreachableState(ValueError):
    """The conditioning state has zero probability under the path at time t."""


class DivergenceError(FloatingPointError):
    pass


class JointPosterior:
    """Enumeration of p_{1|t}(x1 | x) over the support of p1 for a mixture or metric path.

    ``weights(t, states)`` returns unnormalized joint weights p1(x1) q_{t|1}(x | x1)
    of shape (M, K) against the K support states. Results for a scalar ``t`` on
    the whole space are cached, since samplers query the same time repeatedly.
    """

    def __init__(self, p1: Pmf, path: ConditionalPath, cache_size: int = 4):
        if p1.space != path.space:
            raise ValueError("p1 and path live on different spaces")
        self.p1 = p1
        self.path = path
        self.space = p1.space
        on = np.flatnonzero(p1.weights > 0)
        self.support_index = on
        self.support_states = self.space.state_of(on)
        self.support_weights = p1.weights[on]
        onehots = np.eye(self.space.alphabet_size)
        # (K, D*S) one-hot of each support state's coordinates
        self._support_onehot = onehots[self.support_states].reshape(on.size, -1)
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._dense = None

    def weights(self, t, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        t = np.asarray(t, dtype=float)
        w = np.broadcast_to(self.support_weights, (states.shape[0], self.support_weights.size)).copy()
        if t.ndim == 0:
            lik = self.path.likelihood(float(t))
            for d in range(self.space.dims):
                w *= lik[states[:, d]][:, self.support_states[:, d]]
            return w
        t = np.broadcast_to(t, (states.shape[0],))
        symbols = np.arange(self.space.alphabet_size)
        for d in range(self.space.dims):
            w *= self.path.likelihood_pairs(t, states[:, d], symbols)[:, self.support_states[:, d]]
        return w

    def cached(self, t: float, states: np.ndarray, fn):
        """Apply ``fn(weights, totals)`` on the distinct states (or the whole space) only."""
        n_states = self.space.n_states
        if n_states <= FULL_TABLE_LIMIT:
            key = (fn.__name__, float(t))
            table = self._cache.get(key)
            if table is None:
                all_states = enumerate_states(self.space)
                w = self.weights(t, all_states)
                table = fn(w, w.sum(axis=1))
                self._cache[key] = table
                if len(self._cache) > self._cache_size:
                    self._cache.popitem(last=False)
            return table[self.space.index_of(states)]
        idx = self.space.index_of(states)
        uniq, inv = np.unique(idx, return_inverse=True)
        w = self.weights(t, self.space.state_of(uniq))
        return fn(w, w.sum(axis=1))[inv]

    def factored_rows(self, t, states) -> np.ndarray:
        """Unnormalized per-coordinate marginals of p1(x1) prod_d q(x^d | x1^d), shape (M, D, S).

        Contracts the dense p1 tensor against the per-coordinate likelihood
        vectors instead of materializing (M, K) joint weights; used for
        batches with one time per row.
        """
        states = np.asarray(states, dtype=np.int64)
        t = np.broadcast_to(np.asarray(t, dtype=float), (states.shape[0],))
        dims, size = self.space.dims, self.space.alphabet_size
        symbols = np.arange(size)
        a = [self.path.likelihood_pairs(t, states[:, d], symbols) for d in range(dims)]
        if self._dense is None:
            self._dense = self.p1.weights.reshape((size,) * dims)
        letters = "abcdefghijklnopqrstuvwxyz"[:dims]
        out = np.empty((states.shape[0], dims, size))
        for d in range(dims):
            others = [e for e in range(dims) if e != d]
            if not others:
                out[:, d] = self._dense[None, :] * a[d]
                continue
            spec = letters + "," + ",".join("m" + letters[e] for e in others) + "->m" + letters[d]
            out[:, d] = np.einsum(spec, self._dense, *[a[e] for e in others], optimize=True) * a[d]
        return out

    def marginals(self, w: np.ndarray) -> np.ndarray:
        """Per-coordinate sums of joint weights, shape (M, D, S)."""
        return (w @ self._support_onehot).reshape(w.shape[0], self.space.dims, self.space.alphabet_size)


class ExactPosterior:
    """Factorized posterior p^d_{1|t}(s | x) by enumeration.

    A factorized sampler can step outside the joint support (two masked
    coordinates unmasking in the same step, say), where the joint posterior is
    undefined. ``on_unreachable="factorized"`` answers such states with the
    per-coordinate posterior p1^d(s) q_{t|1}(x^d | s), or a point mass on x^d
    when that is empty too; ``"raise"`` raises UnreachableState instead.
    """

    backend = "exact"

    def __init__(self, p1: Pmf, path: ConditionalPath, on_unreachable: str = "factorized"):
        if on_unreachable not in ("factorized", "raise"):
            raise ValueError(f"unknown on_unreachable {on_unreachable!r}")
        self.joint = JointPosterior(p1, path)
        self.space = p1.space
        self.path = path
        self.on_unreachable = on_unreachable
        grid = p1.weights.reshape((self.space.alphabet_size,) * self.space.dims)
        self._coord_marginals = np.stack(
            [grid.sum(axis=tuple(e for e in range(self.space.dims) if e != d)) for d in range(self.space.dims)]
        )

    def _rows(self, w, total):
        rows = self.joint.marginals(w)
        with np.errstate(invalid="ignore", divide="ignore"):
            return rows / total[:, None, None]

    def _fallback(self, t, states):
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), (states.shape[0],))
        size = self.space.alphabet_size
        rows = np.empty((states.shape[0], self.space.dims, size))
        for i, (tt, x) in enumerate(zip(t_arr, states)):
            lik = self.path.likelihood(float(tt))
            for d in range(self.space.dims):
                row = self._coord_marginals[d] * lik[x[d]]
                if row.sum() > 0:
                    rows[i, d] = row / row.sum()
                else:
                    rows[i, d] = np.eye(size)[x[d]]
        return rows

    def __call__(self, t, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim == 0:
            rows = self.joint.cached(float(t_arr), states, self._rows)
        else:
            rows = self.joint.factored_rows(t_arr, states)
            with np.errstate(invalid="ignore", divide="ignore"):
                rows = rows / rows[:, :1].sum(axis=-1, keepdims=True)
        bad = ~np.all(np.isfinite(rows), axis=(1, 2))
        if np.any(bad):
            if self.on_unreachable == "raise":
                raise UnreachableState(f"state unreachable under the path at t={t}")
            rows = rows.copy()
            tb = t_arr if t_arr.ndim == 0 else np.broadcast_to(t_arr, bad.shape)[bad]
            rows[bad] = self._fallback(tb, states[bad])
        return rows


def exact_posterior(p1: Pmf, path: ConditionalPath, t: float, x) -> tuple[Pmf, FactorizedPosterior]:
    """Full posterior over S^D for one state, plus its per-coordinate marginals."""
    jp = JointPosterior(p1, path)
    x = np.asarray(x, dtype=np.int64).reshape(1, -1)
    w = jp.weights(t, x)[0]
    total = w.sum()
    if not total > 0:
        raise UnreachableState(f"state {x[0].tolist()} unreachable at t={t}")
    full = np.zeros(p1.space.n_states)
    full[jp.support_index] = w / total
    rows = jp.marginals((w / total)[None])[0]
    return Pmf(p1.space, full), FactorizedPosterior(rows)


class ApproxPosterior:
    """Softmax posterior on top of a Tabular or MLP approximator of shape (D, |S|).

    The mask symbol, when present, never receives posterior mass.
    """

    def __init__(self, approx, space: StateSpace):
        self.approx = approx
        self.space = space
        self.backend = approx.kind
        valid = np.zeros(space.alphabet_size, dtype=bool)
        valid[space.data_symbols] = True
        self.valid = valid

    def logits(self, t, states, params=None):
        out, cache = self.approx.forward(t, states, params)
        return np.where(self.valid, out, -np.inf), cache

    def __call__(self, t, states) -> np.ndarray:
        z, _ = self.logits(t, states)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def tabular_posterior(space: StateSpace, n_buckets: int = 32) -> ApproxPosterior:
    return ApproxPosterior(Tabular(space, n_buckets, (space.dims, space.alphabet_size)), space)


@dataclass
class CrossEntropyResult:
    loss: float
    clamped: int
    grad: np.ndarray = field(default=None, repr=False)


def cross_entropy_loss(model, t, x1, xt, with_grad: bool = False, params=None) -> CrossEntropyResult:
    """Mean over the batch of -sum_d log model(t, x_t)[d, x1^d].

    Probabilities below 1e-12 are clamped and counted.
    """
    x1 = np.asarray(x1, dtype=np.int64)
    xt = np.asarray(xt, dtype=np.int64)
    n, dims = x1.shape
    if isinstance(model, ApproxPosterior):
        z, cache = model.logits(t, xt, params)
        zmax = z.max(axis=-1, keepdims=True)
        e = np.exp(z - zmax)
        probs = e / e.sum(axis=-1, keepdims=True)
    else:
        probs = np.asarray(model(t, xt), dtype=float)
        cache = None
    picked = np.take_along_axis(probs, x1[..., None], axis=-1)[..., 0]
    clamped = int((picked < PROB_CLAMP).sum())
    if clamped:
        log.warning("cross-entropy: clamped %d probabilities below %g", clamped, PROB_CLAMP)
    loss = float(-np.log(np.maximum(picked, PROB_CLAMP)).sum() / n)
    grad = None
    if with_grad:
        if cache is None:
            raise TypeError("gradients need an approximator-backed model")
        g = probs.copy()
        np.put_along_axis(g, x1[..., None], np.take_along_axis(g, x1[..., None], axis=-1) - 1.0, axis=-1)
        g = np.where(model.valid, g, 0.0) / n
        grad = model.approx.backward(cache, g)
    return CrossEntropyResult(loss, clamped, grad)


def training_batch(p1: Pmf, path: ConditionalPath, n: int, rng: np.random.Generator, stratified: bool = True):
    """(t, x1, x_t) with t ~ U[0,1] (stratified), x1 ~ p1, x_t ~ q_{t|1}(. | x1)."""
    if stratified:
        t = (np.arange(n) + rng.random(n)) / n
        rng.shuffle(t)
    else:
        t = rng.random(n)
    x1 = p1.sample(n, rng)
    xt = sample_conditional(path, t, x1, rng)
    return t, x1, xt


def fit_posterior(
    p1: Pmf,
    path: ConditionalPath,
    backend: dict,
    optimizer: OptimizerConfig,
    holdout: int = 4096,
) -> tuple[ApproxPosterior, dict]:
    """Minimize the cross-entropy objective; report loss curve and held-out gap to the exact posterior."""
    space = p1.space
    approx = make_approximator(space, (space.dims, space.alphabet_size), backend)
    model = ApproxPosterior(approx, space)
    opt = Optimizer(approx.params, optimizer)
    rng = np.random.default_rng(optimizer.seed)
    curve = []
    for k in range(optimizer.steps):
        t, x1, xt = training_batch(p1, path, optimizer.batch_size, rng)
        res = cross_entropy_loss(model, t, x1, xt, with_grad=True)
        if not np.isfinite(res.loss) or not np.all(np.isfinite(res.grad)):
            raise DivergenceError(f"posterior training diverged at step {k}: loss={res.loss}")
        opt.step(res.grad)
        curve.append(res.loss)
    hrng = np.random.default_rng(optimizer.seed + 1)
    t, x1, xt = training_batch(p1, path, holdout, hrng)
    held = cross_entropy_loss(model, t, x1, xt).loss
    report = {"loss_curve": curve, "heldout_loss": held, "backend": approx.config()}
    if space.n_states <= FULL_TABLE_LIMIT:
        exact = cross_entropy_loss(ExactPosterior(p1, path), t, x1, xt).loss
        report["heldout_exact_loss"] = exact
        report["heldout_gap"] = held - exact
    return model, report


def bucket_posterior_oracle(p1: Pmf, path: ConditionalPath, n_buckets: int, quad: int = 64) -> np.ndarray:
    """Population minimizer of the cross-entropy for a time-bucketed table.

    For bucket b and state x this is E[delta_{x1^d} | x_t = x, t in bucket b],
    computed by Gauss-Legendre quadrature in t; shape (B, n_states, D, S).
    """
    jp = JointPosterior(p1, path)
    states = enumerate_states(p1.space)
    nodes, wq = np.polynomial.legendre.leggauss(quad)
    out = np.zeros((n_buckets, p1.space.n_states, p1.space.dims, p1.space.alphabet_size))
    for b in range(n_buckets):
        lo, hi = b / n_buckets, (b + 1) / n_buckets
        acc_rows = 0.0
        acc_tot = 0.0
        for node, weight in zip(nodes, wq):
            t = lo + (hi - lo) * (node + 1) / 2
            w = jp.weights(t, states) * weight
            acc_rows = acc_rows + jp.marginals(w)
            acc_tot = acc_tot + w.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[b] = acc_rows / acc_tot[:, None, None]
    return out


def posterior_time_independent(rows_a: np.ndarray, rows_b: np.ndarray) -> float:
    return float(np.nanmax(np.abs(normalize_rows(rows_a) - normalize_rows(rows_b))))

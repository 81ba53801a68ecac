"""Guidance schemes for discrete flows.

* posterior-based: reweight each coordinate's posterior row by h^d(s, x)
* rate-based: multiply the marginal rate by h(z) / h(x), h(x) = E[r(x1) | x_t = x]
* predictor: the same ratio built from a classifier, raised to a strength gamma
* first-order: exp(<z - x, grad log h(x)>) on the integer symbol embedding

Guidance models expose ``matrix(t, x)`` (posterior-based, shape (N, D, S)),
``scalar(t, x)`` (rate-based, shape (N,)) and ``grad_log(t, x)`` (shape (N, D)).
Step rules count their guidance-model invocations per step and check the count
against :func:`call_count`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .ctmc import (
    PosteriorStepRule,
    SamplerConfig,
    categorical_rows,
    conditional_jump,
    dense_from_rows,
    jump_from_rates,
    jump_indexed,
    normalize_rows,
    run_chains,
    unique_states,
)
from .paths import ConditionalPath
from .posterior import JointPosterior
from .statespace import DensityRatio, FactorizedPosterior, Pmf, SampleBatch, StateSpace, enumerate_states

VARIANTS = ("posterior", "rate", "predictor", "first_order", "none")


class CallCountMismatch(AssertionError):
    """A sampler step invoked the guidance model a different number of times than expected."""


@dataclass(frozen=True)
class GuidanceScheme:
    variant: str
    gamma: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown guidance variant {self.variant!r}; choose from {VARIANTS}")
        if not self.gamma >= 0:
            raise ValueError("guidance strength gamma must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "GuidanceScheme":
        """'posterior', 'rate', 'predictor:3', 'first-order' or 'none'."""
        name, _, arg = text.strip().partition(":")
        name = name.replace("-", "_")
        if name == "predictor":
            return cls("predictor", float(arg) if arg else 1.0)
        if arg:
            raise ValueError(f"only the predictor variant takes a strength, got {text!r}")
        return cls(name)

    def __str__(self) -> str:
        if self.variant == "predictor":
            return f"predictor:{self.gamma:g}"
        return self.variant.replace("_", "-")


def _init_name(init) -> str:
    return init if isinstance(init, str) else "custom"


def call_count(scheme: GuidanceScheme, space: StateSpace, init) -> int:
    """Guidance-model evaluations per sampling step."""
    v = scheme.variant
    if v == "none":
        return 0
    if v == "posterior":
        return 1
    if v == "first_order":
        return 2
    if _init_name(init) == "masked":
        return space.dims + 1
    return space.dims * (space.alphabet_size - 1) + 1


# -- guidance models ------------------------------------------------------------

class _Counted:
    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0

    def _tick(self):
        with self._lock:
            self.calls += 1


def _fd_grad_log(scalar, t, states: np.ndarray, space: StateSpace) -> np.ndarray:
    """Central differences of log h over the integer embedding, unit step.

    At the alphabet edges, or where a neighbour is unreachable (h is NaN), a
    one-sided difference is used; with no usable neighbour the slope is 0.
    """
    states = np.asarray(states, dtype=np.int64)
    n, dims = states.shape
    top = space.alphabet_size - 1
    batch = [states]
    for d in range(dims):
        up = states.copy()
        up[:, d] = np.minimum(up[:, d] + 1, top)
        dn = states.copy()
        dn[:, d] = np.maximum(dn[:, d] - 1, 0)
        batch += [up, dn]
    tt = np.asarray(t, dtype=float)
    if tt.ndim:
        tt = np.tile(np.broadcast_to(tt, (n,)), 2 * dims + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.log(scalar(tt, np.concatenate(batch))).reshape(2 * dims + 1, n)
    l0 = logs[0]
    g = np.zeros((n, dims))
    for d in range(dims):
        lu, ld = logs[1 + 2 * d], logs[2 + 2 * d]
        su = np.minimum(states[:, d] + 1, top) - states[:, d]
        sd = states[:, d] - np.maximum(states[:, d] - 1, 0)
        ok_u = np.isfinite(lu) & (su > 0)
        ok_d = np.isfinite(ld) & (sd > 0)
        with np.errstate(invalid="ignore"):
            central = (lu - ld) / (su + sd)
            fwd = (lu - l0) / np.maximum(su, 1)
            bwd = (l0 - ld) / np.maximum(sd, 1)
        g[:, d] = np.where(ok_u & ok_d, central, np.where(ok_u, fwd, np.where(ok_d, bwd, 0.0)))
    g[~np.isfinite(g)] = 0.0
    return g


class ExactGuidance(_Counted):
    """Guidance by enumeration over the support of p1.

    ``matrix`` returns h^d(s, x) = E[r(x1) | x1^d = s, x_t = x], set to 1 where
    p^d(s | x) = 0. ``scalar`` returns h(x) = E[r(x1) | x_t = x], NaN for
    states unreachable at time t.
    """

    backend = "exact"

    def __init__(self, p1: Pmf, ratio: DensityRatio, path: ConditionalPath):
        super().__init__()
        self.joint = JointPosterior(p1, path)
        self.space = p1.space
        self.path = path
        self.r_support = np.asarray(ratio(self.joint.support_states), dtype=float)

    def _matrix(self, w, total):
        den = self.joint.marginals(w)
        num = self.joint.marginals(w * self.r_support)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)

    def _scalar(self, w, total):
        with np.errstate(invalid="ignore", divide="ignore"):
            return (w @ self.r_support) / total

    def _eval(self, fn, t, states):
        states = np.asarray(states, dtype=np.int64)
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim == 0:
            return self.joint.cached(float(t_arr), states, fn)
        w = self.joint.weights(t_arr, states)
        return fn(w, w.sum(axis=1))

    def matrix(self, t, states) -> np.ndarray:
        self._tick()
        return self._eval(self._matrix, t, states)

    def scalar(self, t, states) -> np.ndarray:
        self._tick()
        return self._eval(self._scalar, t, states)

    def grad_log(self, t, states) -> np.ndarray:
        self._tick()
        return _fd_grad_log(lambda tt, s: self._eval(self._scalar, tt, s), t, states, self.space)


class ApproxGuidance(_Counted):
    """Learned guidance h = exp(phi) on top of a Tabular or MLP approximator.

    ``kind="posterior"`` uses output shape (D, |S|); ``kind="rate"`` a scalar.
    """

    def __init__(self, approx, space: StateSpace, kind: str):
        super().__init__()
        if kind not in ("posterior", "rate"):
            raise ValueError(f"unknown guidance kind {kind!r}")
        self.approx = approx
        self.space = space
        self.kind = kind
        self.backend = approx.kind

    @property
    def params(self) -> np.ndarray:
        return self.approx.params

    def log_values(self, t, states, params=None):
        phi, cache = self.approx.forward(t, states, params)
        if self.kind == "rate":
            phi = phi.reshape(phi.shape[0])
        return phi, cache

    def matrix(self, t, states) -> np.ndarray:
        if self.kind != "posterior":
            raise TypeError("a scalar guidance model has no per-coordinate matrix")
        self._tick()
        return np.exp(self.log_values(t, states)[0])

    def _scalar(self, t, states):
        return np.exp(self.log_values(t, states)[0])

    def scalar(self, t, states) -> np.ndarray:
        if self.kind != "rate":
            raise TypeError("a posterior-based guidance model has no scalar h(x) without the posterior")
        self._tick()
        return self._scalar(t, states)

    def grad_log(self, t, states) -> np.ndarray:
        """d log h / dx^d; backprop for a scalar-encoded MLP, finite differences otherwise."""
        if self.kind != "rate":
            raise TypeError("first-order guidance needs a scalar guidance model")
        self._tick()
        a = self.approx
        if a.kind == "mlp" and a.encoding == "scalar":
            out, cache = a.forward(t, states)
            gin = a.input_grad(cache, np.ones_like(out))
            return gin[:, 1:] / (self.space.alphabet_size - 1.0)
        return _fd_grad_log(self._scalar, t, states, self.space)


def exact_guidance_h(p1: Pmf, r: DensityRatio, path: ConditionalPath, t, x) -> np.ndarray:
    """h^d(s, x) by enumeration; a single state gives (D, |S|), a batch (N, D, |S|)."""
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    g = ExactGuidance(p1, r, path)
    out = g.matrix(t, x.reshape(-1, p1.space.dims))
    return out[0] if single else out


def exact_scalar_h(p1: Pmf, r: DensityRatio, path: ConditionalPath, t, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    out = ExactGuidance(p1, r, path).scalar(t, x.reshape(-1, p1.space.dims))
    return out[0] if x.ndim == 1 else out


# -- reweighting factors ----------------------------------------------------------

def guided_posterior(p_post, h):
    """Rows proportional to h * p_post. Entries with p_post = 0 ignore h."""
    as_type = isinstance(p_post, FactorizedPosterior)
    p = np.asarray(p_post.matrix if as_type else p_post, dtype=float)
    h = np.asarray(h, dtype=float)
    if np.any(h[p > 0] <= 0) or not np.all(np.isfinite(h[p > 0])):
        raise ValueError("guidance must be finite and positive where the posterior has mass")
    prod = np.where(p > 0, h, 1.0) * p
    total = prod.sum(axis=-1, keepdims=True)
    if np.any(~(total > 0)):
        raise ValueError("guided posterior row has zero mass")
    out = prod / total
    return FactorizedPosterior(out) if as_type else out


def _one_coordinate_change(x, z):
    diff = np.asarray(x) != np.asarray(z)
    if diff.sum(axis=-1).max(initial=0) > 1:
        raise ValueError("z must differ from x in at most one coordinate")


def rate_based_factor(h_scalar, t, x, z) -> np.ndarray:
    """h(z) / h(x) for neighbouring states (1 where z = x)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    z = np.atleast_2d(np.asarray(z, dtype=np.int64))
    _one_coordinate_change(x, z)
    hx = h_scalar(t, x)
    if np.any(~(hx > 0)):
        raise ZeroDivisionError("rate-based factor: h(x) is zero or undefined")
    same = np.all(x == z, axis=-1)
    hz = h_scalar(t, z)
    return np.where(same, 1.0, hz / hx)


def predictor_strength_factor(classifier_h, gamma: float, t, x, z) -> np.ndarray:
    """[E p(y|x1) given z / E p(y|x1) given x]^gamma; ``classifier_h`` is a scalar guidance model."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return rate_based_factor(classifier_h, t, x, z) ** gamma


def first_order_factor(grad_log, z, x) -> np.ndarray:
    """exp(<z - x, grad log h(x)>)."""
    diff = np.asarray(z, dtype=float) - np.asarray(x, dtype=float)
    return np.exp((diff * np.asarray(grad_log, dtype=float)).sum(axis=-1))


# -- guided marginal rates ----------------------------------------------------------

def guided_rows_posterior(path: ConditionalPath, t: float, states, p_rows, h_rows) -> np.ndarray:
    """Per-coordinate marginal rate rows under the reweighted posterior."""
    return path.marginal_rate_rows(t, states, guided_posterior(p_rows, h_rows))


def guided_rows_affine(path: ConditionalPath, t: float, states, p_rows, h_rows) -> np.ndarray:
    """Mixture path only: ratio * u^p + lam * (ratio - 1) on the diagonal, ratio = h^d(s, x) / h(x)."""
    if path.kind != "mixture":
        raise ValueError("the affine form holds for mixture paths")
    states = np.asarray(states, dtype=np.int64)
    p = np.asarray(p_rows, dtype=float)
    h = np.where(p > 0, np.asarray(h_rows, dtype=float), 1.0)
    hx = (h * p).sum(axis=-1, keepdims=True)
    ratio = h / hx
    base = path.marginal_rate_rows(t, states, p)
    lam = float(path.scheduler.rate_scale(t))
    eye = np.eye(path.space.alphabet_size)[states]
    return ratio * base + lam * (ratio - 1.0) * eye


def guided_rows_rate(path: ConditionalPath, t: float, states, p_rows, h_scalar) -> np.ndarray:
    """Marginal rate rows with off-diagonals scaled by h(x^{d<-s}) / h(x); diagonal re-balanced."""
    states = np.asarray(states, dtype=np.int64)
    n, dims = states.shape
    size = path.space.alphabet_size
    rows = path.marginal_rate_rows(t, states, np.asarray(p_rows, dtype=float)).copy()
    hx = h_scalar(t, states)
    for d in range(dims):
        for s in range(size):
            z = states.copy()
            z[:, d] = s
            with np.errstate(invalid="ignore", divide="ignore"):
                ratio = h_scalar(t, z) / hx
            off = states[:, d] != s
            rows[off, d, s] = np.where(rows[off, d, s] > 0, rows[off, d, s] * ratio[off], 0.0)
    at = (np.arange(n)[:, None], np.arange(dims)[None, :], states)
    rows[at] = 0.0
    rows[at] = -rows.sum(axis=-1)
    return rows


def guided_rate_matrix(space: StateSpace, rows: np.ndarray) -> np.ndarray:
    """Dense column generator from rows computed for every state in lexicographic order."""
    return dense_from_rows(space, rows)


# -- step rules ---------------------------------------------------------------------

class _Meter:
    __slots__ = ("n",)

    def __init__(self):
        self.n = 0

    def __call__(self, fn, *args):
        self.n += 1
        return fn(*args)


class _GuidedRule:
    def __init__(self, posterior, path: ConditionalPath, guidance, expected: int):
        self.posterior = posterior
        self.path = path
        self.guidance = guidance
        self.expected = expected
        self.step_calls: list[int] = []

    def _check(self, meter: _Meter):
        self.step_calls.append(meter.n)
        if meter.n != self.expected:
            raise CallCountMismatch(f"step made {meter.n} guidance calls, expected {self.expected}")

    def _base_rows(self, t, states):
        return normalize_rows(np.asarray(self.posterior(t, states), dtype=float))

    def final(self, t, states, u):
        uniq, inv = unique_states(self.path.space, states)
        return categorical_rows(self._base_rows(t, uniq), inv, u[..., 0])


class PosteriorGuidedRule(_GuidedRule):
    """Draw x1^d from h * p rows (one guidance call), then jump under the source conditional rate."""

    def __init__(self, posterior, path, guidance):
        super().__init__(posterior, path, guidance, 1)

    def _draw(self, t, states, u, meter):
        uniq, inv = unique_states(self.path.space, states)
        p = np.asarray(self.posterior(t, uniq), dtype=float)
        rows = guided_posterior(p, meter(self.guidance.matrix, t, uniq))
        return categorical_rows(rows, inv, u[..., 0])

    def step(self, t, h, states, u):
        meter = _Meter()
        x1 = self._draw(t, states, u, meter)
        self._check(meter)
        return conditional_jump(self.path, t, h, states, x1, u[..., 1], u[..., 2])

    def final(self, t, states, u):
        return self._draw(t, states, u, _Meter())


class RateGuidedRule(_GuidedRule):
    """Rate-based (exponent 1) or predictor (exponent gamma) guidance.

    ``mode="sampled"``: draw x1 from the source posterior, scale the single
    admissible mixture-path jump x^d -> x1^d by the ratio at x^{d<-x1^d}
    (D + 1 calls). ``mode="neighbors"``: query the ratio at every neighbour
    (D(|S|-1) + 1 calls); on mixture paths the jump again goes through a
    posterior draw of x1, elsewhere the full marginal rate is rescaled.
    The final draw uses the source posterior.
    """

    def __init__(self, posterior, path, guidance, exponent: float = 1.0, mode: str = "sampled"):
        space = path.space
        if mode == "sampled":
            if path.kind != "mixture":
                raise ValueError("sampled-destination mode needs a mixture path")
            expected = space.dims + 1
        elif mode == "neighbors":
            expected = space.dims * (space.alphabet_size - 1) + 1
        else:
            raise ValueError(f"unknown mode {mode!r}")
        super().__init__(posterior, path, guidance, expected)
        self.exponent = float(exponent)
        self.mode = mode

    def _ratio(self, hz, hx):
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            return (hz / hx) ** self.exponent

    def step(self, t, h, states, u):
        meter = _Meter()
        uniq, inv = unique_states(self.path.space, states)
        rows = self._base_rows(t, uniq)
        hx = meter(self.guidance.scalar, t, uniq)
        dims = states.shape[1]
        if self.mode == "sampled":
            x1 = categorical_rows(rows, inv, u[..., 0])
            scale = np.ones(states.shape)
            hxi = hx[inv]
            for d in range(dims):
                z = states.copy()
                z[:, d] = x1[:, d]
                ratio = self._ratio(meter(self.guidance.scalar, t, z), hxi)
                move = x1[:, d] != states[:, d]
                scale[move, d] = ratio[move]
            self._check(meter)
            return conditional_jump(self.path, t, h, states, x1, u[..., 1], u[..., 2], scale=scale)
        size = self.path.space.alphabet_size
        ar = np.arange(uniq.shape[0])
        ratios = np.ones(uniq.shape + (size,))
        for d in range(dims):
            for off in range(1, size):
                s = (uniq[:, d] + off) % size
                z = uniq.copy()
                z[:, d] = s
                ratios[ar, d, s] = self._ratio(meter(self.guidance.scalar, t, z), hx)
        self._check(meter)
        if self.path.kind == "mixture":
            # every marginal jump goes through a posterior draw of x1^d, so
            # scaling the rate into x1^d by its ratio gives lam p^d(s|x) ratio(s)
            x1 = categorical_rows(rows, inv, u[..., 0])
            scale = np.take_along_axis(ratios[inv], x1[..., None], axis=-1)[..., 0]
            scale = np.where(x1 != states, scale, 1.0)
            return conditional_jump(self.path, t, h, states, x1, u[..., 1], u[..., 2], scale=scale)
        rates = self.path.marginal_rate_rows(t, uniq, rows)
        rates = np.where(rates > 0, rates * ratios, 0.0)
        at = (ar[:, None], np.arange(dims)[None, :], uniq)
        rates[at] = 0.0
        rates[at] = -rates.sum(axis=-1)
        return jump_indexed(states, uniq, inv, rates, h, u[..., 1], u[..., 2])


class FirstOrderRule(_GuidedRule):
    """Conditional rates scaled by exp(<z - x, grad log h(x)>): a forward and a gradient call."""

    def __init__(self, posterior, path, guidance):
        super().__init__(posterior, path, guidance, 2)

    def step(self, t, h, states, u):
        meter = _Meter()
        uniq, inv = unique_states(self.path.space, states)
        x1 = categorical_rows(self._base_rows(t, uniq), inv, u[..., 0])
        meter(self.guidance.scalar, t, uniq)
        g = meter(self.guidance.grad_log, t, uniq)[inv]
        self._check(meter)
        if self.path.kind == "mixture":
            with np.errstate(over="ignore"):
                scale = np.exp((x1 - states) * g)
            return conditional_jump(self.path, t, h, states, x1, u[..., 1], u[..., 2], scale=scale)
        rates = self.path.rate_rows(t, states, x1)
        s = np.arange(self.path.space.alphabet_size)
        with np.errstate(over="ignore"):
            factor = np.exp((s[None, None, :] - states[..., None]) * g[..., None])
        return jump_from_rates(states, rates * factor, h, u[..., 1], u[..., 2])


def make_rule(scheme: GuidanceScheme, posterior, path: ConditionalPath, guidance, init):
    v = scheme.variant
    if v == "none":
        return PosteriorStepRule(posterior, path)
    if guidance is None:
        raise ValueError(f"guidance variant {v!r} needs a guidance model")
    if v == "posterior":
        return PosteriorGuidedRule(posterior, path, guidance)
    if v == "first_order":
        return FirstOrderRule(posterior, path, guidance)
    mode = "sampled" if _init_name(init) == "masked" else "neighbors"
    exponent = scheme.gamma if v == "predictor" else 1.0
    return RateGuidedRule(posterior, path, guidance, exponent=exponent, mode=mode)


def sample_guided(
    posterior,
    path: ConditionalPath,
    scheme: GuidanceScheme,
    guidance,
    config: SamplerConfig,
) -> tuple[SampleBatch, dict]:
    """Run a guided sampler; returns samples and a report with per-step call counts."""
    rule = make_rule(scheme, posterior, path, guidance, config.initial)
    before = getattr(guidance, "calls", None)
    x, trace = run_chains(path.space, rule, config)
    expected = call_count(scheme, path.space, config.initial)
    steps = getattr(rule, "step_calls", [])
    if any(c != expected for c in steps):
        raise CallCountMismatch(f"observed per-step calls {sorted(set(steps))}, expected {expected}")
    if before is not None:
        # the model's own counter catches calls the step rule does not see
        final = 1 if scheme.variant == "posterior" and config.final_posterior_draw else 0
        want = trace["chunks"] * (expected * trace["loop_steps"] + final)
        if guidance.calls - before != want:
            raise CallCountMismatch(f"guidance model counted {guidance.calls - before} calls, expected {want}")
    report = {
        "scheme": str(scheme),
        "init": _init_name(config.initial),
        "calls_per_step": expected,
        "observed_calls_per_step": sorted(set(steps)) if steps else [0],
        "loop_steps": trace["loop_steps"],
        "final_time": trace["final_time"],
    }
    return SampleBatch(x, 1.0, path.space), report


def exact_guided_target(p1: Pmf, r: DensityRatio) -> Pmf:
    """q1 proportional to r * p1 by enumeration."""
    return Pmf.from_unnormalized(p1.space, p1.weights * r.table(p1.space))


def all_rows(space: StateSpace, fn, t) -> np.ndarray:
    """Evaluate a row function on every state of the space."""
    return fn(t, enumerate_states(space))

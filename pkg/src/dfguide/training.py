"""Training objectives for guidance and density-ratio models, with analytic gradients.

All learned quantities are log-parameterized: the approximator outputs phi and
the model value is exp(phi), so positivity holds by construction and gradients
are taken with respect to phi before backprop into the flat parameter vector.
Reported Bregman losses drop the parameter-independent constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .guidance import ApproxGuidance, ExactGuidance
from .nn import Optimizer, OptimizerConfig, make_approximator
from .paths import ConditionalPath, sample_conditional
from .posterior import DivergenceError, ExactPosterior, FULL_TABLE_LIMIT, training_batch
from .statespace import DensityRatio, Pmf, StateSpace, enumerate_states

log = logging.getLogger(__name__)

GRAD_CHECK_COORDS = 64
GRAD_CHECK_STEP = 1e-5


class MissingTargetData(ValueError):
    """Regularized training (lambda > 0) needs samples from the target distribution."""


@dataclass
class LossResult:
    loss: float
    grad: Optional[np.ndarray] = field(default=None, repr=False)


def _finite(loss: float, what: str) -> float:
    if not np.isfinite(loss):
        raise DivergenceError(f"{what}: non-finite loss {loss}")
    return float(loss)


def bregman_loss_posterior(model, t, x1, xt, r_values, with_grad: bool = False, params=None) -> LossResult:
    """mean_n sum_d [h^d(x1^d, x_t) - r(x1) log h^d(x1^d, x_t)]."""
    x1 = np.asarray(x1, dtype=np.int64)
    r = np.asarray(r_values, dtype=float)
    if x1.shape[0] == 0:
        raise ValueError("empty batch")
    n = x1.shape[0]
    if isinstance(model, ApproxGuidance):
        phi_all, cache = model.log_values(t, xt, params)
    else:
        phi_all, cache = np.log(model.matrix(t, xt)), None
    phi = np.take_along_axis(phi_all, x1[..., None], axis=-1)[..., 0]  # (N, D)
    e = np.exp(phi)
    loss = _finite(float((e - r[:, None] * phi).sum() / n), "bregman")
    grad = None
    if with_grad:
        g = np.zeros_like(phi_all)
        np.put_along_axis(g, x1[..., None], ((e - r[:, None]) / n)[..., None], axis=-1)
        grad = model.approx.backward(cache, g)
    return LossResult(loss, grad)


def bregman_loss_rate(model, t, x1, xt, r_values, with_grad: bool = False, params=None) -> LossResult:
    """mean_n [h(x_t) - r(x1) log h(x_t)] for a scalar guidance model."""
    r = np.asarray(r_values, dtype=float)
    if r.size == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise ValueError("ratio values must be finite and non-negative")
    if not np.any(r > 0):
        raise ValueError("batch has no mass on the ratio support")
    n = r.shape[0]
    if isinstance(model, ApproxGuidance):
        phi, cache = model.log_values(t, xt, params)
    else:
        phi, cache = np.log(model.scalar(t, xt)), None
    e = np.exp(phi)
    loss = _finite(float((e - r * phi).sum() / n), "bregman-rate")
    grad = None
    if with_grad:
        grad = model.approx.backward(cache, ((e - r) / n).reshape(n, 1))
    return LossResult(loss, grad)


def regularization_loss(model, p_rows, t, x1, xt, with_grad: bool = False, params=None) -> LossResult:
    """mean_n sum_d -log[h^d(x1^d, x_t) / sum_s h^d(s, x_t) p^d(s | x_t)].

    ``p_rows`` is the frozen source posterior at (t, x_t); no gradient flows through it.
    """
    x1 = np.asarray(x1, dtype=np.int64)
    p = np.asarray(p_rows, dtype=float)
    n = x1.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if isinstance(model, ApproxGuidance):
        phi, cache = model.log_values(t, xt, params)
    else:
        phi, cache = np.log(model.matrix(t, xt)), None
    # log sum_s exp(phi_s) p_s, stabilized; where p = 0 the entry drops out
    with np.errstate(divide="ignore"):
        a = phi + np.log(p)
    amax = a.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(amax)):
        raise ZeroDivisionError("regularization loss: zero normalizer")
    ea = np.exp(a - amax)
    z = ea.sum(axis=-1, keepdims=True)
    lse = (np.log(z) + amax)[..., 0]
    picked = np.take_along_axis(phi, x1[..., None], axis=-1)[..., 0]
    loss = _finite(float((lse - picked).sum() / n), "regularization")
    grad = None
    if with_grad:
        g = ea / z
        np.put_along_axis(g, x1[..., None], np.take_along_axis(g, x1[..., None], axis=-1) - 1.0, axis=-1)
        grad = model.approx.backward(cache, g / n)
    return LossResult(loss, grad)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RatioModel:
    """Time-free log-ratio model r = exp(phi(x1)) for the logistic objective."""

    def __init__(self, approx, space: StateSpace):
        self.approx = approx
        self.space = space
        self.backend = approx.kind

    @property
    def params(self):
        return self.approx.params

    def log_values(self, states, params=None):
        phi, cache = self.approx.forward(0.0, states, params)
        return phi.reshape(phi.shape[0]), cache

    def __call__(self, states) -> np.ndarray:
        return np.exp(self.log_values(states)[0])

    def as_density_ratio(self) -> DensityRatio:
        return DensityRatio(lambda s: self(np.asarray(s).reshape(-1, self.space.dims)).reshape(np.asarray(s).shape[:-1]))


def density_ratio_loss(r_model: RatioModel, x_p, x_q, with_grad: bool = False, params=None) -> LossResult:
    """E_p log(1 + r) + E_q log(1 + 1/r); minimized at r = q1 / p1."""
    x_p = np.asarray(x_p, dtype=np.int64)
    x_q = np.asarray(x_q, dtype=np.int64)
    if x_p.shape[0] == 0 or x_q.shape[0] == 0:
        raise ValueError("both batches must be non-empty")
    both = np.concatenate([x_p, x_q])
    phi, cache = r_model.log_values(both, params)
    fp, fq = phi[: len(x_p)], phi[len(x_p):]
    loss = _finite(float(_softplus(fp).mean() + _softplus(-fq).mean()), "density-ratio")
    grad = None
    if with_grad:
        g = np.concatenate([_sigmoid(fp) / len(x_p), -_sigmoid(-fq) / len(x_q)])
        grad = r_model.approx.backward(cache, g.reshape(-1, 1))
    return LossResult(loss, grad)


# -- gradient verification ------------------------------------------------------------

def grad_check(
    loss_fn: Callable[[np.ndarray], LossResult],
    params: np.ndarray,
    n_coords: int = GRAD_CHECK_COORDS,
    step: float = GRAD_CHECK_STEP,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return a LossResult with ``grad``. Half of the
    probed coordinates are drawn where the analytic gradient is non-zero so
    sparse (tabular) gradients are actually exercised.
    """
    params = np.array(params, dtype=float)
    base = loss_fn(params)
    if not np.isfinite(base.loss):
        raise ValueError("loss is not finite at the given parameters")
    g = base.grad
    rng = np.random.default_rng(seed)
    nz = np.flatnonzero(g)
    k_nz = min(len(nz), n_coords // 2)
    coords = np.concatenate([
        rng.choice(nz, k_nz, replace=False) if k_nz else np.empty(0, dtype=np.int64),
        rng.choice(params.size, min(params.size, n_coords - k_nz), replace=False),
    ])
    worst = 0.0
    for i in coords:
        up = params.copy()
        up[i] += step
        dn = params.copy()
        dn[i] -= step
        num = (loss_fn(up).loss - loss_fn(dn).loss) / (2 * step)
        denom = max(abs(num), abs(g[i]), 1e-8)
        worst = max(worst, abs(num - g[i]) / denom)
    return float(worst)


# -- fitting ------------------------------------------------------------------------------

def _as_sampler(src):
    if src is None:
        return None
    if isinstance(src, Pmf):
        return lambda n, rng: src.sample(n, rng)
    return src


def guidance_gap(model, p1: Pmf, ratio: DensityRatio, path: ConditionalPath, times) -> float:
    """Max-abs gap to exact h over cells with positive source posterior mass at reachable states."""
    exact = ExactGuidance(p1, ratio, path)
    post = ExactPosterior(p1, path)
    states = enumerate_states(p1.space)
    worst = 0.0
    for t in times:
        w = exact.joint.weights(t, states)
        ok = w.sum(axis=1) > 0
        s = states[ok]
        p = post(t, s)
        if getattr(model, "kind", "posterior") == "rate":
            diff = np.abs(model.scalar(t, s) - exact.scalar(t, s))
        else:
            diff = np.abs(model.matrix(t, s) - exact.matrix(t, s))[p > 0]
        worst = max(worst, float(diff.max(initial=0.0)))
    return worst


def fit_guidance(
    p1: Pmf,
    path: ConditionalPath,
    ratio: DensityRatio,
    backend: dict,
    optimizer: OptimizerConfig,
    kind: str = "posterior",
    posterior=None,
    target=None,
    gap_times=(0.1, 0.3, 0.5, 0.7, 0.9),
) -> tuple[ApproxGuidance, dict]:
    """Minimize L_p + lam * L_q for a guidance model.

    ``target`` (a Pmf or ``sampler(n, rng)``) is required when lam > 0, as is the
    frozen source ``posterior`` used by the regularization term.
    """
    lam = optimizer.lam
    target_sampler = _as_sampler(target)
    if lam > 0 and target_sampler is None:
        raise MissingTargetData("lambda > 0 requires a target sampler")
    if lam > 0 and kind != "posterior":
        raise ValueError("the regularization term applies to posterior-based guidance")
    if lam > 0 and posterior is None:
        posterior = ExactPosterior(p1, path)
    space = p1.space
    out_shape = (space.dims, space.alphabet_size) if kind == "posterior" else (1,)
    model = ApproxGuidance(make_approximator(space, out_shape, backend), space, kind)
    opt = Optimizer(model.params, optimizer)
    rng = np.random.default_rng(optimizer.seed)
    src_loss = bregman_loss_posterior if kind == "posterior" else bregman_loss_rate
    curves = {"bregman": [], "regularization": []}

    def batch_p():
        t, x1, xt = training_batch(p1, path, optimizer.batch_size, rng)
        return t, x1, xt, ratio(x1)

    def batch_q():
        n = optimizer.batch_size
        t = (np.arange(n) + rng.random(n)) / n
        rng.shuffle(t)
        x1 = target_sampler(n, rng)
        xt = sample_conditional(path, t, x1, rng)
        return t, x1, xt, np.asarray(posterior(t, xt), dtype=float)

    # gradient check on a small batch at the initial parameters
    t0, x10, xt0, r0 = [a[:64] for a in batch_p()]
    checks = {src_loss.__name__: grad_check(lambda th: src_loss(model, t0, x10, xt0, r0, True, th), model.params)}
    if lam > 0:
        tq, x1q, xtq, pq = [a[:64] for a in batch_q()]
        checks["regularization_loss"] = grad_check(
            lambda th: regularization_loss(model, pq, tq, x1q, xtq, True, th), model.params
        )

    for k in range(optimizer.steps):
        t, x1, xt, r = batch_p()
        res = src_loss(model, t, x1, xt, r, with_grad=True)
        grad = res.grad
        curves["bregman"].append(res.loss)
        if lam > 0:
            tq, x1q, xtq, pq = batch_q()
            reg = regularization_loss(model, pq, tq, x1q, xtq, with_grad=True)
            grad = grad + lam * reg.grad
            curves["regularization"].append(reg.loss)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"guidance training diverged at step {k}")
        opt.step(grad)

    report = {
        "kind": kind,
        "lam": lam,
        "backend": model.approx.config(),
        "loss_curves": curves,
        "grad_check": checks,
    }
    if space.n_states <= FULL_TABLE_LIMIT and gap_times:
        report["gap_to_exact"] = guidance_gap(model, p1, ratio, path, gap_times)
    return model, report


def fit_ratio(p1, q1, space: StateSpace, backend: dict, optimizer: OptimizerConfig) -> tuple[RatioModel, dict]:
    """Logistic density-ratio estimation from samples of p1 and q1 (Pmfs or samplers)."""
    sp, sq = _as_sampler(p1), _as_sampler(q1)
    model = RatioModel(make_approximator(space, (1,), {**backend, "n_buckets": 1}), space)
    opt = Optimizer(model.params, optimizer)
    rng = np.random.default_rng(optimizer.seed)
    curve = []
    xp0, xq0 = sp(64, rng), sq(64, rng)
    check = grad_check(lambda th: density_ratio_loss(model, xp0, xq0, True, th), model.params)
    for k in range(optimizer.steps):
        res = density_ratio_loss(model, sp(optimizer.batch_size, rng), sq(optimizer.batch_size, rng), with_grad=True)
        if not np.all(np.isfinite(res.grad)):
            raise DivergenceError(f"ratio training diverged at step {k}")
        opt.step(res.grad)
        curve.append(res.loss)
    return model, {"loss_curve": curve, "grad_check": {"density_ratio_loss": check}, "backend": model.approx.config()}

"""CTMC machinery: dense generators, Kolmogorov forward integration and jump samplers.

Dense generators are column generators: ``U[z, x]`` is the rate x -> z, so the
forward equation reads ``dq/dt = U @ q`` and every column sums to zero.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .paths import ConditionalPath, TIME_EPS
from .statespace import Pmf, SampleBatch, StateSpace, enumerate_states

UNIFORMS_PER_COORD = 4  # posterior draw, jump test, destination, spare (keeps Philox blocks aligned)
_LANE_LOOP = 0
_LANE_INIT = 1


class IntegrationError(RuntimeError):
    pass


class StepTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class RateMatrixDense:
    space: StateSpace
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.space.check_enumerable()
        u = np.asarray(self.entries, dtype=float)
        n = self.space.n_states
        if u.shape != (n, n):
            raise ValueError(f"rate matrix must be {n}x{n}")
        off = u - np.diag(np.diag(u))
        if off.min(initial=0.0) < -1e-12:
            raise ValueError("negative off-diagonal rate")
        col = np.abs(u.sum(axis=0))
        if col.max(initial=0.0) > 1e-9 * max(1.0, np.abs(u).max(initial=0.0)):
            raise ValueError(f"generator columns do not sum to zero (max {col.max():.3e})")
        u = u.copy()
        u.setflags(write=False)
        object.__setattr__(self, "entries", u)


def neighbor_index(space: StateSpace, states: np.ndarray, d: int, symbols) -> np.ndarray:
    """Flat index of ``states`` with coordinate ``d`` replaced by ``symbols``."""
    states = np.asarray(states, dtype=np.int64)
    stride = space.alphabet_size ** (space.dims - 1 - d)
    base = space.index_of(states)
    return base + (np.asarray(symbols) - states[..., d]) * stride


def dense_from_rows(space: StateSpace, rows: np.ndarray) -> np.ndarray:
    """Assemble U[z, x] from per-coordinate outgoing rows ``rows[x, d, s]``.

    Off-diagonal entries come from single-coordinate changes; the diagonal is
    set so that every column sums to zero.
    """
    states = enumerate_states(space)
    n, dims, size = rows.shape
    u = np.zeros((n, n))
    xi = np.arange(n)
    stride = size ** (dims - 1 - np.arange(dims))
    sym = np.arange(size)
    # z[x, d, s]: x with coordinate d set to s; off-diagonal (z, x) pairs are distinct
    z = xi[:, None, None] + (sym[None, None, :] - states[:, :, None]) * stride[None, :, None]
    off = states[:, :, None] != sym[None, None, :]
    u[z[off], np.broadcast_to(xi[:, None, None], z.shape)[off]] = rows[off]
    u[xi, xi] = -u.sum(axis=0)
    return u


def marginal_rate_matrix(space: StateSpace, path: ConditionalPath, t: float, posterior_rows: np.ndarray) -> np.ndarray:
    """Dense U_t(z, x) = E_{p_{1|t}(x1|x)} u_t(z, x | x1) from factorized posteriors.

    ``posterior_rows[x, d, s]`` holds p^d_{1|t}(s | x) for every state ``x``.
    """
    states = enumerate_states(space)
    rows = path.marginal_rate_rows(t, states, posterior_rows)
    return dense_from_rows(space, rows)


@dataclass
class Trajectory:
    times: np.ndarray
    pmfs: np.ndarray  # (len(times), n_states)
    max_drift: float

    def at(self, i: int, space: StateSpace) -> Pmf:
        return Pmf.from_unnormalized(space, self.pmfs[i])


def kolmogorov_integrate(
    rate_fn: Callable[[float], np.ndarray],
    q0: Pmf,
    steps: int,
    t0: float = 0.0,
    t1: float = 1.0 - TIME_EPS,
) -> Trajectory:
    """RK4 integration of dq/dt = U_t q on [t0, t1] with per-step renormalization.

    ``rate_fn(t)`` returns a dense column generator (array or RateMatrixDense).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")

    def rate(t):
        u = rate_fn(t)
        return u.entries if isinstance(u, RateMatrixDense) else np.asarray(u)

    h = (t1 - t0) / steps
    times = t0 + h * np.arange(steps + 1)
    out = np.empty((steps + 1, q0.space.n_states))
    q = q0.weights.copy()
    out[0] = q
    drift = 0.0
    for k in range(steps):
        t = times[k]
        k1 = rate(t) @ q
        u_mid = rate(t + 0.5 * h)
        k2 = u_mid @ (q + 0.5 * h * k1)
        k3 = u_mid @ (q + 0.5 * h * k2)
        k4 = rate(t + h) @ (q + h * k3)
        q = q + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if q.min() < -1e-8:
            raise IntegrationError(f"negative mass {q.min():.3e} at t={times[k + 1]:.4f}")
        q = np.clip(q, 0.0, None)
        total = q.sum()
        drift = max(drift, abs(total - 1.0))
        q = q / total
        out[k + 1] = q
    return Trajectory(times, out, drift)


def euler_step_prob(rate_row, h: float, current: int) -> np.ndarray:
    """First-order transition row delta_current + h * rate_row."""
    if not h > 0:
        raise ValueError("step size must be positive")
    row = np.asarray(rate_row, dtype=float)
    diag = abs(row[current])
    if diag > 0 and h > 1.0 / diag:
        raise StepTooLarge(f"h={h} exceeds first-order validity bound 1/|u(x,x)| = {1.0 / diag}")
    p = h * row
    p[current] += 1.0
    p = np.clip(p, 0.0, None)
    return p / p.sum()


# -- randomness ---------------------------------------------------------------

def step_uniforms(seed: int, step: int, n_chains: int, dims: int, chain_offset: int = 0, lane: int = _LANE_LOOP) -> np.ndarray:
    """Uniforms for one sampler step, shape (n_chains, dims, UNIFORMS_PER_COORD).

    Counter-based: the block for chain ``c`` depends only on (seed, lane, step, c),
    so chunked or reordered execution reproduces the same draws.
    """
    bg = np.random.Philox(key=int(seed) % 2**128, counter=(int(lane) << 192) | (int(step) << 128))
    per_chain = dims * UNIFORMS_PER_COORD
    if chain_offset:
        # Philox emits 4 doubles per counter increment and per_chain is a multiple of 4
        bg.advance(chain_offset * per_chain // 4)
    return np.random.Generator(bg).random((n_chains, dims, UNIFORMS_PER_COORD))


def categorical(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from (unnormalized) rows along the last axis."""
    cdf = np.cumsum(rows, axis=-1)
    idx = (cdf <= (u * cdf[..., -1])[..., None]).sum(axis=-1)
    # never land on a zero-probability trailing symbol
    last_pos = rows.shape[-1] - 1 - np.argmax((rows > 0)[..., ::-1], axis=-1)
    return np.minimum(idx, last_pos)


def categorical_rows(rows: np.ndarray, which: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws where chain n uses ``rows[which[n]]``.

    ``rows`` has shape (M, D, S) and ``u`` shape (N, D). Per-row normalized CDFs
    are laid end to end (row k occupies [2k, 2k + 1]) so one searchsorted call
    serves every chain without materializing (N, D, S) arrays.
    """
    m, dims, size = rows.shape
    cdf = np.cumsum(rows, axis=-1)
    total = cdf[..., -1:]
    if np.any(~(total > 0)):
        raise ValueError("row with zero total mass")
    row_id = np.arange(m * dims).reshape(m, dims)
    flat = (cdf / total + 2.0 * row_id[..., None]).ravel()
    r = row_id[which]
    pos = np.searchsorted(flat, 2.0 * r + u, side="right") - r * size
    last_pos = size - 1 - np.argmax((rows > 0)[..., ::-1], axis=-1)
    return np.minimum(pos, last_pos[which])


def unique_states(space: StateSpace, states: np.ndarray):
    """Distinct states (sorted by flat index) and the inverse map back to the batch."""
    idx, inv = np.unique(space.index_of(states), return_inverse=True)
    return space.state_of(idx), inv.reshape(-1)


def conditional_jump(path: ConditionalPath, t: float, h: float, states, x1, u_jump, u_dest, scale=None) -> np.ndarray:
    """Always-valid update under u_t(., x | x1), optionally scaling the rate into x1.

    For mixture paths the only admissible destination is x1^d, so the update is
    O(N D); ``scale`` multiplies that single rate. Other paths fall back to
    full rows, with ``scale`` applied at the x1 entry.
    """
    if path.kind == "mixture":
        lam = float(path.scheduler.rate_scale(t)) * (x1 != states)
        if scale is not None:
            lam = lam * scale
        jump = (u_jump <= -np.expm1(-h * lam)) & (lam > 0)
        return np.where(jump, x1, states)
    rows = path.rate_rows(t, states, x1)
    if scale is not None:
        n, dims = states.shape
        i, d = np.meshgrid(np.arange(n), np.arange(dims), indexing="ij")
        rows[i, d, x1] = rows[i, d, x1] * scale
    return jump_from_rates(states, rows, h, u_jump, u_dest)


def jump_indexed(states: np.ndarray, uniq: np.ndarray, inv: np.ndarray, rates: np.ndarray, h: float, u_jump, u_dest) -> np.ndarray:
    """Always-valid update from marginal rows ``rates`` given per distinct state ``uniq``."""
    size = rates.shape[-1]
    off = np.where(np.eye(size, dtype=bool)[uniq], 0.0, np.clip(rates, 0.0, None))
    lam = off.sum(axis=-1)
    jump = (u_jump <= -np.expm1(-h * lam[inv])) & (lam[inv] > 0)
    dest = categorical_rows(np.where(lam[..., None] > 0, off, 1.0), inv, u_dest)
    return np.where(jump, dest, states)


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    total = rows.sum(axis=-1, keepdims=True)
    if np.any(~(total > 0)):
        raise ValueError("row with zero total mass")
    return rows / total


def jump_from_rates(states: np.ndarray, rate_rows: np.ndarray, h: float, u_jump: np.ndarray, u_dest: np.ndarray) -> np.ndarray:
    """Always-valid per-coordinate update from outgoing rate rows (N, D, |S|).

    Jump with probability 1 - exp(-h * lambda) where lambda is the off-diagonal
    row sum, to a destination drawn proportionally to the off-diagonal rates.
    """
    size = rate_rows.shape[-1]
    off = np.where(np.eye(size, dtype=bool)[states], 0.0, rate_rows)
    off = np.clip(off, 0.0, None)
    lam = off.sum(axis=-1)
    jump = u_jump <= -np.expm1(-h * lam)
    jump &= lam > 0
    dest = categorical(np.where(lam[..., None] > 0, off, 1.0), u_dest)
    return np.where(jump, dest, states)


def jump_step(batch: SampleBatch, x1: np.ndarray, path: ConditionalPath, h: float, rng=None, uniforms=None) -> SampleBatch:
    """One always-valid step from ``batch.time`` to ``batch.time + h`` given x1 draws."""
    t = batch.time
    if not h > 0 or t + h > 1.0 + 1e-12:
        raise ValueError("need h > 0 and t + h <= 1")
    states = np.asarray(batch.states)
    if uniforms is None:
        rng = rng if rng is not None else np.random.default_rng()
        uniforms = rng.random(states.shape + (2,))
    rows = path.rate_rows(t, states, np.asarray(x1))
    new = jump_from_rates(states, rows, h, uniforms[..., 0], uniforms[..., 1])
    return SampleBatch(new, min(t + h, 1.0), batch.space)


# -- sampler loop ---------------------------------------------------------------

class StepRule(Protocol):
    def step(self, t: float, h: float, states: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def final(self, t: float, states: np.ndarray, u: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 64
    initial: object = "uniform"  # "masked", "uniform" or a Pmf over the space
    seed: int = 0
    final_posterior_draw: bool = True
    chains: int = 1000
    chunk_size: Optional[int] = None
    threads: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")


def time_grid(steps: int):
    """Loop times of the sampler and the time used for the final posterior draw.

    The loop runs while t + h < 1; afterwards t is stepped back by h before the
    final draw, so the last x1 is drawn at 1 - 2h rather than at 1 - h.
    """
    h = 1.0 / steps
    loop = [k * h for k in range(steps) if (k + 1) * h < 1.0]
    t_last = len(loop) * h
    return h, loop, max(t_last - h, 0.0)


def initial_states(space: StateSpace, initial, seed: int, n: int, offset: int = 0) -> np.ndarray:
    if isinstance(initial, str) and initial == "masked":
        if space.mask_symbol is None:
            raise ValueError("masked initialization needs a mask symbol")
        return np.full((n, space.dims), space.mask_symbol, dtype=np.int64)
    u = step_uniforms(seed, 0, n, space.dims, offset, lane=_LANE_INIT)[..., 0]
    if isinstance(initial, str) and initial == "uniform":
        rows = np.zeros(space.alphabet_size)
        rows[space.data_symbols] = 1.0
        return categorical(np.broadcast_to(rows, u.shape + (space.alphabet_size,)), u)
    if isinstance(initial, Pmf):
        cdf = np.cumsum(initial.weights)
        idx = np.searchsorted(cdf, u[:, 0] * cdf[-1], side="right")
        return space.state_of(np.minimum(idx, space.n_states - 1))
    raise ValueError(f"unknown initial distribution {initial!r}")


def run_chains(space: StateSpace, rule: StepRule, config: SamplerConfig, record_times=()) -> tuple[np.ndarray, dict]:
    """Run ``config.chains`` independent chains with a step rule; returns (x1, trace).

    Chains are processed in chunks (optionally on threads); the output does not
    depend on the chunking because draws are keyed by (seed, step, chain).
    """
    h, loop, t_final = time_grid(config.steps)
    n = config.chains
    chunk = config.chunk_size or n
    starts = list(range(0, n, chunk))
    record_steps = {int(round(tr / h)): tr for tr in record_times}
    snapshots: dict[float, list] = {tr: [None] * len(starts) for tr in record_times}

    def run(ci: int):
        lo = starts[ci]
        m = min(chunk, n - lo)
        x = initial_states(space, config.initial, config.seed, m, lo)
        for k, t in enumerate(loop):
            if k in record_steps:
                snapshots[record_steps[k]][ci] = x.copy()
            u = step_uniforms(config.seed, k, m, space.dims, lo)
            x = rule.step(t, h, x, u)
        if len(loop) in record_steps:
            snapshots[record_steps[len(loop)]][ci] = x.copy()
        if config.final_posterior_draw:
            u = step_uniforms(config.seed, len(loop), m, space.dims, lo)
            x = rule.final(t_final, x, u)
        return x

    if config.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]
    trace = {
        "loop_steps": len(loop),
        "chunks": len(starts),
        "step_size": h,
        "final_time": t_final,
        "snapshots": {tr: np.concatenate(v) for tr, v in snapshots.items() if all(p is not None for p in v)},
    }
    return np.concatenate(parts), trace


class PosteriorStepRule:
    """Draw x1^d from (optionally reweighted) posterior rows, then jump.

    ``reweight(t, states, rows)`` returns guided rows; ``None`` means unguided.
    Rows are evaluated once per distinct state in the batch.
    """

    def __init__(self, posterior, path: ConditionalPath, reweight=None):
        self.posterior = posterior
        self.path = path
        self.reweight = reweight

    def rows(self, t, states):
        rows = np.asarray(self.posterior(t, states), dtype=float)
        if self.reweight is not None:
            rows = self.reweight(t, states, rows)
        return normalize_rows(rows)

    def draw(self, t, states, u):
        uniq, inv = unique_states(self.path.space, states)
        return categorical_rows(self.rows(t, uniq), inv, u[..., 0])

    def step(self, t, h, states, u):
        x1 = self.draw(t, states, u)
        return conditional_jump(self.path, t, h, states, x1, u[..., 1], u[..., 2])

    def final(self, t, states, u):
        return self.draw(t, states, u)


def sample_unguided(posterior, path: ConditionalPath, config: SamplerConfig) -> SampleBatch:
    """Sampling without guidance: posterior draw, jump, advance; final posterior draw."""
    x, _ = run_chains(path.space, PosteriorStepRule(posterior, path), config)
    return SampleBatch(x, 1.0, path.space)

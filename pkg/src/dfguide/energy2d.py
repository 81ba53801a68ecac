"""Energy-guided sampling on the 33 x 33 grid: toy datasets, classifiers, guided targets, experiments."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from sklearn.datasets import make_moons, make_swiss_roll

from .ctmc import SamplerConfig
from .formats import panel_grid, write_json, write_pgm
from .guidance import ExactGuidance, GuidanceScheme, sample_guided
from .paths import make_path
from .posterior import ExactPosterior
from .statespace import (
    DensityRatio,
    Pmf,
    StateSpace,
    empirical_pmf,
    enumerate_states,
    off_support_mass,
    pmf_kl_divergence,
    pmf_total_variation,
)

log = logging.getLogger(__name__)

GRID = 33
LO, HI = -4.0, 4.0
CLASSIFIER_FLOOR = 1e-4
DATASETS = ("rings", "moons", "8gaussians", "2spirals", "checkerboard", "swissroll")
CHECKER_MARGIN = 0.15


class UnknownDataset(ValueError):
    pass


@dataclass(frozen=True)
class ShapeDataset:
    name: str
    raw: np.ndarray = field(repr=False)
    quantized: np.ndarray = field(repr=False)
    seed: int = 0

    def pmf_grid(self) -> np.ndarray:
        g = np.zeros((GRID, GRID))
        np.add.at(g, (self.quantized[:, 0], self.quantized[:, 1]), 1.0)
        return g / g.sum()


def quantize(x: np.ndarray) -> np.ndarray:
    """Map [-4, 4]^2 affinely onto the grid {0, ..., 32}^2 and round."""
    q = np.round((np.asarray(x, dtype=float) - LO) * (GRID - 1) / (HI - LO))
    return np.clip(q, 0, GRID - 1).astype(np.int64)


def _rings(n, rng):
    sizes = [n - 3 * (n // 4)] + [n // 4] * 3
    parts = []
    for k, (m, rad) in enumerate(zip(sizes, (1.0, 0.75, 0.5, 0.25))):
        a = np.linspace(0.0, 2 * np.pi, m, endpoint=False)
        parts.append(np.column_stack([np.cos(a), np.sin(a)]) * rad)
    x = np.concatenate(parts) * 3.0
    x = x[rng.permutation(len(x))]
    return x + rng.normal(scale=0.08, size=x.shape)


def _eight_gaussians(n, rng):
    s = 1.0 / np.sqrt(2)
    centers = 4.0 * np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (s, s), (s, -s), (-s, s), (-s, -s)])
    pick = rng.integers(0, 8, n)
    return (rng.normal(size=(n, 2)) * 0.5 + centers[pick]) / 1.414


def _spirals(n, rng):
    m = n // 2
    r = np.sqrt(rng.random((m, 1))) * 540 * (2 * np.pi) / 360
    d1x = -np.cos(r) * r + rng.random((m, 1)) * 0.5
    d1y = np.sin(r) * r + rng.random((m, 1)) * 0.5
    arm = np.hstack([d1x, d1y])
    x = np.vstack([arm, -arm]) / 3.0
    if len(x) < n:
        x = np.vstack([x, x[: n - len(x)]])
    x = x + rng.normal(size=x.shape) * 0.1
    return x[rng.permutation(len(x))]


def _checkerboard(n, rng):
    # 4x4 cells of side 2 on [-4, 4]^2; "on" cells have (i + j) even
    i = rng.integers(0, 4, n)
    j = 2 * rng.integers(0, 2, n) + (i % 2)
    side = 2.0 - 2 * CHECKER_MARGIN
    u = rng.random((n, 2)) * side + CHECKER_MARGIN
    return np.column_stack([LO + 2.0 * i + u[:, 0], LO + 2.0 * j + u[:, 1]])


def _moons(n, rng):
    x, _ = make_moons(n, noise=0.1, random_state=int(rng.integers(2**31)))
    return x * 2.0 + np.array([-1.0, -0.2])


def _swissroll(n, rng):
    x, _ = make_swiss_roll(n, noise=1.0, random_state=int(rng.integers(2**31)))
    return x[:, [0, 2]] / 5.0


_GENERATORS = {
    "rings": _rings,
    "moons": _moons,
    "8gaussians": _eight_gaussians,
    "2spirals": _spirals,
    "checkerboard": _checkerboard,
    "swissroll": _swissroll,
}


def generate_dataset(name: str, n: int, seed: int = 0) -> ShapeDataset:
    if name not in _GENERATORS:
        raise UnknownDataset(f"unknown dataset {name!r}; valid names: {', '.join(DATASETS)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    raw = _GENERATORS[name](n, rng)
    return ShapeDataset(name, raw, quantize(raw), seed)


def count_modes(grid: np.ndarray, rel: float = 0.1) -> int:
    """Strict local maxima of the 3x3-smoothed grid above ``rel`` times the peak."""
    sm = ndimage.uniform_filter(np.asarray(grid, dtype=float), size=3, mode="constant")
    ring = np.ones((3, 3), dtype=bool)
    ring[1, 1] = False
    around = ndimage.maximum_filter(sm, footprint=ring, mode="constant")
    return int(np.sum((sm > around) & (sm >= rel * sm.max())))


# -- energies ------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyFunction:
    """Classifier p(y=1 | x) on the data grid, floored at 1e-4; energy E = -log p."""

    prob: np.ndarray = field(repr=False)
    name: str = "default"

    def __post_init__(self):
        p = np.asarray(self.prob, dtype=float)
        if p.shape != (GRID, GRID):
            raise ValueError(f"classifier grid must be {GRID}x{GRID}")
        if np.any(p < CLASSIFIER_FLOOR) or np.any(p > 1.0):
            raise ValueError("classifier probabilities must lie in [1e-4, 1]")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "prob", p)

    @property
    def energy(self) -> np.ndarray:
        return -np.log(self.prob)

    def at(self, states) -> np.ndarray:
        """p(y=1 | x) on states of a (possibly masked) space; mask-carrying states get 1."""
        s = np.asarray(states, dtype=np.int64)
        on = np.all(s < GRID, axis=-1)
        out = np.ones(s.shape[:-1])
        out[on] = self.prob[s[on][:, 0], s[on][:, 1]]
        return out


def smoothed_classifier(density_grid: np.ndarray) -> EnergyFunction:
    """max(1e-4, 3x3 box-smoothed density, max-normalized)."""
    sm = ndimage.uniform_filter(np.asarray(density_grid, dtype=float), size=3, mode="constant")
    return EnergyFunction(np.maximum(CLASSIFIER_FLOOR, sm / sm.max()), "default")


def radial_classifier(center=(16.0, 24.0), sigma: float = 6.0) -> EnergyFunction:
    a = np.arange(GRID, dtype=float)
    d2 = (a[:, None] - center[0]) ** 2 + (a[None, :] - center[1]) ** 2
    return EnergyFunction(np.maximum(CLASSIFIER_FLOOR, np.exp(-d2 / (2 * sigma**2))), "radial")


def make_space(init: str) -> StateSpace:
    return StateSpace.with_mask(2, GRID) if init == "masked" else StateSpace(2, GRID)


def embed_grid(grid: np.ndarray, space: StateSpace) -> Pmf:
    """Place a 33 x 33 grid pmf on a space (mask-carrying states get zero mass)."""
    w = np.zeros((space.alphabet_size, space.alphabet_size))
    w[:GRID, :GRID] = grid
    return Pmf.from_unnormalized(space, w.reshape(-1))


def data_grid(pmf: Pmf) -> np.ndarray:
    return pmf.as_grid()[:GRID, :GRID]


def guided_target(p1: Pmf, energy: EnergyFunction, gamma: float) -> tuple[Pmf, DensityRatio]:
    """p1^(gamma) proportional to p1 * p(y=1|x)^gamma, and the unnormalized ratio p(y=1|x)^gamma."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    states = enumerate_states(p1.space)
    r_table = energy.at(states) ** gamma
    w = p1.weights * r_table
    if not w.sum() > 0:
        raise ValueError("guided target has zero total mass")
    return Pmf.from_unnormalized(p1.space, w), DensityRatio.from_table(p1.space, r_table)


def classifier_ratio(energy: EnergyFunction, space: StateSpace) -> DensityRatio:
    return DensityRatio.from_table(space, energy.at(enumerate_states(space)))


def noise_floor(target: Pmf, n: int, seed: int = 0) -> float:
    """TV between two independent n-sample empirical pmfs of the target."""
    rng = np.random.default_rng(seed)
    a = empirical_pmf(target.sample(n, rng), target.space)
    b = empirical_pmf(target.sample(n, rng), target.space)
    return pmf_total_variation(a, b)


# -- experiments ------------------------------------------------------------------------

@dataclass
class Problem:
    """Everything needed to sample one (dataset, gamma, init) configuration exactly."""

    space: StateSpace
    p1: Pmf
    energy: EnergyFunction
    gamma: float
    target: Pmf
    ratio: DensityRatio
    path: object

    @classmethod
    def build(cls, density: np.ndarray, energy: EnergyFunction, gamma: float, init: str, scheduler: str = "cosine"):
        space = make_space(init)
        p1 = embed_grid(density, space)
        target, ratio = guided_target(p1, energy, gamma)
        path = make_path("mixture-masked" if init == "masked" else "mixture-uniform", space, scheduler)
        return cls(space, p1, energy, gamma, target, ratio, path)

    def guidance_for(self, scheme: GuidanceScheme):
        if scheme.variant == "none":
            return None
        if scheme.variant == "predictor":
            return ExactGuidance(self.p1, classifier_ratio(self.energy, self.space), self.path)
        return ExactGuidance(self.p1, self.ratio, self.path)


def source_density(name: str, n: int = 200_000, seed: int = 0) -> np.ndarray:
    return generate_dataset(name, n, seed).pmf_grid()


def scheme_for(name: str, gamma: float) -> GuidanceScheme:
    """'predictor' without an explicit strength uses the experiment's gamma."""
    if name == "predictor":
        return GuidanceScheme("predictor", gamma)
    return GuidanceScheme.parse(name)


def _finite_or_none(v: float):
    return v if np.isfinite(v) else None


def run_one(problem: Problem, scheme: GuidanceScheme, steps: int, chains: int, seed: int, posterior=None, guidance=None):
    init = "masked" if problem.space.mask_symbol is not None else "uniform"
    posterior = posterior if posterior is not None else ExactPosterior(problem.p1, problem.path)
    guidance = guidance if guidance is not None else problem.guidance_for(scheme)
    config = SamplerConfig(steps=steps, initial=init, seed=seed, chains=chains)
    batch, rep = sample_guided(posterior, problem.path, scheme, guidance, config)
    emp = empirical_pmf(batch, problem.space)
    rep.update(
        tv=pmf_total_variation(emp, problem.target),
        kl=_finite_or_none(pmf_kl_divergence(emp, problem.target)),
        off_support=off_support_mass(emp, problem.target),
        steps=steps,
        chains=chains,
        seed=seed,
        gamma=problem.gamma,
    )
    return batch, emp, rep


def run_experiment(
    dataset: str = "rings",
    gammas: Sequence[float] = (0.0, 3.0),
    schemes: Sequence[str] = ("posterior",),
    inits: Sequence[str] = ("uniform",),
    steps: int = 64,
    chains: int = 10_000,
    seeds: Sequence[int] = (0,),
    classifier: str = "default",
    n_data: int = 200_000,
    data_seed: int = 0,
    out_dir: Optional[Path] = None,
    threads: int = 1,
) -> dict:
    """Sample every (gamma, scheme, init, seed) with exact posterior and exact guidance.

    Grid points run independently (on ``threads`` workers) and are merged in
    configuration order, so the report does not depend on the thread count.
    """
    density = source_density(dataset, n_data, data_seed)
    energy = smoothed_classifier(density) if classifier == "default" else radial_classifier()
    problems = {(g, i): Problem.build(density, energy, g, i) for g in gammas for i in inits}
    tasks = [(g, i, name, seed) for g in gammas for i in inits for name in schemes for seed in seeds]

    def work(task):
        gamma, init, name, seed = task
        t0 = time.perf_counter()
        _, emp, rep = run_one(problems[(gamma, init)], scheme_for(name, gamma), steps, chains, seed)
        rep["dataset"] = dataset
        return rep, data_grid(emp), time.perf_counter() - t0

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(task) for task in tasks]
    runs = []
    grids = {("target", g): data_grid(problems[(g, inits[0])].target) for g in gammas}
    timings = {}
    for (gamma, init, name, seed), (rep, grid, dt) in zip(tasks, results):
        runs.append(rep)
        grids.setdefault((name, init, gamma), grid)
        timings[f"{gamma}/{name}/{init}/{seed}"] = dt
    summary = {}
    for rep in runs:
        key = f"gamma={rep['gamma']:g}/{rep['scheme'].split(':')[0]}/{rep['init']}"
        summary.setdefault(key, []).append(rep["tv"])
    report = {
        "dataset": dataset,
        "classifier": energy.name,
        "runs": runs,
        "median_tv": {k: float(np.median(v)) for k, v in summary.items()},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for key, g in grids.items():
            write_pgm(out / ("_".join(str(k) for k in key).replace(":", "-") + ".pgm"), g)
        write_pgm(out / "panels.pgm", fig3_panels(grids, gammas, schemes, inits))
        write_json(out / "report.json", report)
        (out / "timings.log").write_text("".join(f"{k}\t{v:.3f}s\n" for k, v in sorted(timings.items())))
    return report


def fig3_panels(grids: dict, gammas, schemes, inits) -> np.ndarray:
    """One row per gamma: ground truth, then one panel per (scheme, init) pair."""
    rows = []
    for gamma in gammas:
        row = [grids.get(("target", gamma))]
        for name in schemes:
            for init in inits:
                row.append(grids.get((name, init, gamma)))
        rows.append(row)
    return panel_grid(rows)

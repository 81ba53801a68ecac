"""Command-line entry point: dfm-guide <command> [options].

Every command writes into a run directory: its outputs, the resolved config
(``config.ini``), a ``manifest.json`` with output digests, and ``run.log``, the
only file carrying timestamps.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import energy2d
from .ctmc import SamplerConfig
from .formats import (
    FormatError,
    load_container,
    read_samples_csv,
    save_container,
    write_curve_csv,
    write_json,
    write_pgm,
    write_pmf_csv,
    write_samples_csv,
    panel_grid,
)
from .guidance import CallCountMismatch, ExactGuidance, GuidanceScheme, ApproxGuidance, call_count, sample_guided
from .nn import OptimizerConfig, make_approximator
from .posterior import ApproxPosterior, DivergenceError, ExactPosterior, UnreachableState, fit_posterior
from .statespace import (
    DensityRatio,
    Pmf,
    SampleBatch,
    empirical_pmf,
    off_support_mass,
    pmf_kl_divergence,
    pmf_total_variation,
)
from .training import MissingTargetData, fit_guidance, fit_ratio, grad_check

log = logging.getLogger("dfguide")

SCHEMA_VERSION = 1
GRAD_CHECK_TOL = 1e-4
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PRECONDITION = 0, 2, 3, 4

# section -> key -> (type, default)
SCHEMA = {
    "run": {"schema_version": (int, SCHEMA_VERSION), "seed": (int, 0), "threads": (int, 0)},
    "data": {
        "dataset": (str, "rings"),
        "n": (int, 200_000),
        "seed": (int, 0),
        "target": (str, ""),
        "classifier": (str, "default"),
    },
    "path": {"init": (str, "uniform"), "scheduler": (str, "cosine")},
    "guidance": {"scheme": (str, "posterior"), "gamma": (float, 0.0)},
    "sampler": {"steps": (int, 64), "chains": (int, 100_000)},
    "fit": {
        "kind": (str, "posterior"),
        "backend": (str, "tabular"),
        "exact": (bool, False),
        "n_buckets": (int, 32),
        "hidden": (str, "64,64"),
        "activation": (str, "tanh"),
        "encoding": (str, "onehot"),
        "guidance_kind": (str, "posterior"),
    },
    "optimizer": {
        "algorithm": (str, "adam"),
        "lr": (float, 1e-2),
        "batch_size": (int, 512),
        "steps": (int, 2000),
        "lam": (float, 0.0),
    },
    "reproduce": {
        "gammas": (str, "0,3,10,20"),
        "schemes": (str, "posterior,rate,predictor,first-order"),
        "inits": (str, "uniform,masked"),
        "seeds": (str, "0"),
    },
}


class ConfigError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


# -- config -------------------------------------------------------------------------

def _convert(typ, raw: str, where: str):
    try:
        if typ is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the INI file, then ``overrides`` ({(section, key): value}), then DFM_SEED."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                parser.read_file(f)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"{path}: {e}") from None
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{sec}] (valid: {', '.join(SCHEMA)})")
            for key, raw in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{sec}] (valid: {', '.join(SCHEMA[sec])})")
                cfg[sec][key] = _convert(SCHEMA[sec][key][0], raw, f"[{sec}] {key}")
    for (sec, key), value in (overrides or {}).items():
        if value is not None:
            cfg[sec][key] = value
    if cfg["run"]["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['run']['schema_version']}")
    env = os.environ.get("DFM_SEED")
    if env is not None:
        seed = _convert(int, env, "DFM_SEED")
        cfg["run"]["seed"] = seed
        cfg["data"]["seed"] = seed
    return cfg


def dump_config(cfg: dict) -> str:
    lines = []
    for sec in SCHEMA:
        lines.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            v = cfg[sec][key]
            lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# -- run directory --------------------------------------------------------------------

class RunDir:
    def __init__(self, root, command: str, cfg: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.outputs: list[str] = []
        self.t0 = time.time()
        self._log(f"start {command}")

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.root / name

    def _log(self, msg: str):
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime())
        with open(self.root / "run.log", "a") as f:
            f.write(f"{stamp}\t{msg}\n")

    def finish(self, extra: dict | None = None):
        (self.root / "config.ini").write_text(dump_config(self.cfg))
        digests = {}
        for name in sorted(set(self.outputs)):
            p = self.root / name
            if p.exists():
                digests[name] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {"command": self.command, "schema_version": SCHEMA_VERSION, "config": self.cfg, "outputs": digests}
        if extra:
            manifest.update(extra)
        write_json(self.root / "manifest.json", manifest)
        self._log(f"done {self.command} in {time.time() - self.t0:.3f}s")


# -- problem assembly ----------------------------------------------------------------------

def _threads(cfg) -> int:
    n = cfg["run"]["threads"]
    return n if n > 0 else (os.cpu_count() or 1)


def _energy(cfg, density):
    name = cfg["data"]["classifier"]
    if name == "default":
        return energy2d.smoothed_classifier(density)
    if name == "radial":
        return energy2d.radial_classifier()
    raise ConfigError(f"unknown classifier {name!r} (valid: default, radial)")


def _problem(cfg, gamma=None) -> energy2d.Problem:
    d = cfg["data"]
    init = cfg["path"]["init"]
    if init not in ("uniform", "masked"):
        raise ConfigError(f"unknown init {init!r} (valid: uniform, masked)")
    density = energy2d.source_density(d["dataset"], d["n"], d["seed"])
    g = cfg["guidance"]["gamma"] if gamma is None else gamma
    return energy2d.Problem.build(density, _energy(cfg, density), g, init, cfg["path"]["scheduler"])


def _target_pmf(cfg, space) -> Pmf:
    name = cfg["data"]["target"]
    if not name:
        raise MissingTargetData("this command needs [data] target (a dataset name)")
    grid = energy2d.source_density(name, cfg["data"]["n"], cfg["data"]["seed"] + 1)
    return energy2d.embed_grid(grid, space)


def _backend(cfg) -> dict:
    f = cfg["fit"]
    if f["backend"] == "tabular":
        return {"kind": "tabular", "n_buckets": f["n_buckets"]}
    if f["backend"] == "mlp":
        return {
            "kind": "mlp",
            "hidden": _ints(f["hidden"]),
            "activation": f["activation"],
            "encoding": f["encoding"],
            "seed": cfg["run"]["seed"],
        }
    raise ConfigError(f"unknown backend {f['backend']!r} (valid: tabular, mlp)")


def _optimizer(cfg) -> OptimizerConfig:
    o = cfg["optimizer"]
    try:
        return OptimizerConfig(o["algorithm"], o["lr"], o["batch_size"], o["steps"], cfg["run"]["seed"], o["lam"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _space_meta(space) -> dict:
    return {"dims": space.dims, "alphabet_size": space.alphabet_size, "mask_symbol": space.mask_symbol}


def _check_space(sidecar: dict, space, path):
    if sidecar.get("space") != _space_meta(space):
        raise PreconditionError(f"{path}: model was fitted on {sidecar.get('space')}, run uses {_space_meta(space)}")


def load_posterior(path, problem):
    tag, payload, side = load_container(path)
    _check_space(side, problem.space, path)
    if tag == "exact":
        return ExactPosterior(Pmf(problem.space, payload), problem.path)
    space = problem.space
    approx = make_approximator(space, (space.dims, space.alphabet_size), side["backend"])
    approx.params[:] = payload
    return ApproxPosterior(approx, space)


def load_guidance(path, problem):
    tag, payload, side = load_container(path)
    _check_space(side, problem.space, path)
    if tag == "exact":
        p1 = Pmf(problem.space, payload[0])
        return ExactGuidance(p1, DensityRatio.from_table(problem.space, payload[1]), problem.path)
    space = problem.space
    kind = side["kind"]
    out_shape = (space.dims, space.alphabet_size) if kind == "posterior" else (1,)
    approx = make_approximator(space, out_shape, side["backend"])
    approx.params[:] = payload
    return ApproxGuidance(approx, space, kind)


def _save_model(run: RunDir, name: str, tag: str, array, sidecar: dict):
    save_container(run.path(name), tag, array, sidecar)
    run.outputs.append(name + ".json")


# -- commands --------------------------------------------------------------------------------

def cmd_gen_data(args, cfg, run: RunDir):
    d = cfg["data"]
    ds = energy2d.generate_dataset(d["dataset"], d["n"], d["seed"])
    body = np.column_stack([ds.raw, ds.quantized])
    np.savetxt(run.path(f"{ds.name}.csv"), body, fmt=["%.17g", "%.17g", "%d", "%d"], delimiter=",",
               header="x,y,q0,q1", comments="")
    space = energy2d.make_space("uniform")
    write_pmf_csv(run.path(f"{ds.name}.pmf.csv"), energy2d.embed_grid(ds.pmf_grid(), space))
    return {}


def cmd_fit(args, cfg, run: RunDir):
    kind = cfg["fit"]["kind"]
    problem = _problem(cfg)
    space = problem.space
    meta = {"space": _space_meta(space), "dataset": cfg["data"]["dataset"], "init": cfg["path"]["init"],
            "gamma": problem.gamma}
    exact = cfg["fit"]["exact"]
    if kind == "posterior":
        if exact:
            _save_model(run, "posterior.dfmp", "exact", problem.p1.weights, {**meta, "backend": {"kind": "exact"}})
            return {"exact": True}
        model, report = fit_posterior(problem.p1, problem.path, _backend(cfg), _optimizer(cfg))
        _save_model(run, "posterior.dfmp", report["backend"]["kind"], model.approx.params,
                       {**meta, "backend": {**_backend(cfg), **report["backend"]}})
        write_curve_csv(run.path("loss_curve.csv"), {"cross_entropy": report["loss_curve"]})
    elif kind == "guidance":
        gkind = cfg["fit"]["guidance_kind"]
        if exact:
            table = np.stack([problem.p1.weights, problem.ratio.table(space)])
            _save_model(run, "guidance.dfmp", "exact", table, {**meta, "kind": gkind, "backend": {"kind": "exact"}})
            return {"exact": True}
        opt = _optimizer(cfg)
        target = _target_pmf(cfg, space) if opt.lam > 0 else None
        model, report = fit_guidance(problem.p1, problem.path, problem.ratio, _backend(cfg), opt, kind=gkind,
                                     target=target)
        _save_model(run, "guidance.dfmp", report["backend"]["kind"], model.params,
                       {**meta, "kind": gkind, "backend": {**_backend(cfg), **report["backend"]}})
        write_curve_csv(run.path("loss_curve.csv"), report["loss_curves"])
    elif kind == "ratio":
        target = _target_pmf(cfg, space)
        model, report = fit_ratio(problem.p1, target, space, _backend(cfg), _optimizer(cfg))
        _save_model(run, "ratio.dfmp", report["backend"]["kind"], model.params,
                       {**meta, "backend": {**_backend(cfg), **report["backend"]}})
        write_curve_csv(run.path("loss_curve.csv"), {"density_ratio": report["loss_curve"]})
    else:
        raise ConfigError(f"unknown fit kind {kind!r} (valid: posterior, guidance, ratio)")
    summary = {k: v for k, v in report.items() if k not in ("loss_curve", "loss_curves")}
    write_json(run.path("fit_report.json"), summary)
    return {}


def cmd_sample(args, cfg, run: RunDir):
    problem = _problem(cfg)
    scheme = GuidanceScheme.parse(cfg["guidance"]["scheme"])
    posterior = load_posterior(args.posterior_model, problem) if args.posterior_model else None
    if args.guidance_model:
        guidance = load_guidance(args.guidance_model, problem)
    else:
        guidance = problem.guidance_for(scheme) if scheme.variant != "none" else None
    posterior = posterior or ExactPosterior(problem.p1, problem.path)
    s = cfg["sampler"]
    config = SamplerConfig(steps=s["steps"], initial=cfg["path"]["init"], seed=cfg["run"]["seed"], chains=s["chains"],
                           threads=_threads(cfg))
    batch, report = sample_guided(posterior, problem.path, scheme, guidance, config)
    write_samples_csv(run.path("samples.csv"), batch.states)
    write_json(run.path("sample_report.json"), report)
    return {}


def cmd_eval(args, cfg, run: RunDir):
    problem = _problem(cfg)
    states = read_samples_csv(args.samples)
    try:
        states = problem.space.validate_states(states)
    except ValueError as e:
        raise PreconditionError(f"{args.samples}: {e}") from None
    emp = empirical_pmf(SampleBatch(states, 1.0, problem.space), problem.space)
    metrics = {
        "n": int(states.shape[0]),
        "tv": pmf_total_variation(emp, problem.target),
        "kl": energy2d._finite_or_none(pmf_kl_divergence(emp, problem.target)),
        "off_support": off_support_mass(emp, problem.target),
        "gamma": problem.gamma,
        "dataset": cfg["data"]["dataset"],
    }
    rep_path = Path(args.samples).with_name("sample_report.json")
    if rep_path.exists():
        rep = json.loads(rep_path.read_text())
        metrics["call_count"] = rep.get("calls_per_step")
        metrics["scheme"] = rep.get("scheme")
    else:
        scheme = GuidanceScheme.parse(cfg["guidance"]["scheme"])
        metrics["call_count"] = call_count(scheme, problem.space, cfg["path"]["init"])
        metrics["scheme"] = str(scheme)
    write_json(run.path("metrics.json"), metrics)
    print(f"tv={metrics['tv']:.6f} kl={metrics['kl']} off_support={metrics['off_support']:.2e} calls_per_step={metrics['call_count']}")
    return {}


def cmd_render(args, cfg, run: RunDir):
    problem = _problem(cfg)
    row = [energy2d.data_grid(problem.target)]
    for f in args.samples:
        states = problem.space.validate_states(read_samples_csv(f))
        row.append(energy2d.data_grid(empirical_pmf(SampleBatch(states, 1.0, problem.space), problem.space)))
    write_pgm(run.path("panels.pgm"), panel_grid([row]))
    return {}


def cmd_reproduce_fig3(args, cfg, run: RunDir):
    r = cfg["reproduce"]
    report = energy2d.run_experiment(
        dataset=cfg["data"]["dataset"],
        gammas=_floats(r["gammas"]),
        schemes=_names(r["schemes"]),
        inits=_names(r["inits"]),
        steps=cfg["sampler"]["steps"],
        chains=cfg["sampler"]["chains"],
        seeds=_ints(r["seeds"]),
        classifier=cfg["data"]["classifier"],
        n_data=cfg["data"]["n"],
        data_seed=cfg["data"]["seed"],
        out_dir=run.root,
        threads=_threads(cfg),
    )
    for name in sorted(p.name for p in run.root.iterdir() if p.suffix in (".pgm", ".json") and p.name != "manifest.json"):
        run.outputs.append(name)
    for key, tv in sorted(report["median_tv"].items()):
        print(f"{key}\tmedian_tv={tv:.4f}")
    return {}


def cmd_grad_check(args, cfg, run: RunDir):
    """Finite-difference checks of every training loss on a small masked toy."""
    from .training import bregman_loss_posterior, bregman_loss_rate, density_ratio_loss, regularization_loss, RatioModel
    from .posterior import cross_entropy_loss, training_batch
    from .paths import make_path, sample_conditional
    from .statespace import StateSpace

    rng = np.random.default_rng(cfg["run"]["seed"])
    space = StateSpace(2, 4)
    p1 = Pmf.from_unnormalized(space, rng.random(space.n_states) + 0.05)
    q1 = Pmf.from_unnormalized(space, rng.random(space.n_states) + 0.05)
    path = make_path("mixture-uniform", space)
    ratio = DensityRatio.between(q1, p1)
    backend = _backend(cfg)
    t, x1, xt = training_batch(p1, path, 64, rng)
    r = ratio(x1)
    post = ApproxPosterior(make_approximator(space, (2, 4), backend), space)
    post.approx.params[:] = rng.normal(size=post.approx.params.size) * 0.3
    gpost = ApproxGuidance(make_approximator(space, (2, 4), backend), space, "posterior")
    gpost.params[:] = rng.normal(size=gpost.params.size) * 0.3
    grate = ApproxGuidance(make_approximator(space, (1,), backend), space, "rate")
    grate.params[:] = rng.normal(size=grate.params.size) * 0.3
    ratio_model = RatioModel(make_approximator(space, (1,), {**backend, "n_buckets": 1}), space)
    ratio_model.params[:] = rng.normal(size=ratio_model.params.size) * 0.3
    xq = q1.sample(64, rng)
    tq = rng.random(64)
    xtq = sample_conditional(path, tq, xq, rng)
    p_rows = ExactPosterior(p1, path)(tq, xtq)
    checks = {
        "cross_entropy": grad_check(lambda th: cross_entropy_loss(post, t, x1, xt, True, th), post.approx.params),
        "bregman_posterior": grad_check(lambda th: bregman_loss_posterior(gpost, t, x1, xt, r, True, th), gpost.params),
        "bregman_rate": grad_check(lambda th: bregman_loss_rate(grate, t, x1, xt, r, True, th), grate.params),
        "regularization": grad_check(lambda th: regularization_loss(gpost, p_rows, tq, xq, xtq, True, th), gpost.params),
        "density_ratio": grad_check(lambda th: density_ratio_loss(ratio_model, x1, xq, True, th), ratio_model.params),
    }
    write_json(run.path("grad_check.json"), checks)
    ok = True
    for name, err in checks.items():
        passed = err < GRAD_CHECK_TOL
        print(f"{name}\tmax_rel_err={err:.3e}\t{'ok' if passed else 'FAIL'}")
        ok &= passed
    if not ok:
        raise FloatingPointError("gradient check failed")
    return {}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "render": cmd_render,
    "reproduce-fig3": cmd_reproduce_fig3,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dfm-guide", description="Guided discrete flow matching on enumerable spaces.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--dataset")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("gen-data", help="generate a 2-D shape dataset"))
    p.add_argument("--n", type=int)

    def problem_flags(p):
        p.add_argument("--init", choices=("uniform", "masked"))
        p.add_argument("--gamma", type=float)
        p.add_argument("--classifier", choices=("default", "radial"))

    p = common(sub.add_parser("fit", help="fit a posterior, guidance or ratio model"))
    problem_flags(p)
    p.add_argument("kind", nargs="?", choices=("posterior", "guidance", "ratio"))
    p.add_argument("--backend", choices=("tabular", "mlp"))
    p.add_argument("--exact", action="store_true", default=None, help="materialize the enumeration oracle instead")
    p.add_argument("--guidance-kind", choices=("posterior", "rate"))
    p.add_argument("--target", help="target dataset for ratio fitting or regularization")
    p.add_argument("--lam", type=float)
    p.add_argument("--train-steps", type=int)
    p.add_argument("--lr", type=float)

    p = common(sub.add_parser("sample", help="run the guided sampler"))
    problem_flags(p)
    p.add_argument("--guidance", help="posterior | rate | predictor[:gamma] | first-order | none")
    p.add_argument("--steps", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--posterior-model")
    p.add_argument("--guidance-model")

    p = common(sub.add_parser("eval", help="TV and KL of samples against the exact guided target"))
    problem_flags(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--guidance")

    p = common(sub.add_parser("render", help="PGM panel: exact target, then one panel per sample file"))
    problem_flags(p)
    p.add_argument("--samples", nargs="+", required=True)

    p = common(sub.add_parser("reproduce-fig3", help="full grid of gammas x schemes x inits"))
    p.add_argument("--steps", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--gammas")
    p.add_argument("--schemes")
    p.add_argument("--inits")
    p.add_argument("--seeds")
    p.add_argument("--classifier", choices=("default", "radial"))

    p = common(sub.add_parser("grad-check", help="finite-difference check of every loss"))
    p.add_argument("--backend", choices=("tabular", "mlp"))
    return ap


def _overrides(args) -> dict:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        ("run", "seed"): g("seed"),
        ("run", "threads"): g("threads"),
        ("data", "dataset"): g("dataset"),
        ("data", "n"): g("n"),
        ("data", "target"): g("target"),
        ("data", "classifier"): g("classifier"),
        ("path", "init"): g("init"),
        ("guidance", "gamma"): g("gamma"),
        ("guidance", "scheme"): g("guidance"),
        ("sampler", "steps"): g("steps"),
        ("sampler", "chains"): g("chains"),
        ("fit", "kind"): g("kind"),
        ("fit", "backend"): g("backend"),
        ("fit", "exact"): g("exact"),
        ("fit", "guidance_kind"): g("guidance_kind"),
        ("optimizer", "lam"): g("lam"),
        ("optimizer", "steps"): g("train_steps"),
        ("optimizer", "lr"): g("lr"),
        ("reproduce", "gammas"): g("gammas"),
        ("reproduce", "schemes"): g("schemes"),
        ("reproduce", "inits"): g("inits"),
        ("reproduce", "seeds"): g("seeds"),
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        run = RunDir(args.out, args.command, cfg)
        extra = COMMANDS[args.command](args, cfg, run)
        run.finish(extra)
        return EXIT_OK
    except (ConfigError, energy2d.UnknownDataset) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError, CallCountMismatch) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PreconditionError, MissingTargetData, UnreachableState, FormatError, FileNotFoundError, ValueError) as e:
        print(f"precondition violated: {e}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())

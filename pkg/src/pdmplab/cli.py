"""Command-line runner: one subcommand per scenario, CSV outputs plus a manifest.

Usage::

    pdmplab <scenario> --config cfg.yaml --seed 7 --out runs/x [--replicas N] [--horizon T]
    pdmplab validate --config cfg.yaml
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import branching as br
from . import gene
from . import ifire
from . import switched as sw
from .config import SCENARIOS, ConfigError, ScenarioConfig, validate_config
from .core import ModelError, RateMatrix, simulate_pdmp, stationary_distribution
from .rng import RngStream
from .stats import estimate

DEFAULTS = {
    "malthus": {"replicas": 10_000, "horizon": 10.0},
    "planar": {"replicas": 16, "horizon": 200.0},
    "coupling": {"replicas": 1, "horizon": 10.0},
    "branching": {"replicas": 1000, "horizon": 3.0},
    "ifire": {"replicas": 4, "horizon": 2500.0},
    "gene": {"replicas": 10_000},
    "cvscan": {},
}


def version() -> str:
    try:
        return metadata.version("pdmplab")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _f(v) -> str:
    """Shortest round-trip float text; integers stay integral."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([c if isinstance(c, str) else _f(c) for c in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# scenarios; each returns {filename: csv text} and a summary dict


def run_malthus(cfg: ScenarioConfig, stream: RngStream, replicas: int, horizon: float):
    p = cfg.params
    q = RateMatrix(p.Q)
    a = np.array(p.a)
    model = sw.MalthusModel(q, a, p.x0)
    curve = sw.growth_rate_curve(q, a, p.p_grid)
    nu = stationary_distribution(q)
    traj = simulate_pdmp(model.system(), [p.x0], 0, horizon, stream.substream(0),
                         record_dt=p.record_dt, use_closed_form=True)
    fk_rows = []
    for i, pp in enumerate(p.fk_p):
        exact = sw.moment_feynman_kac(q, a, pp, p.fk_time, nu)
        mc = sw.feynman_kac_monte_carlo(q, a, pp, p.fk_time, nu, replicas, stream.substream(1 + i))
        fk_rows.append([pp, exact, mc.mean, mc.se, (mc.mean - exact) / mc.se if mc.se else 0.0])
    report = sw.moment_dichotomy(q, a)
    outputs = {
        "growth_rate.csv": _table(["p", "lambda_p"], curve.rows()),
        "trajectory.csv": _table(traj.header(), traj.rows()),
        "feynman_kac.csv": _table(["p", "exact", "mc_mean", "mc_se", "z"], fk_rows),
    }
    summary = {"mean_rate": model.mean_rate, "derivative_at_zero": curve.derivative_at_zero,
               "dichotomy": vars(report)}
    return outputs, summary


def run_planar(cfg, stream, replicas, horizon):
    p = cfg.params
    mats = [np.array(p.m0), np.array(p.m1)]
    rows = sw.lyapunov_scan(mats, p.rates, horizon, stream.substream(0), replicas)
    outputs = {"lyapunov.csv": _table(["lambda_switch", "chi", "ci_lo", "ci_hi"], rows)}
    summary = {}
    if p.critical:
        cr = sw.critical_rate(mats, tuple(p.bracket), p.tol, stream.substream(1), replicas, horizon)
        outputs["critical_rate.csv"] = _table(["lo", "hi", "resolved"], [[cr.lo, cr.hi, cr.resolved]])
        summary["critical_rate"] = [cr.lo, cr.hi, cr.resolved]
    return outputs, summary


def run_coupling(cfg, stream, replicas, horizon):
    p = cfg.params
    sys_ = sw.switched_linear([np.array(m) for m in p.matrices], RateMatrix.symmetric(len(p.matrices), p.rate))
    rho = [sw.contraction_coefficient(f).rho for f in sys_.fields]
    rows, ok = [], True
    for r, s in enumerate(stream.substreams(replicas)):
        path = sw.two_point_coupling(sys_, p.x0, p.x0b, horizon, s, rho=rho, grid_dt=p.grid_dt)
        ok &= path.holds()
        rows += [[r, *row] for row in path.rows()]
    outputs = {"coupling.csv": _table(["replica", "t", "distance", "bound"], rows)}
    return outputs, {"rho": rho, "bound_holds": bool(ok)}


def _division(p) -> br.DivisionRate:
    if p.division.kind == "constant":
        return br.DivisionRate.constant_rate(p.division.rate)
    return br.DivisionRate.proportional(p.growth_rate, p.division.rate, p.division.analytic)


BRANCHING_FUNCTIONALS = {
    "one": lambda x: np.ones_like(x),
    "trait": lambda x: x,
    "log_trait": np.log,
    "square": lambda x: x ** 2,
    "exp_neg": lambda x: np.exp(-x),
}


def run_branching(cfg, stream, replicas, horizon):
    p = cfg.params
    spec = br.BranchingSpec(br.exponential_growth(p.growth_rate), _division(p),
                            {int(k): float(v) for k, v in p.offspring.items()})
    tree_stream = stream.substream(0)
    trees = [br.simulate_tree(spec, p.x0, horizon, tree_stream.substream(i), cap=p.cap)
             for i in range(replicas)]
    counts = [tr.count(horizon) for tr in trees]
    outputs = {
        "tree.csv": _table(br.TREE_HEADER, trees[0].rows()),
        "population.csv": _table(["replica", "n_alive", "total_trait"],
                                 [[i, c, br.population_functional(tr, lambda x: x, horizon)]
                                  for i, (tr, c) in enumerate(zip(trees, counts))]),
    }
    n_est = estimate(counts)
    summary = {"mean_population": n_est.mean, "mean_population_se": n_est.se}
    if p.many_to_one and p.division.kind == "constant" and spec.mean_offspring != 1:
        spine = br.SpineSpec(spec)
        rows = []
        for j, (name, f) in enumerate(BRANCHING_FUNCTIONALS.items()):
            r = br.many_to_one_check(spine, f, p.x0, horizon, replicas, stream.substream(1 + j), trees=trees)
            rows.append([name, r.lhs.mean, r.lhs.se, r.rhs.mean, r.rhs.se, r.z])
        outputs["many_to_one.csv"] = _table(["functional", "lhs", "lhs_se", "rhs", "rhs_se", "z"], rows)
    return outputs, summary


def _reset_law(r):
    if r.kind == "uniform":
        return ifire.uniform_law(r.lo, r.hi)
    return ifire.PointMass(r.value)


def run_ifire(cfg, stream, replicas, horizon):
    p = cfg.params
    spec = ifire.IFSpec.linear(RateMatrix(p.Q), p.alpha, [_reset_law(r) for r in p.resets], p.m, p.c,
                               epsilon=p.epsilons[0], initial=p.initial)
    study = ifire.convergence_study(spec, p.epsilons, horizon, replicas, stream.substream(0), p.n_prehit)
    run = ifire.simulate_if(spec, p.trajectory_horizon, stream.substream(1), record=True)
    outputs = {
        "convergence.csv": _table(study.header, study.csv_rows()),
        "trajectory.csv": _table(run.trajectory.header(), run.trajectory.rows()),
    }
    av = ifire.averaged_spec(spec)
    summary = {"pi_star": av.pi_star.tolist(), "alpha_bar": av.alpha_bar,
               "trends": study.trends,
               "max_hits_per_run": [r.max_hits_per_run for r in study.rows]}
    return outputs, summary


def _gene_params(g) -> gene.GeneParams:
    return gene.GeneParams(g.lambda1, g.sigma1, g.lambda2, g.tauR, g.tauD, g.V0)


def run_gene(cfg, stream, replicas, horizon):
    p = cfg.params
    gp = _gene_params(p.params)
    s = np.linspace(0.0, gp.tauD, p.n_phases, endpoint=False)
    prof = gene.concentration_profile(gp, s)
    eq = gene.equilibrium_moments(gp)
    mom = gene.moments_at(gp, s, eq)
    outputs = {
        "concentration.csv": _table(prof.header, prof.csv_rows()),
        "moments.csv": _table(["s", "EM", "EP", "VarM", "VarP", "CovMP"], [[a, *m] for a, m in zip(s, mom)]),
    }
    mu, var = gene.phase_average_concentration(gp)
    summary = {"mu_p": mu, "cv2": var / mu ** 2, "fluctuation": prof.fluctuation,
               "equilibrium": vars(eq)}
    if p.simulate is not None:
        sim = gene.concentration_stats(gp, s, p.simulate.n_cycles, stream.substream(0), replicas,
                                       p.simulate.burn_in)
        outputs["concentration_sim.csv"] = _table(sim.header, sim.csv_rows())
    return outputs, summary


def run_cvscan(cfg, stream, replicas, horizon):
    p = cfg.params
    base = _gene_params(p.base)
    if p.sweep is not None:
        vals = np.geomspace(p.sweep.lo, p.sweep.hi, p.sweep.n)
        grid = [base.replace(**{p.sweep.parameter: float(v)}) for v in vals]
    else:
        grid = [_gene_params(g) for g in p.grid]
    scan = gene.cv_scan(grid)
    outputs = {"cv_scan.csv": _table(scan.header, scan.csv_rows())}
    return outputs, {"slope": scan.slope, "tail_slope": scan.tail_slope, "monotone": scan.monotone,
                     "plateau": scan.plateau}


RUNNERS = {
    "malthus": run_malthus,
    "planar": run_planar,
    "coupling": run_coupling,
    "branching": run_branching,
    "ifire": run_ifire,
    "gene": run_gene,
    "cvscan": run_cvscan,
}


# ---------------------------------------------------------------------------
# orchestration


class UsageError(ValueError):
    pass


def resolve(cfg: ScenarioConfig, seed=None, replicas=None, horizon=None) -> ScenarioConfig:
    """Apply command-line overrides and scenario defaults."""
    d = DEFAULTS[cfg.scenario]
    upd = {"seed": cfg.seed if seed is None else seed,
           "replicas": replicas or cfg.replicas or d.get("replicas"),
           "horizon": horizon or cfg.horizon or d.get("horizon")}
    if "horizon" not in d and (horizon or cfg.horizon):
        raise UsageError(f"scenario {cfg.scenario!r} takes no horizon")
    if "replicas" not in d and (replicas or cfg.replicas):
        raise UsageError(f"scenario {cfg.scenario!r} takes no replica count")
    return cfg.model_copy(update=upd)


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path) -> dict:
    """Run a resolved config and write its CSVs and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = RngStream(int(cfg.seed))
    t0 = time.perf_counter()
    try:
        outputs, summary = RUNNERS[cfg.scenario](cfg, stream, cfg.replicas, cfg.horizon)
    except Exception as exc:
        raise ScenarioError(cfg.scenario, exc) from exc
    checksums = {}
    for name, text in outputs.items():
        data = text.encode()
        (out / name).write_bytes(data)
        checksums[name] = hashlib.sha256(data).hexdigest()
    manifest = {
        "schema_version": 1,
        "toolkit": "pdmplab",
        "toolkit_version": version(),
        "config": json.loads(cfg.model_dump_json()),
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
        "outputs": checksums,
        "summary": _jsonable(summary),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    return x


class ScenarioError(RuntimeError):
    def __init__(self, scenario: str, cause: Exception):
        self.scenario = scenario
        self.cause = cause
        super().__init__(f"{scenario}: {type(cause).__name__}: {cause}")


def _emit_error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, indent=2), file=sys.stdout)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdmplab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"pdmplab {version()}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SCENARIOS:
        sp = sub.add_parser(name, help=f"run the {name} scenario")
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--out", required=True)
        sp.add_argument("--replicas", type=int)
        sp.add_argument("--horizon", type=float)
    v = sub.add_parser("validate", help="validate a config file without running it")
    v.add_argument("--config", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = validate_config(args.config)
    except FileNotFoundError as exc:
        _emit_error("config", f"cannot read config: {exc}")
        return 2
    except ConfigError as exc:
        _emit_error("config", "config validation failed", path=exc.path, errors=exc.errors)
        return 2
    if args.command == "validate":
        print(json.dumps({"valid": True, "scenario": cfg.scenario}))
        return 0
    if cfg.scenario != args.command:
        _emit_error("usage", f"config is for scenario {cfg.scenario!r}, not {args.command!r}")
        return 2
    if args.replicas is not None and args.replicas < 1:
        _emit_error("usage", "--replicas must be positive")
        return 2
    if args.horizon is not None and not args.horizon > 0:
        _emit_error("usage", "--horizon must be positive")
        return 2
    try:
        cfg = resolve(cfg, args.seed, args.replicas, args.horizon)
        manifest = run_scenario(cfg, args.out)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    except ScenarioError as exc:
        kind = "model" if isinstance(exc.cause, ModelError) else "runtime"
        _emit_error(kind, str(exc), scenario=exc.scenario, exception=type(exc.cause).__name__)
        return 1
    print(json.dumps({"ok": True, "scenario": cfg.scenario, "out": str(args.out),
                      "outputs": manifest["outputs"]}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

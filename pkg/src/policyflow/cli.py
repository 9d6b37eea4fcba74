"""Command-line experiment runner.

    policyflow run CONFIG            run one dynamic, write trace/measures/report
    policyflow compare CONFIG...     run several dynamics on a shared problem
    policyflow sinkhorn --mu A --nu B --eps E
    policyflow gibbs CONFIG          write the closed-form optimal policy

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  CSV files
are comma separated with a header row and floats written with 17 significant
digits, so re-running a config reproduces them byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, build_initial, build_reward, load_config
from .errors import NumericalError, ParameterError, StabilityError
from .flows import run_flow
from .measures import DiscreteMeasure, free_energy, gibbs_policy, make_grid, total_variation
from .sinkhorn import sinkhorn_cost, sinkhorn_divergence
from .trace import TRACE_COLUMNS, FlowTrace

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

COMPARISON_COLUMNS = ("a", "b", "tv", "sinkhorn_divergence")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_measure_csv(path: Path, pi: DiscreteMeasure):
    write_csv(path, ("center", "weight"), zip(pi.grid.centers, pi.w))


def read_measure_csv(path) -> DiscreteMeasure:
    """Read a ``center,weight`` table on a uniform grid (weights are renormalized)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["center", "weight"]:
        raise ConfigError(f"{path}: expected header 'center,weight'")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] != 2:
        raise ConfigError(f"{path}: need at least two rows of center,weight")
    x = data[:, 0]
    h = (x[-1] - x[0]) / (len(x) - 1)
    if not h > 0 or np.max(np.abs(np.diff(x) - h)) > 1e-9 * max(1.0, abs(h)):
        raise ConfigError(f"{path}: centers must be increasing and evenly spaced")
    grid = make_grid(x[0] - h / 2, x[-1] + h / 2, len(x))
    try:
        return DiscreteMeasure.from_weights(grid, data[:, 1])
    except ParameterError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class RunReport:
    name: str
    stepper: str
    tv_to_gibbs: float
    free_energy: float
    gibbs_free_energy: float
    steps: int
    time: float
    wall_time: float
    converged: bool
    criterion: str
    failed: bool = False
    error: str | None = None
    warnings: list = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = str(v)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def execute(cfg: ExperimentConfig, stride: int | None = None) -> FlowTrace:
    """Run the configured dynamic and return its trace (failures are flagged, not raised)."""
    r = build_reward(cfg)
    pi0 = build_initial(cfg)
    p = cfg.flow
    if stride is not None:
        p = dataclasses.replace(p, stride=stride)
    elif cfg.diagnostics.stride != 1:
        p = dataclasses.replace(p, stride=cfg.diagnostics.stride)
    return run_flow(pi0, r, p, cfg.stepper, scheme=cfg.scheme, langevin=cfg.langevin,
                    diag_eps=cfg.diagnostics.eps)


def write_outputs(cfg: ExperimentConfig, trace: FlowTrace, out: Path, wall: float) -> RunReport:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "trace.csv", TRACE_COLUMNS,
              ([row[c] for c in TRACE_COLUMNS] for row in trace.rows))
    write_measure_csv(out / "measures.csv", trace.final)
    if cfg.diagnostics.save_intermediate:
        write_csv(out / "snapshots.csv", ("step", "center", "weight"),
                  ((k, x, w) for k, pi in zip(trace.steps, trace.measures)
                   for x, w in zip(pi.grid.centers, pi.w)))
    last = trace.rows[-1]
    tol = cfg.diagnostics.tv_tol
    report = RunReport(
        name=cfg.name, stepper=cfg.stepper, tv_to_gibbs=last["tv_to_gibbs"],
        free_energy=last["free_energy"],
        gibbs_free_energy=free_energy(trace.gibbs, trace.reward, trace.beta).free_energy,
        steps=int(trace.steps[-1]), time=float(trace.times[-1]), wall_time=wall,
        converged=bool(not trace.failed and last["tv_to_gibbs"] <= tol),
        criterion=f"tv_to_gibbs <= {tol:g}", failed=trace.failed, error=trace.error,
        warnings=list(trace.warnings))
    (out / "report.json").write_text(report.to_json())
    return report


def output_dir(cfg: ExperimentConfig, override) -> Path:
    if override is not None:
        return Path(override)
    return Path(cfg.out_dir) if cfg.out_dir else Path("out") / cfg.name


def _run(cfg, out: Path, stride):
    t0 = time.perf_counter()
    trace = execute(cfg, stride)
    return write_outputs(cfg, trace, out, time.perf_counter() - t0), trace


def run_experiment(cfg: ExperimentConfig, out_dir=None, stride: int | None = None) -> RunReport:
    """Run one config and write ``trace.csv``, ``measures.csv`` and ``report.json``."""
    return _run(cfg, output_dir(cfg, out_dir), stride)[0]


def _shared_key(cfg: ExperimentConfig):
    return (cfg.grid, cfg.reward.kind, json.dumps(cfg.reward.params, sort_keys=True, default=list),
            cfg.beta)


def compare_dynamics(cfgs: list, out_dir, stride: int | None = None, eps: float | None = None):
    """Run every config and write pairwise terminal distances to ``comparison.csv``.

    Rows cover every ordered pair (including each run with itself) and each
    run against the Gibbs policy.  Returns ``(reports, rows)``.
    """
    if not cfgs:
        raise ConfigError("compare needs at least one config")
    key = _shared_key(cfgs[0])
    for c in cfgs[1:]:
        if _shared_key(c) != key:
            raise ConfigError(f"config {c.name!r} does not share grid/reward/beta with {cfgs[0].name!r}")
    names = []
    for c in cfgs:
        name = c.name
        k = 2
        while name in names:
            name = f"{c.name}-{k}"
            k += 1
        names.append(name)
    out_dir = Path(out_dir)
    finals, reports = [], []
    for name, c in zip(names, cfgs):
        rep, trace = _run(c, out_dir / name, stride)
        reports.append(rep)
        finals.append(trace.final)
    gibbs = gibbs_policy(build_reward(cfgs[0]), cfgs[0].beta)
    diag_eps = eps if eps is not None else (cfgs[0].diagnostics.eps or 0.05)

    def dist(a, b):
        return total_variation(a, b), sinkhorn_divergence(a, b, diag_eps)

    rows = []
    for i, a in enumerate(finals):
        for j, b in enumerate(finals):
            rows.append((names[i], names[j], *dist(a, b)))
        rows.append((names[i], "gibbs", *dist(a, gibbs)))
    write_csv(out_dir / "comparison.csv", COMPARISON_COLUMNS, rows)
    return reports, rows


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _summary(rep: RunReport) -> str:
    state = "FAILED" if rep.failed else ("converged" if rep.converged else "not converged")
    return (f"{rep.name}: {rep.stepper} steps={rep.steps} t={rep.time:g} "
            f"tv_to_gibbs={rep.tv_to_gibbs:.3e} J={rep.free_energy:.10g} [{state}]")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    rep = run_experiment(cfg, args.out_dir, args.stride)
    _say(args, _summary(rep))
    if rep.failed:
        print(f"error: {rep.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = [load_config(p) for p in args.configs]
    out = Path(args.out_dir) if args.out_dir else Path("out") / "compare"
    reports, rows = compare_dynamics(cfgs, out, args.stride)
    for rep in reports:
        _say(args, _summary(rep))
    for a, b, tv, cost in rows:
        _say(args, f"{a} vs {b}: tv={tv:.3e} sinkhorn_divergence={cost:.3e}")
    if any(r.failed for r in reports):
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_sinkhorn(args) -> int:
    mu = read_measure_csv(args.mu)
    nu = read_measure_csv(args.nu)
    if not (args.eps > 0 and math.isfinite(args.eps)):
        raise ConfigError("--eps must be positive")
    res = sinkhorn_cost(mu, nu, args.eps, tol=args.tol)
    if not res.converged:
        raise NumericalError(f"sinkhorn did not converge (marginal error {res.marginal_err:.3g})")
    out = Path(args.out_dir) if args.out_dir else Path("out") / "sinkhorn"
    P = res.plan.matrix
    xs, ys = mu.grid.centers, nu.grid.centers
    write_csv(out / "plan.csv", ("source", "target", "mass"),
              ((xs[i], ys[j], P[i, j]) for i in range(len(xs)) for j in range(len(ys))))
    _say(args, f"cost {fmt(res.cost)}")
    _say(args, f"regularized_cost {fmt(res.reg_cost)}")
    _say(args, f"iterations {res.iterations} marginal_error {res.marginal_err:.3e}")
    return EXIT_OK


def cmd_gibbs(args) -> int:
    cfg = load_config(args.config)
    r = build_reward(cfg)
    g = gibbs_policy(r, cfg.beta)
    out = output_dir(cfg, args.out_dir)
    write_measure_csv(out / "gibbs.csv", g)
    fe = free_energy(g, r, cfg.beta)
    _say(args, f"gibbs policy: J={fmt(fe.free_energy)} entropy={fmt(fe.entropy)} "
               f"expected_reward={fmt(fe.expected_reward)} -> {out / 'gibbs.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None, help="directory for output files")
    common.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    parser = argparse.ArgumentParser(prog="policyflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"policyflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--stride", type=int, default=None, help="record every k-th step")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", parents=[common], help="run configs and compare terminal measures")
    p.add_argument("configs", nargs="+")
    p.add_argument("--stride", type=int, default=None, help="record every k-th step")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("sinkhorn", parents=[common], help="entropic transport between two tables")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_sinkhorn)
    p = sub.add_parser("gibbs", parents=[common], help="write the closed-form optimal policy")
    p.add_argument("config")
    p.set_defaults(func=cmd_gibbs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "stride", None) is not None and args.stride < 1:
        print("error: --stride must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except StabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line harness: ``treechain <subcommand> [--config PATH] [flags]``.

Every subcommand writes ``report.json`` and its CSV tables to the output
directory. Exit status is 0 when all checks pass, 2 when a check fails and
1 on usage or configuration errors. Wall time and worker count go to a
separate ``run.json`` so that ``report.json`` depends only on config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, diagnostics as diag, oracle
from .config import ConfigError, ExperimentConfig
from .engine import CapacityError, full_tree_batch, simulate_full_tree, simulate_walk, write_generation
from .kernels import KernelError
from .limits import GeneratorSpec, LimitError, function_gap, generator_gap, make_grid
from .measures import MeasureError, format_float, integrate, EmpiricalMeasure
from .rng import VertexRngPolicy

COMMANDS = ("simulate", "lln", "martingale", "paircov", "variance", "genchk", "mrca", "oracle")
EXIT_PASS, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treechain", description="Tree-indexed Markov chain LLN experiments.")
    parser.add_argument("--version", action="version", version=f"treechain {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override master_seed (unsigned 64-bit)")
        p.add_argument("--workers", type=int, help="worker threads; results do not depend on it")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--format", choices=("csv", "json"), help="what to print on stdout")
    return parser


# -- output helpers ------------------------------------------------------------------------------


def _plain(x):
    """JSON-ready copy with numpy scalars, Fractions and non-finite floats handled."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if hasattr(x, "to_dict"):
        return _plain(x.to_dict())
    return x


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating, int, np.integer)) and not isinstance(v, bool)
                        else v for v in row])


class Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.policy = VertexRngPolicy(cfg.master_seed)
        self.checks: list[dict] = []
        self.results: dict = {}
        self.tables: list[str] = []

    def check(self, name: str, passed: bool, **detail):
        self.checks.append({"name": name, "passed": bool(passed), **detail})

    def table(self, name: str, header, rows):
        write_csv(self.out / name, header, rows)
        self.tables.append(name)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


# -- subcommands ---------------------------------------------------------------------------------


def cmd_simulate(run: Run):
    cfg = run.cfg
    kernel = cfg.make_kernel()
    k = cfg.simulate.k
    if cfg.simulate.mode == "walk":
        path = simulate_walk(kernel, cfg.x0, k, run.policy.derive("simulate/walk"))
        run.table("walk.csv", ["step", "state"], enumerate(path.states.tolist()))
        run.results["walk"] = {"steps": k, "leaf": str(path.leaf), "final": path.states[-1]}
        return
    buf = simulate_full_tree(kernel, cfg.x0, k, run.policy.derive("simulate/tree"), workers=cfg.workers,
                             cap=cfg.full_tree_cap)
    Z = EmpiricalMeasure(buf.states)
    run.results["generation"] = k
    run.results["integrals"] = {phi.name: integrate(Z, phi) for phi in cfg.phis()}
    run.table("generation.csv", ["index", "state"], enumerate(buf.states.tolist()))
    if cfg.simulate.dump:
        write_generation(run.out / f"generation_{k}.tcgb", buf, kernel.state_kind)
        run.tables.append(f"generation_{k}.tcgb")


def cmd_lln(run: Run):
    cfg = run.cfg
    rows = []
    for n in cfg.scales():
        kernel = cfg.make_kernel(n)
        law = cfg.law(kernel)
        v = diag.lln_check(kernel, cfg.x0, cfg.t, cfg.samples.m, law, cfg.thresholds.distance,
                           run.policy.derive(f"lln/n={n}"))
        run.check(f"lln n={n}", v.passed, distance=v.distance, threshold=v.threshold)
        rows.append(v.to_dict())
        if len(cfg.scales()) == 1:
            v.measure.to_csv(run.out / "leaves.csv")
            run.tables.append("leaves.csv")
    run.results["lln"] = rows
    run.table("lln.csv", ["n", "generation", "m", "distance_kind", "distance", "threshold", "passed"],
              [[r["n"], r["generation"], r["m"], r["distance_kind"], r["distance"], r["threshold"], r["passed"]]
               for r in rows])


def cmd_martingale(run: Run):
    cfg = run.cfg
    kernel = cfg.make_kernel()
    reps = cfg.samples.replicates
    out = []
    for phi in cfg.phis():
        s = diag.martingale_summary(kernel, cfg.x0, cfg.T, phi, reps, run.policy, cfg.workers, cfg.full_tree_cap)
        slack = 4 * s.final_stderr + 1e-12
        run.check(f"martingale mean {phi.name}", abs(s.final_mean) <= slack, mean=s.final_mean, bound=slack)
        entry = s.to_dict()
        path = diag.martingale_path(kernel, cfg.x0, cfg.T, run.policy.derive("martingale/path"), phi,
                                    cfg.full_tree_cap)
        run.table(f"martingale_{_slug(phi.name)}.csv", ["t", "M", "compensator", "observed"],
                  zip(path.times.tolist(), path.values.tolist(), path.compensator.tolist(), path.observed.tolist()))
        if cfg.n_list:
            decay = diag.martingale_sup_decay(kernel, phi, cfg.x0, cfg.T, cfg.n_list, reps, run.policy,
                                              cfg.workers, cfg.full_tree_cap)
            first, last = cfg.n_list[0], cfg.n_list[-1]
            run.check(f"martingale sup decay {phi.name}", decay[last] < decay[first],
                      first=decay[first], last=decay[last])
            entry["sup_decay"] = decay
            run.table(f"martingale_sup_{_slug(phi.name)}.csv", ["n", "median_sup_abs_M"], decay.items())
        out.append(entry)
    run.results["martingale"] = out


def cmd_paircov(run: Run):
    cfg = run.cfg
    rows = []
    for phi in cfg.phis():
        reports = [diag.pair_covariance(cfg.make_kernel(n), cfg.x0, cfg.t, phi, cfg.samples.pairs, run.policy,
                                        cfg.thresholds.level, cfg.thresholds.resamples, cfg.workers)
                   for n in cfg.scales()]
        mags = [abs(r.estimate) for r in reports]
        if len(reports) > 1:
            run.check(f"paircov decreasing {phi.name}", all(a > b for a, b in zip(mags, mags[1:])), estimates=mags)
        run.check(f"paircov last CI contains 0 {phi.name}", reports[-1].interval.contains(0.0))
        rows += [r.to_dict() for r in reports]
    run.results["paircov"] = rows
    run.table("paircov.csv", ["phi", "n", "generation", "estimate", "low", "high", "conditional_estimate"],
              [[r["phi"], r["n"], r["generation"], r["estimate"], r["interval"]["low"], r["interval"]["high"],
                "" if r["conditional_estimate"] is None else r["conditional_estimate"]] for r in rows])


def cmd_variance(run: Run):
    cfg = run.cfg
    kernel = cfg.make_kernel()
    rows = []
    for phi in cfg.phis():
        table = diag.variance_decay(kernel, cfg.x0, phi, cfg.t, cfg.scales(), cfg.samples.replicates, run.policy,
                                    cfg.thresholds.level, cfg.thresholds.resamples, cfg.workers, cfg.full_tree_cap)
        v = [r.variance for r in table]
        if len(v) > 1:
            run.check(f"variance decreasing {phi.name}", all(a > b for a, b in zip(v, v[1:])), variances=v)
        rows += [{"phi": phi.name, **r.to_dict()} for r in table]
    run.results["variance"] = rows
    run.table("variance.csv", ["phi", "n", "generation", "variance", "low", "high", "mean"],
              [[r["phi"], r["n"], r["generation"], r["variance"], r["interval"]["low"], r["interval"]["high"],
                r["mean"]] for r in rows])


def cmd_genchk(run: Run):
    cfg = run.cfg
    grid = make_grid(cfg.grid.min, cfg.grid.max, cfg.grid.step)
    rng = run.policy.generator("genchk")
    rows = []
    for phi in cfg.phis():
        gaps = []
        for n in cfg.scales():
            kernel = cfg.make_kernel(n)
            rep = generator_gap(kernel, phi, GeneratorSpec.for_kernel(kernel), grid, cfg.samples.budget, rng)
            fgap = function_gap(phi, phi, grid)
            gaps.append(rep.gap)
            rows.append({**rep.to_dict(), "function_gap": fgap})
            run.check(f"function gap {phi.name} n={n}", fgap == 0.0, gap=fgap)
        if len(gaps) > 1:
            run.check(f"generator gap non-increasing {phi.name}",
                      all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:])), gaps=gaps)
    run.results["genchk"] = rows
    run.table("genchk.csv", ["phi", "family", "n", "grid_min", "grid_max", "grid_step", "gap", "function_gap"],
              [[r["phi"], r["family"], r["n"], r["grid_min"], r["grid_max"],
                "" if r["grid_step"] is None else r["grid_step"], r["gap"], r["function_gap"]] for r in rows])


def cmd_mrca(run: Run):
    cfg = run.cfg
    reports = []
    for k in cfg.mrca.k_list:
        r = diag.mrca_depth_test(k, cfg.mrca.pairs, run.policy.generator(f"mrca/k={k}"), cfg.thresholds.significance)
        run.check(f"mrca k={k}", r.passed, p_value=r.p_value)
        reports.append(r.to_dict())
    run.results["mrca"] = reports
    run.table("mrca.csv", ["k", "depth", "observed", "expected"],
              [[r["k"], j, o, e] for r in reports for j, (o, e) in enumerate(zip(r["observed"], r["expected"]))])


def cmd_oracle(run: Run):
    cfg = run.cfg
    kernel = cfg.make_kernel()
    k = cfg.oracle.k
    reps = cfg.samples.replicates
    states = full_tree_batch(kernel, cfg.x0, k, run.policy.replicate_hashes("oracle", reps), cap=cfg.full_tree_cap)
    rows = []
    for phi in cfg.phis():
        enum = oracle.expected_integral(kernel, cfg.x0, k, phi)
        walk = oracle.walk_expectation(kernel, cfg.x0, k, phi)
        vals = np.mean(np.asarray(phi(states), dtype=float), axis=1)
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        row = {"phi": phi.name, "k": k, "enumerated": enum, "walk_law": walk, "simulated_mean": mean,
               "simulated_stderr": se}
        run.check(f"oracle enumeration = walk law {phi.name}", enum == walk)
        run.check(f"oracle simulation {phi.name}", abs(mean - float(enum)) <= 4 * se + 1e-12,
                  difference=mean - float(enum), stderr=se)
        if k <= 3:
            d = oracle.second_moment_decomposition(kernel, cfg.x0, k, phi)
            row["second_moment"] = d.lhs
            row["decomposition_rhs"] = d.rhs
            run.check(f"oracle decomposition {phi.name}", d.gap == 0)
        rows.append(row)
    run.results["oracle"] = rows
    run.table("oracle.csv", ["phi", "k", "enumerated", "walk_law", "simulated_mean", "simulated_stderr"],
              [[r["phi"], r["k"], str(r["enumerated"]), str(r["walk_law"]), r["simulated_mean"],
                r["simulated_stderr"]] for r in rows])


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_")


HANDLERS = {
    "simulate": cmd_simulate, "lln": cmd_lln, "martingale": cmd_martingale, "paircov": cmd_paircov,
    "variance": cmd_variance, "genchk": cmd_genchk, "mrca": cmd_mrca, "oracle": cmd_oracle,
}


def report_dict(command: str, run: Run) -> dict:
    echo = run.cfg.to_dict()
    echo.pop("workers")
    echo.pop("output")
    return _plain({
        "command": command,
        "version": f"v{__version__}",
        "config": echo,
        "results": run.results,
        "checks": run.checks,
        "passed": run.passed,
        "tables": run.tables,
    })


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        data = cfg.to_dict()
        if args.seed is not None:
            data["master_seed"] = args.seed
        if args.workers is not None:
            data["workers"] = args.workers
        if args.out is not None:
            data["output"]["dir"] = str(args.out)
        if args.format is not None:
            data["output"]["format"] = args.format
        cfg = ExperimentConfig.from_dict(data)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"treechain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    start = time.perf_counter()
    try:
        HANDLERS[args.command](run)
    except (CapacityError, KernelError, LimitError, MeasureError, diag.DiagnosticError, ValueError) as exc:
        print(f"treechain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = report_dict(args.command, run)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "run.json").write_text(json.dumps({"wall_time_s": time.perf_counter() - start,
                                              "workers": cfg.workers}, indent=2) + "\n")
    if cfg.output.format == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["check", "passed"])
        for c in run.checks:
            writer.writerow([c["name"], c["passed"]])
    return EXIT_PASS if run.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``fairbandit {run,sweep,report,oracle}``.

Exit codes: 0 success, 1 configuration error, 2 some runs failed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .harness import (
    AggregateReport,
    ExperimentSpec,
    aggregate,
    config_from_json,
    default_output_dir,
    discover_runs,
    emit_aggregate,
    run_monte_carlo,
    run_paths,
)
from .model import FAMILIES
from .oracle import maxmin_exact, min_gap
from .sim import ENGINES, GENERATORS

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

# flag -> SimulationConfig field
_OVERRIDES = {
    "generator": "generator",
    "family": "family",
    "L": "L",
    "epochs": "epochs",
    "beta": "beta",
    "skip_ordering": "skip_ordering",
    "seed": "seed",
    "c3_divisor": "c3_exponent_divisor",
    "exploitation_base": "exploitation_base",
    "exploration_rule": "exploration_rule",
    "max_threshold_tests": "max_threshold_tests",
    "checkpoint_stride": "checkpoint_stride",
    "max_slots": "max_slots",
    "engine": "engine",
}
_EXPERIMENT_KEYS = ("n_runs", "n_agents", "fit_fraction", "workers")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not partial failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_args(p: argparse.ArgumentParser, sweep: bool) -> None:
    g = p.add_argument_group("simulation (override --config)")
    g.add_argument("--config", type=Path, help="JSON config, run manifest or sweep summary")
    if sweep:
        g.add_argument("--n-agents", type=int, nargs="+", dest="n_agents", help="N values to sweep")
    else:
        g.add_argument("--n-agents", type=int, dest="n_agents")
    g.add_argument("--generator", choices=GENERATORS)
    g.add_argument("--means", type=Path, help="matrix file; implies --generator explicit")
    g.add_argument("--family", choices=FAMILIES)
    g.add_argument("--L", type=int, dest="L")
    g.add_argument("--epochs", type=int)
    g.add_argument("--beta", type=int)
    g.add_argument("--skip-ordering", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--seed", type=int)
    g.add_argument("--c3-divisor", type=float)
    g.add_argument("--exploitation-base", type=float, help="fixed exploitation growth base in (1, 2]")
    g.add_argument("--exploration-rule", choices=("formula", "pseudocode"))
    g.add_argument("--max-threshold-tests", type=int)
    g.add_argument("--checkpoint-stride", type=int)
    g.add_argument("--max-slots", type=int)
    g.add_argument("--engine", choices=ENGINES)
    o = p.add_argument_group("output")
    o.add_argument("--output", "-o", type=Path, help="output directory (default $FAIRBANDIT_OUTPUT_DIR or ./fairbandit-out)")
    o.add_argument("--force", action="store_true", help="recompute and overwrite existing files")
    o.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fairbandit", description="Max-min fair multi-player bandit simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one simulation")
    _add_config_args(run, sweep=False)

    sweep = sub.add_parser("sweep", help="Monte-Carlo runs over seeds and N")
    _add_config_args(sweep, sweep=True)
    sweep.add_argument("--n-runs", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--fit-fraction", type=float, help="trailing share of checkpoints in the log-T fit")

    rep = sub.add_parser("report", help="recompute aggregates from run files")
    rep.add_argument("directory", type=Path, nargs="?")
    rep.add_argument("--fit-fraction", type=float)
    rep.add_argument("--force", action="store_true")
    rep.add_argument("--figures", action="store_true")

    ora = sub.add_parser("oracle", help="max-min value, assignment and gap of a matrix")
    ora.add_argument("matrix", type=Path, help="JSON (list of rows, or {'means': ...}) or delimited text")
    return p


def load_matrix(path: Path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    if path.suffix == ".json":
        obj = json.loads(text)
        if isinstance(obj, dict):
            obj = obj.get("means")
        m = np.asarray(obj, dtype=float)
    else:
        m = np.loadtxt(path, delimiter="," if "," in text else None, ndmin=2)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.size == 0:
        raise ConfigError(f"{path}: expected a square matrix, got shape {m.shape}")
    return m


def _load_config_file(path: Path | None) -> tuple[dict[str, Any], dict[str, Any]]:
    """Split a config file into (simulation fields, experiment fields)."""
    if path is None:
        return {}, {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if isinstance(obj.get("experiment"), dict):  # sweep summary
        obj = obj["experiment"]
    if isinstance(obj.get("base"), dict):  # experiment dict
        exp = {k: obj[k] for k in _EXPERIMENT_KEYS if k in obj}
        return obj["base"], exp
    if isinstance(obj.get("config"), dict):  # run manifest
        return obj["config"], {}
    exp = {k: obj.pop(k) for k in _EXPERIMENT_KEYS if k in obj and k != "n_agents"}
    return obj, exp


def _spec_from_args(args, sweep: bool) -> ExperimentSpec:
    base, exp = _load_config_file(args.config)
    for flag, name in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[name] = v
    if args.means is not None:
        base["generator"] = "explicit"
        try:
            base["means"] = load_matrix(args.means).tolist()
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    sizes = exp.pop("n_agents", None)
    if args.n_agents is not None:
        sizes = args.n_agents
    if isinstance(sizes, int):
        sizes = [sizes]
    if sizes and not sweep and len(sizes) != 1:
        raise ConfigError("run takes a single N")
    if sizes:
        base["n_agents"] = sizes[0]
    if base.get("generator") == "explicit":
        base.pop("n_agents", None)  # the matrix decides
        sizes = None
    try:
        cfg = config_from_json(base)
        kw = dict(exp)
        if sweep:
            for k in ("n_runs", "workers", "fit_fraction"):
                if getattr(args, k) is not None:
                    kw[k] = getattr(args, k)
        else:
            kw = {"n_runs": 1}
        return ExperimentSpec(
            base=cfg,
            n_agents=tuple(sizes) if (sweep and sizes) else None,
            output_dir=args.output or default_output_dir(),
            force=args.force,
            **kw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _fit_table(report: AggregateReport) -> str:
    lines = ["N,runs,checkpoints,slope,intercept,r2,final_median"]
    for n, s in sorted(report.per_n.items()):
        f = s.fit
        fit = f"{f.slope!r},{f.intercept!r},{f.r_squared!r}" if f else ",,"
        lines.append(f"{n},{s.runs},{len(s.T)},{fit},{s.final_median!r}")
    return "\n".join(lines)


def _figures(out: Path) -> None:
    from .plotting import render_figures

    for p in render_figures(out):
        print(f"# figure {p}", file=sys.stderr)


def _cmd_run(args) -> int:
    spec = _spec_from_args(args, sweep=False)
    report, outcomes = run_monte_carlo(spec)
    o = outcomes[0]
    if o.status == "failed":
        print(f"run failed: {o.error}", file=sys.stderr)
        return EXIT_PARTIAL
    n = spec.base.n_agents
    csv_path, man_path = run_paths(spec.output_dir, n, 0)
    man = json.loads(man_path.read_text(encoding="utf-8"))
    epochs = man["epochs"]
    print("key,value")
    print(f"N,{n}")
    print(f"seed,{man['seed']}")
    print(f"rho_star,{man['rho_star']!r}")
    print(f"total_slots,{man['total_slots']}")
    print(f"final_regret,{man['final_regret']!r}")
    print(f"epochs,{len(epochs)}")
    print(f"matched_optimal_epochs,{sum(e['matched_optimal'] for e in epochs)}")
    print(f"truncated,{man['truncated']}")
    print(f"trace,{csv_path}")
    print(f"manifest,{man_path}")
    if args.figures:
        _figures(spec.output_dir)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = _spec_from_args(args, sweep=True)
    total = spec.n_runs * len(spec.sizes)
    done = [0]
    start = time.perf_counter()

    def progress(o):
        done[0] += 1
        if o.status == "failed":
            print(f"# N={o.n} run {o.index} failed: {o.error}", file=sys.stderr)
        if done[0] % max(1, total // 20) == 0 or done[0] == total:
            print(f"# {done[0]}/{total} runs ({time.perf_counter() - start:.1f}s)", file=sys.stderr)

    report, outcomes = run_monte_carlo(spec, progress)
    print(_fit_table(report))
    if args.figures:
        _figures(spec.output_dir)
    if report.failed:
        idx = ", ".join(f"N={n}:{i}" for n, i, _ in report.failed)
        print(f"# {len(report.failed)} failed runs: {idx}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _cmd_report(args) -> int:
    out = args.directory or default_output_dir()
    if not out.is_dir():
        raise ConfigError(f"{out} is not a directory")
    spec, frac = None, 0.5
    summary = out / "summary.json"
    if summary.exists():
        old = json.loads(summary.read_text(encoding="utf-8"))
        spec, frac = old.get("experiment"), old.get("fit_fraction", frac)
        failed = [(f["N"], f["run_index"], f["error"]) for f in old.get("failed_runs", [])]
    else:
        failed = []
    if args.fit_fraction is not None:
        frac = args.fit_fraction
    report = aggregate(out, fit_fraction=frac)
    if not report.per_n:
        raise ConfigError(f"no completed runs under {out}")
    done = {(n, i) for n, idx in discover_runs(out).items() for i in idx}
    report.failed = [f for f in failed if (f[0], f[1]) not in done]
    emit_aggregate(out, report, spec, force=args.force)
    print(_fit_table(report))
    if args.figures:
        _figures(out)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    try:
        R = load_matrix(args.matrix)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    sol = maxmin_exact(R)
    gap = min_gap(R) if R.shape[0] >= 2 else math.inf
    print("key,value")
    print(f"N,{R.shape[0]}")
    print(f"rho_star,{sol.rho_star!r}")
    print(f"assignment,{' '.join(str(a) for a in sol.assignment)}")
    print(f"gap,{gap!r}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "report": _cmd_report, "oracle": _cmd_oracle}[args.command]
    try:
        return handler(args)
    except (ConfigError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Monte-Carlo sweeps over seeds and N, result files, aggregation and log-T fits.

Layout of an output directory::

    N010/run_00000.csv             slot,cum_regret,epoch,phase
    N010/run_00000.manifest.json   full config, seed, code version, epoch records
    aggregate.csv                  N,T,median,q01,q99   (T = powers of two)
    regret_vs_logT.csv             N,T,lnT,statistic,value
    regret_vs_N.csv                N,runs,median_T,median,q01,q99   (final regret)
    summary.json                   experiment spec, per-N fits, failed runs

Aggregates are always recomputed from the run files on disk, so they do not
depend on the order (or the process) in which runs completed.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

from . import __version__
from .sim import SimulationConfig, SimulationResult, run_simulation

RUN_CSV_HEADER = ("slot", "cum_regret", "epoch", "phase")
AGGREGATE_HEADER = ("N", "T", "median", "q01", "q99")
LOGT_HEADER = ("N", "T", "lnT", "statistic", "value")
BY_N_HEADER = ("N", "runs", "median_T", "median", "q01", "q99")
QUANTILES = {"q01": 0.01, "median": 0.5, "q99": 0.99}
MIN_FIT_POINTS = 8
OUTPUT_DIR_ENV = "FAIRBANDIT_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "fairbandit-out"

_RUN_RE = re.compile(r"run_(\d+)\.csv$")


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))


# ---------------------------------------------------------------- fitting


class LogFit(NamedTuple):
    slope: float
    intercept: float
    r_squared: float


def fit_log_regret(T: Sequence[int], regret: Sequence[float]) -> LogFit:
    """Ordinary least squares of ``regret`` against ln ``T``.

    No threshold is applied; a perfectly flat series has r^2 = 1 by convention
    (zero residual), any other zero-variance case cannot occur.
    """
    if len(T) != len(regret):
        raise ValueError("T and regret must have equal length")
    if len(T) < MIN_FIT_POINTS:
        raise ValueError(f"need at least {MIN_FIT_POINTS} checkpoints, got {len(T)}")
    if any(b <= a for a, b in zip(T, T[1:])) or T[0] <= 0:
        raise ValueError("checkpoints must be positive and strictly increasing")
    x = np.array([math.log(t) for t in T])  # math.log handles ints beyond float range
    y = np.asarray(regret, dtype=float)
    xc, yc = x - x.mean(), y - y.mean()
    slope = float(xc @ yc / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    ss_tot = float(yc @ yc)
    if ss_tot == 0.0:
        return LogFit(slope, intercept, 1.0)
    return LogFit(slope, intercept, 1.0 - ss_res / ss_tot)


def last_fraction(points: Sequence, fraction: float = 0.5) -> list:
    """The trailing ``fraction`` of ``points`` (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    k = max(1, math.ceil(len(points) * fraction))
    return list(points[len(points) - k :])


# ---------------------------------------------------------------- file IO


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.ndarray):
        return _json_safe(x.tolist())
    if isinstance(x, np.generic):
        return _json_safe(x.item())
    return x


def _json_text(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_text(path: Path, text: str, force: bool = False) -> bool:
    """Write UTF-8 with LF endings. Returns True if the file changed.

    An existing file with identical bytes is left alone; a different one is
    only replaced when ``force`` is set.
    """
    path = Path(path)
    data = text.encode("utf-8")
    if path.exists():
        if path.read_bytes() == data:
            return False
        if not force:
            raise FileExistsError(f"{path} exists with different content (use force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return True


def run_csv_text(result: SimulationResult) -> str:
    rows = ((c.slot, float(c.cum_regret), c.epoch, c.phase) for c in result.trace.checkpoints)
    return _csv_text(RUN_CSV_HEADER, rows)


def run_manifest(result: SimulationResult, run_index: int = 0) -> dict[str, Any]:
    """Everything needed to reproduce and audit one run; no wall-clock data."""
    return {
        "version": __version__,
        "run_index": run_index,
        "seed": result.config.seed,
        "config": result.config.to_dict(),
        "means": result.means,
        "rho_star": result.rho_star,
        "optimal_assignment": result.optimal_assignment,
        "order": result.order,
        "ordering_slots": result.ordering_slots,
        "total_slots": result.total_slots,
        "final_regret": result.final_regret,
        "truncated": result.truncated,
        "epochs": [dataclasses.asdict(r) for r in result.epochs],
    }


def run_paths(out: Path, n: int, index: int) -> tuple[Path, Path]:
    d = Path(out) / f"N{n:03d}"
    return d / f"run_{index:05d}.csv", d / f"run_{index:05d}.manifest.json"


def config_from_json(obj: dict[str, Any]) -> SimulationConfig:
    """Accept a bare config dict or a run manifest (which nests it under "config")."""
    if "config" in obj and isinstance(obj["config"], dict):
        obj = obj["config"]
    return SimulationConfig.from_dict(dict(obj))


def emit_run(out: Path, result: SimulationResult, run_index: int = 0, force: bool = False) -> tuple[Path, Path]:
    csv_path, man_path = run_paths(out, result.config.n_agents, run_index)
    write_text(csv_path, run_csv_text(result), force)
    write_text(man_path, _json_text(run_manifest(result, run_index)), force)
    return csv_path, man_path


def read_run_csv(path: Path) -> list[tuple[int, float, int, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != RUN_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(int(s), float(c), int(e), p) for s, c, e, p in r]


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentSpec:
    base: SimulationConfig = field(default_factory=SimulationConfig)
    n_runs: int = 100
    n_agents: tuple[int, ...] | None = None  # None: just base.n_agents
    output_dir: Path = field(default_factory=default_output_dir)
    workers: int = 1
    force: bool = False
    fit_fraction: float = 0.5  # trailing share of power-of-two checkpoints used by the fit

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if self.n_agents is not None:
            self.n_agents = tuple(int(n) for n in self.n_agents)
        self.validate()

    def validate(self) -> None:
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 < self.fit_fraction <= 1:
            raise ValueError("fit_fraction must be in (0, 1]")
        if self.base.seed + self.n_runs - 1 >= 2**64:
            raise ValueError("base seed + run index overflows 64 bits")
        for n in self.sizes:
            self.config(n, 0)

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.n_agents if self.n_agents else (self.base.n_agents,)

    def config(self, n: int, run_index: int) -> SimulationConfig:
        if self.base.generator == "explicit" and n != self.base.n_agents:
            raise ValueError("an explicit means matrix fixes N; cannot sweep n_agents")
        return dataclasses.replace(self.base, n_agents=n, seed=self.base.seed + run_index)

    def to_dict(self) -> dict[str, Any]:
        return {
            "base": self.base.to_dict(),
            "n_runs": self.n_runs,
            "n_agents": list(self.sizes),
            "fit_fraction": self.fit_fraction,
        }


class RunOutcome(NamedTuple):
    n: int
    index: int
    status: str  # "done", "skipped" or "failed"
    error: str = ""
    wall_time: float = 0.0


@dataclass
class NSummary:
    n: int
    runs: int
    T: list[int]
    median: list[float]
    q01: list[float]
    q99: list[float]
    fit: LogFit | None
    final_T_median: float
    final_median: float
    final_q01: float
    final_q99: float


@dataclass
class AggregateReport:
    per_n: dict[int, NSummary]
    failed: list[tuple[int, int, str]] = field(default_factory=list)
    fit_fraction: float = 0.5

    def fit(self, n: int) -> LogFit | None:
        return self.per_n[n].fit


def _is_complete(cfg: SimulationConfig, out: Path, index: int) -> bool:
    csv_path, man_path = run_paths(out, cfg.n_agents, index)
    if not (csv_path.exists() and man_path.exists()):
        return False
    try:
        saved = config_from_json(json.loads(man_path.read_text(encoding="utf-8")))
    except (ValueError, TypeError):
        return False
    if saved != cfg:
        raise FileExistsError(f"{man_path} was produced by a different config")
    return True


def _execute(cfg: SimulationConfig, out: Path, index: int, force: bool) -> RunOutcome:
    try:
        if not force and _is_complete(cfg, out, index):
            return RunOutcome(cfg.n_agents, index, "skipped")
        result = run_simulation(cfg)
        emit_run(out, result, index, force)
        return RunOutcome(cfg.n_agents, index, "done", wall_time=result.wall_time)
    except Exception as exc:  # reported per run, the sweep carries on
        return RunOutcome(cfg.n_agents, index, "failed", f"{type(exc).__name__}: {exc}")


def run_monte_carlo(spec: ExperimentSpec, progress=None) -> tuple[AggregateReport, list[RunOutcome]]:
    """Run (or resume) every (N, run index) pair, then aggregate from disk.

    ``progress`` is an optional callable receiving each ``RunOutcome``.
    """
    spec.validate()
    out = spec.output_dir
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec.config(n, i), out, i, spec.force) for n in spec.sizes for i in range(spec.n_runs)]
    outcomes: list[RunOutcome] = []
    if spec.workers == 1:
        for job in jobs:
            outcomes.append(_execute(*job))
            if progress:
                progress(outcomes[-1])
    else:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for o in pool.map(_execute, *zip(*jobs)):
                outcomes.append(o)
                if progress:
                    progress(o)
    failed = [(o.n, o.index, o.error) for o in outcomes if o.status == "failed"]
    bad = {(n, i) for n, i, _ in failed}
    indices = {n: [i for i in range(spec.n_runs) if (n, i) not in bad] for n in spec.sizes}
    report = aggregate(out, indices, spec.fit_fraction)
    report.failed = failed
    emit_aggregate(out, report, spec.to_dict(), force=spec.force)
    return report, outcomes


# ---------------------------------------------------------------- aggregation


def _is_pow2(t: int) -> bool:
    return t > 0 and t & (t - 1) == 0


def discover_runs(out: Path) -> dict[int, list[int]]:
    """Run indices with both files present, per N."""
    found: dict[int, list[int]] = {}
    for d in sorted(Path(out).glob("N[0-9]*")):
        n = int(d.name[1:])
        for p in sorted(d.glob("run_*.csv")):
            m = _RUN_RE.search(p.name)
            if m and p.with_name(p.stem + ".manifest.json").exists():
                found.setdefault(n, []).append(int(m.group(1)))
    return found


def aggregate(out: Path, indices: dict[int, list[int]] | None = None, fit_fraction: float = 0.5) -> AggregateReport:
    """Quantiles at power-of-two slots up to the shortest run, plus the log-T fit.

    The fit uses the trailing ``fit_fraction`` of those checkpoints; it is
    omitted (None) when fewer than the minimum number of points remain.
    """
    out = Path(out)
    if indices is None:
        indices = discover_runs(out)
    per_n = {}
    qs = list(QUANTILES.values())
    for n in sorted(indices):
        series, finals, final_T = [], [], []
        for i in sorted(indices[n]):
            csv_path, _ = run_paths(out, n, i)
            rows = read_run_csv(csv_path)
            series.append({s: c for s, c, _, _ in rows if _is_pow2(s)})
            final_T.append(rows[-1][0])
            finals.append(rows[-1][1])
        if not series:
            continue
        t_end = min(final_T)
        grid = sorted(t for t in series[0] if t <= t_end and all(t in s for s in series))
        vals = np.array([[s[t] for t in grid] for s in series]).reshape(len(series), len(grid))
        q01, med, q99 = (np.quantile(vals, q, axis=0).tolist() for q in qs) if grid else ([], [], [])
        window = last_fraction(range(len(grid)), fit_fraction) if grid else []
        fit = None
        if len(window) >= MIN_FIT_POINTS:
            fit = fit_log_regret([grid[k] for k in window], [med[k] for k in window])
        fq01, fmed, fq99 = (float(np.quantile(finals, q)) for q in qs)
        per_n[n] = NSummary(
            n=n,
            runs=len(series),
            T=grid,
            median=med,
            q01=q01,
            q99=q99,
            fit=fit,
            final_T_median=float(np.median(np.array(final_T, dtype=float))),
            final_median=fmed,
            final_q01=fq01,
            final_q99=fq99,
        )
    return AggregateReport(per_n, fit_fraction=fit_fraction)


def aggregate_csv_text(report: AggregateReport) -> str:
    rows = (
        (n, t, s.median[k], s.q01[k], s.q99[k])
        for n, s in sorted(report.per_n.items())
        for k, t in enumerate(s.T)
    )
    return _csv_text(AGGREGATE_HEADER, rows)


def logt_csv_text(report: AggregateReport) -> str:
    rows = []
    for n, s in sorted(report.per_n.items()):
        for k, t in enumerate(s.T):
            for name in ("median", "q01", "q99"):
                rows.append((n, t, math.log(t), name, getattr(s, name)[k]))
    return _csv_text(LOGT_HEADER, rows)


def by_n_csv_text(report: AggregateReport) -> str:
    rows = (
        (n, s.runs, s.final_T_median, s.final_median, s.final_q01, s.final_q99)
        for n, s in sorted(report.per_n.items())
    )
    return _csv_text(BY_N_HEADER, rows)


def summary_dict(report: AggregateReport, spec: dict[str, Any] | None = None) -> dict[str, Any]:
    return {
        "version": __version__,
        "experiment": spec,
        "fit_fraction": report.fit_fraction,
        "per_n": {
            str(n): {
                "runs": s.runs,
                "checkpoints": len(s.T),
                "fit": s.fit._asdict() if s.fit else None,
                "final_median": s.final_median,
            }
            for n, s in sorted(report.per_n.items())
        },
        "failed_runs": [{"N": n, "run_index": i, "error": e} for n, i, e in report.failed],
    }


def emit_aggregate(out: Path, report: AggregateReport, spec: dict[str, Any] | None = None, force: bool = False) -> list[Path]:
    out = Path(out)
    files = {
        "aggregate.csv": aggregate_csv_text(report),
        "regret_vs_logT.csv": logt_csv_text(report),
        "regret_vs_N.csv": by_n_csv_text(report),
        "summary.json": _json_text(summary_dict(report, spec)),
    }
    for name, text in files.items():
        write_text(out / name, text, force)
    return [out / name for name in files]

"""Optional figures rendered from the plot-ready CSVs. Needs matplotlib.

matplotlib is imported lazily so the rest of the package never depends on it.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("figures need matplotlib: pip install matplotlib (or the [plot] extra)") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _read(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def plot_regret_vs_logT(out: Path, dest: Path | None = None) -> Path:
    """Median cumulative regret against T on a log axis with a 1%-99% band, one line per N."""
    plt = _pyplot()
    out = Path(out)
    series = defaultdict(lambda: defaultdict(dict))
    for row in _read(out / "regret_vs_logT.csv"):
        series[int(row["N"])][row["statistic"]][int(row["T"])] = float(row["value"])
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for n in sorted(series):
        s = series[n]
        T = sorted(s["median"])
        x = [float(t) for t in T]
        line, = ax.plot(x, [s["median"][t] for t in T], label=f"N={n}")
        ax.fill_between(x, [s["q01"][t] for t in T], [s["q99"][t] for t in T], color=line.get_color(), alpha=0.2, lw=0)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("T (slots)")
    ax.set_ylabel("cumulative regret")
    ax.legend(frameon=False)
    fig.tight_layout()
    dest = Path(dest) if dest else out / "regret_vs_logT.png"
    fig.savefig(dest, dpi=150)
    plt.close(fig)
    return dest


def plot_regret_vs_N(out: Path, dest: Path | None = None) -> Path:
    """Final cumulative regret against N (log-log) with 1%-99% error bars."""
    plt = _pyplot()
    out = Path(out)
    rows = sorted(_read(out / "regret_vs_N.csv"), key=lambda r: int(r["N"]))
    n = [int(r["N"]) for r in rows]
    med = [float(r["median"]) for r in rows]
    lo = [m - float(r["q01"]) for m, r in zip(med, rows)]
    hi = [float(r["q99"]) - m for m, r in zip(med, rows)]
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.errorbar(n, med, yerr=[lo, hi], marker="o", capsize=3)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("N (agents)")
    ax.set_ylabel("final cumulative regret")
    fig.tight_layout()
    dest = Path(dest) if dest else out / "regret_vs_N.png"
    fig.savefig(dest, dpi=150)
    plt.close(fig)
    return dest


def render_figures(out: Path) -> list[Path]:
    return [plot_regret_vs_logT(out), plot_regret_vs_N(out)]

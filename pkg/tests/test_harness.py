import json
import math

import numpy as np
import pytest

from fairbandit.harness import (
    AGGREGATE_HEADER,
    RUN_CSV_HEADER,
    ExperimentSpec,
    aggregate,
    config_from_json,
    emit_run,
    fit_log_regret,
    last_fraction,
    read_run_csv,
    run_csv_text,
    run_monte_carlo,
    run_paths,
    write_text,
)
from fairbandit.sim import SimulationConfig, run_simulation

BASE = SimulationConfig(n_agents=2, generator="latin", epochs=24, L=10, seed=40)


def spec(tmp_path, name="out", **kw):
    kw.setdefault("n_runs", 2)
    return ExperimentSpec(base=kw.pop("base", BASE), output_dir=tmp_path / name, **kw)


def test_fit_exact_line():
    T = [2**j for j in range(3, 20)]
    f = fit_log_regret(T, [5 * math.log(t) + 3 for t in T])
    assert abs(f.slope - 5) < 1e-9 and abs(f.intercept - 3) < 1e-9 and abs(f.r_squared - 1) < 1e-9


def test_fit_constant_and_linear_in_t():
    T = [2**j for j in range(10)]
    f = fit_log_regret(T, [7.0] * 10)
    assert f.slope == 0 and f.intercept == pytest.approx(7.0)
    g = fit_log_regret(T, [float(t) for t in T])
    assert 0 < g.r_squared < 0.95  # reported, not thresholded


def test_fit_huge_slots():
    T = [2**j for j in range(100, 140)]
    f = fit_log_regret(T, [2.0 * math.log(t) for t in T])
    assert f.slope == pytest.approx(2.0) and f.r_squared == pytest.approx(1.0)


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_log_regret([1, 2, 3], [0, 0, 0])
    with pytest.raises(ValueError):
        fit_log_regret([1, 2, 3, 4, 5, 6, 7, 7], [0] * 8)
    with pytest.raises(ValueError):
        fit_log_regret([1] * 8, [0] * 7)


def test_last_fraction():
    assert last_fraction(range(10)) == [5, 6, 7, 8, 9]
    assert last_fraction(range(5)) == [2, 3, 4]
    assert last_fraction([1], 0.5) == [1]


def test_write_text_policy(tmp_path):
    p = tmp_path / "a.csv"
    assert write_text(p, "x\n")
    assert not write_text(p, "x\n")  # identical bytes: no-op
    with pytest.raises(FileExistsError):
        write_text(p, "y\n")
    assert write_text(p, "y\n", force=True)
    assert p.read_bytes() == b"y\n"


def test_one_run_files_and_golden_header(tmp_path):
    r = run_simulation(BASE)
    csv_path, man_path = emit_run(tmp_path, r)
    files = sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*") if p.is_file())
    assert files == ["N002/run_00000.csv", "N002/run_00000.manifest.json"]
    data = csv_path.read_bytes()
    assert data.startswith(b"slot,cum_regret,epoch,phase\n")
    assert b"\r" not in data
    data.decode("utf-8")
    man = json.loads(man_path.read_text())
    assert man["seed"] == BASE.seed and man["version"] and man["config"] == BASE.to_dict()
    rows = read_run_csv(csv_path)
    assert rows[-1][0] == r.total_slots and rows[-1][1] == r.final_regret


def test_reemit_identical_bytes(tmp_path):
    r = run_simulation(BASE)
    c, m = emit_run(tmp_path, r)
    before = (c.read_bytes(), m.read_bytes())
    emit_run(tmp_path, run_simulation(BASE), force=True)
    assert (c.read_bytes(), m.read_bytes()) == before
    other = run_simulation(SimulationConfig(**{**BASE.to_dict(), "epochs": 25}))
    with pytest.raises(FileExistsError):
        emit_run(tmp_path, other)


def test_same_seeds_same_outputs(tmp_path):
    run_monte_carlo(spec(tmp_path, "a"))
    run_monte_carlo(spec(tmp_path, "b"))
    a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a_files == b_files
    for f in a_files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seeds_are_base_plus_index(tmp_path):
    run_monte_carlo(spec(tmp_path, n_runs=3))
    for i in range(3):
        _, m = run_paths(tmp_path / "out", 2, i)
        assert json.loads(m.read_text())["seed"] == BASE.seed + i


def test_sweep_sections_and_aggregate(tmp_path):
    report, outcomes = run_monte_carlo(spec(tmp_path, n_runs=3, n_agents=(2, 4), fit_fraction=1.0))
    assert sorted(report.per_n) == [2, 4]
    assert all(o.status == "done" for o in outcomes)
    out = tmp_path / "out"
    text = (out / "aggregate.csv").read_text()
    assert text.splitlines()[0] == ",".join(AGGREGATE_HEADER)
    assert {line.split(",")[0] for line in text.splitlines()[1:]} == {"2", "4"}
    for n, s in report.per_n.items():
        # independent recomputation of the quantiles from the raw files
        runs = [dict((r[0], r[1]) for r in read_run_csv(run_paths(out, n, i)[0])) for i in range(3)]
        for k, t in enumerate(s.T):
            assert t & (t - 1) == 0
            vals = [r[t] for r in runs]
            assert s.median[k] == np.median(vals)
            assert s.q01[k] == pytest.approx(np.percentile(vals, 1))
            assert s.q99[k] == pytest.approx(np.percentile(vals, 99))
        assert s.fit is not None
    logt = (out / "regret_vs_logT.csv").read_text().splitlines()
    assert logt[0] == "N,T,lnT,statistic,value"
    by_n = (out / "regret_vs_N.csv").read_text().splitlines()
    assert by_n[0] == "N,runs,median_T,median,q01,q99" and len(by_n) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["per_n"]) == {"2", "4"} and summary["failed_runs"] == []


def test_resume_is_noop_and_fills_gaps(tmp_path):
    s = spec(tmp_path, n_runs=3)
    run_monte_carlo(s)
    csv0, _ = run_paths(s.output_dir, 2, 0)
    csv1, man1 = run_paths(s.output_dir, 2, 1)
    mtime = csv0.stat().st_mtime_ns
    content = csv1.read_bytes()
    csv1.unlink()
    man1.unlink()
    _, outcomes = run_monte_carlo(s)
    assert [o.status for o in outcomes] == ["skipped", "done", "skipped"]
    assert csv0.stat().st_mtime_ns == mtime
    assert csv1.read_bytes() == content


def test_failed_runs_reported_without_abort(tmp_path):
    s = spec(tmp_path, n_runs=3)
    bad_csv, _ = run_paths(s.output_dir, 2, 1)
    bad_csv.mkdir(parents=True)  # a directory where the file should go
    report, outcomes = run_monte_carlo(s)
    assert [o.status for o in outcomes] == ["done", "failed", "done"]
    assert [(n, i) for n, i, _ in report.failed] == [(2, 1)]
    assert report.per_n[2].runs == 2
    summary = json.loads((s.output_dir / "summary.json").read_text())
    assert summary["failed_runs"][0]["run_index"] == 1


def test_changed_config_is_not_silently_reused(tmp_path):
    run_monte_carlo(spec(tmp_path))
    s2 = spec(tmp_path, base=SimulationConfig(**{**BASE.to_dict(), "L": 11}))
    with pytest.raises(FileExistsError):
        run_monte_carlo(s2)  # runs fail, then aggregates refuse to change without force
    _, outcomes = run_monte_carlo(ExperimentSpec(base=s2.base, n_runs=2, output_dir=s2.output_dir, force=True))
    assert all(o.status == "done" for o in outcomes)


def test_manifest_roundtrip(tmp_path):
    run_monte_carlo(spec(tmp_path))
    csv_path, man_path = run_paths(tmp_path / "out", 2, 1)
    cfg = config_from_json(json.loads(man_path.read_text()))
    assert run_csv_text(run_simulation(cfg)) == csv_path.read_text()


def test_aggregate_invariant_to_execution_order(tmp_path):
    run_monte_carlo(spec(tmp_path, "serial", n_runs=4, n_agents=(2, 3)))
    run_monte_carlo(spec(tmp_path, "pool", n_runs=4, n_agents=(2, 3), workers=2))
    for name in ("aggregate.csv", "regret_vs_logT.csv", "regret_vs_N.csv"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pool" / name).read_bytes()
    shuffled = aggregate(tmp_path / "serial", {2: [3, 1, 0, 2], 3: [2, 0, 3, 1]})
    assert shuffled.per_n[2].median == aggregate(tmp_path / "serial").per_n[2].median


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        spec(tmp_path, n_runs=0)
    with pytest.raises(ValueError):
        spec(tmp_path, workers=0)
    with pytest.raises(ValueError):
        spec(tmp_path, base=SimulationConfig(generator="explicit", means=[[1.0, 2.0], [2.0, 1.0]]), n_agents=(2, 3))
    with pytest.raises(ValueError):
        spec(tmp_path, base=SimulationConfig(seed=2**64 - 1))


def test_run_csv_header_constant():
    assert ",".join(RUN_CSV_HEADER) == "slot,cum_regret,epoch,phase"

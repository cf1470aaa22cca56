"""Metrics, case plumbing, config files, report export, and the CLI."""

import json
import subprocess
import sys

import numpy as np
import pytest

from selmhe import cstr, harness
from selmhe.errors import DimensionMismatch, DomainError


SHORT = cstr.CstrScenario(steps=25, seed=0)


@pytest.fixture(scope="module")
def short_case2():
    return harness.run_case(2, seeds=(0, 1), scenario=SHORT)


def test_metric_trivia():
    truth = np.array([[2.0, -4.0], [2.5, -4.0], [1.5, -4.0]])
    perfect = harness.relative_errors(truth, truth)
    assert np.all(perfect == 0.0)
    assert harness.metric_rmse(perfect) == 0.0
    assert np.all(harness.metric_sigma(perfect) == 0.0)
    # constant 5% relative error comes back as exactly 5.00
    est = truth * 1.05
    err = harness.relative_errors(est, truth)
    assert harness.metric_sigma(err) == pytest.approx([5.0, 5.0])
    assert harness.metric_rmse(err) == pytest.approx(5.0)
    series = harness.metric_rmse_series(err)
    assert series == pytest.approx([5.0, 5.0, 5.0])


def test_metric_zero_truth_rejected():
    with pytest.raises(DomainError):
        harness.relative_errors(np.ones((2, 2)), np.array([[1.0, 0.0],
                                                           [1.0, 1.0]]))


def test_metric_subset_identity():
    rng = np.random.default_rng(0)
    err = rng.standard_normal((40, 11)) * 0.03
    full = harness.metric_rmse_series(err)
    states = harness.metric_rmse_series(err, harness.STATE_COMPONENTS)
    params = harness.metric_rmse_series(err, harness.PARAM_COMPONENTS)
    # the pooled mean square splits over the disjoint subsets
    recombined = np.sqrt((3.0 * states ** 2 + 8.0 * params ** 2) / 11.0)
    assert np.allclose(full, recombined, rtol=1e-12)
    sigma = harness.metric_sigma(err)
    assert np.all(sigma >= 0.0)
    assert sigma == pytest.approx(100.0 * np.sqrt(np.mean(err ** 2, axis=0)))


def test_make_case_specs():
    assert harness.make_case(1).policy_mode is None
    assert harness.make_case(2).policy_mode == "cutoff"
    spec3 = harness.make_case(3)
    assert spec3.policy_mode == "forced_subset_cutoff"
    assert spec3.forced == harness.STATE_COMPONENTS
    with pytest.raises(DimensionMismatch):
        harness.make_case(4)
    assert harness.make_policy(harness.make_case(1), SHORT) is None
    policy = harness.make_policy(harness.make_case(2), SHORT)
    assert policy.process_noise_var == pytest.approx(SHORT.process_noise_rel ** 2)


def test_default_config_overrides():
    signs = np.ones(harness.N_AUG)
    cfg = harness.default_config(SHORT, signs)
    assert cfg.horizon is None
    assert cfg.rank_scale == harness.DEFAULT_RANK_SCALE
    assert np.all(cfg.state_upper - cfg.state_lower
                  == pytest.approx(2 * harness.DEFAULT_BOUND_HALF_WIDTH))
    cfg2 = harness.default_config(SHORT, signs, max_iterations=5,
                                  bound_half_width=0.1)
    assert cfg2.max_iterations == 5
    assert cfg2.state_upper[0] == pytest.approx(1.1)
    with pytest.raises(DimensionMismatch):
        harness.default_config(SHORT, signs, not_an_option=1)


def test_run_case_single_consistency(short_case2):
    result = short_case2.results[0]
    # the stored metrics recompute from the stored trajectories
    err = harness.relative_errors(result.estimates, result.truth_scaled)
    assert result.rmse_total == pytest.approx(harness.metric_rmse(err))
    assert result.rmse_states == pytest.approx(
        harness.metric_rmse(err, harness.STATE_COMPONENTS))
    assert result.rmse_params == pytest.approx(
        harness.metric_rmse(err, harness.PARAM_COMPONENTS))
    assert result.sigma == pytest.approx(harness.metric_sigma(err))
    assert result.estimates.shape == (SHORT.steps, harness.N_AUG)
    assert len(result.records) == SHORT.steps
    assert result.rmse_total >= 0.0


def test_inclusion_counts_conserved(short_case2):
    for result in short_case2.results:
        assert np.all(result.inclusion_counts >= 0)
        assert np.all(result.inclusion_counts <= SHORT.steps)
        for rec in result.records:
            assert len(rec.selection.selected) + len(rec.frozen) == harness.N_AUG
            assert set(rec.selection.selected).isdisjoint(rec.frozen)


def test_case1_has_no_selection():
    report = harness.run_case(1, seeds=(0,), scenario=SHORT)
    result = report.results[0]
    assert all(rec.selection is None for rec in result.records)
    assert all(rec.frozen == () for rec in result.records)
    assert np.all(result.inclusion_counts == SHORT.steps)


def test_run_case_median_and_representative(short_case2):
    values = [r.rmse_total for r in short_case2.results]
    import statistics
    assert short_case2.median_rmse == pytest.approx(statistics.median(values))
    gaps = [abs(v - short_case2.median_rmse) for v in values]
    rep_gap = abs(short_case2.representative.rmse_total - short_case2.median_rmse)
    assert rep_gap == pytest.approx(min(gaps))


def test_seed_determinism():
    a = harness.run_case_single(harness.make_case(2), SHORT)
    b = harness.run_case_single(harness.make_case(2), SHORT)
    assert np.array_equal(a.estimates, b.estimates)
    assert np.array_equal(a.sigma, b.sigma)
    assert np.array_equal(a.inclusion_counts, b.inclusion_counts)
    assert a.rmse_total == b.rmse_total


def test_load_config_and_scenario(tmp_path):
    path = tmp_path / "bench.ini"
    path.write_text(
        "[scenario]\n"
        "steps = 30\n"
        "seed = 7\n"
        "coolant_offset = 1.5\n"
        "balanced_flow = true\n"
        "flow_levels = 0.09,0.11\n"
        "[estimator]\n"
        "max_iterations = 12\n"
        "[selection]\n"
        "alpha = 3.0\n")
    cfg = harness.load_config(path)
    assert cfg["scenario"]["steps"] == 30
    assert cfg["scenario"]["coolant_offset"] == 1.5
    assert cfg["scenario"]["balanced_flow"] is True
    assert cfg["scenario"]["flow_levels"] == (0.09, 0.11)
    assert cfg["estimator"]["max_iterations"] == 12
    assert cfg["selection"]["alpha"] == 3.0
    scen = harness.apply_scenario_config(cfg["scenario"])
    assert scen.steps == 30 and scen.seed == 7
    assert scen.flow_levels == (0.09, 0.11)
    with pytest.raises(DimensionMismatch):
        harness.load_config(tmp_path / "missing.ini")


def test_export_report_files(tmp_path, short_case2):
    files = harness.export_report(tmp_path, short_case2)
    names = {p.name for p in files}
    assert {"report.csv", "case_table.csv", "summary.json", "trace.csv",
            "rank_trace.csv", "selection_log.csv", "estimates.svg",
            "diagnostics.svg", "inclusion.svg"} <= names
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["case"] == 2
    assert summary["median_rmse_percent"] == pytest.approx(short_case2.median_rmse)
    assert len(summary["sigma_percent"]) == harness.N_AUG
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(trace) == SHORT.steps + 1
    report_rows = (tmp_path / "report.csv").read_text().splitlines()
    assert len(report_rows) == len(short_case2.results) + 1
    svg = (tmp_path / "estimates.svg").read_text()
    assert svg.lstrip().startswith("<?xml")


def test_export_case_table_empty_and_rows(tmp_path, short_case2):
    path = tmp_path / "table.csv"
    harness.export_case_table(path, [])
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    header = lines[0].split(",")
    assert header.count("rmse_total") == 1
    assert len([h for h in header if h.startswith("sigma_")]) == harness.N_AUG
    harness.export_case_table(path, [short_case2])
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith(short_case2.spec.label + ",")


def test_sweeps_reuse_and_shape():
    scen = cstr.CstrScenario(steps=20, seed=0)
    table = harness.sweep_fixed_n(values=(3, 5), seeds=(0,), scenario=scen)
    assert set(table) == {3, 5}
    for nsel, report in table.items():
        for rec in report.results[0].records:
            assert len(rec.selection.selected) == min(
                nsel, rec.selection.n_columns)
    base = harness.run_case(2, seeds=(0,), scenario=scen)
    out = harness.sweep_alpha(values=(2.0, 4.0), seeds=(0,), scenario=scen,
                              reuse={2.0: base})
    assert out[2.0] is base
    assert out[4.0].spec.alpha == 4.0


def test_cli_run_and_diagnose(tmp_path):
    cfg = tmp_path / "quick.ini"
    cfg.write_text("[scenario]\nsteps = 20\n")
    out = tmp_path / "out"
    res = subprocess.run(
        [sys.executable, "-m", "selmhe", "run", "--case", "2", "--seed", "0",
         "--config", str(cfg), "--out", str(out)],
        capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "median RMSE" in res.stdout
    assert (out / "summary.json").exists()
    assert (out / "trace.csv").exists()

    res = subprocess.run(
        [sys.executable, "-m", "selmhe", "diagnose", "--case", "2",
         "--seed", "0", "--steps", "15", "--rank", "--out", str(out)],
        capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "rank:" in res.stdout
    assert (out / "rank_trace.csv").exists()


def test_cli_sweep(tmp_path):
    out = tmp_path / "sweep"
    res = subprocess.run(
        [sys.executable, "-m", "selmhe", "sweep", "--param", "n",
         "--values", "4,6", "--seeds", "0", "--steps", "15",
         "--out", str(out)],
        capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    table = (out / "sweep_n.csv").read_text().splitlines()
    assert table[0].startswith("n,")
    assert len(table) == 3


def test_cli_bad_case_exits_nonzero():
    res = subprocess.run(
        [sys.executable, "-m", "selmhe", "run", "--case", "9"],
        capture_output=True, text=True)
    assert res.returncode != 0

import math

import numpy as np
import pandas as pd
import pytest

from constants import BENCH_COLUMNS
from exceptions import ConfigError
from managers import EnsembleSpec, ExperimentManager


def test_effective_dof_value():
    value, se = ExperimentManager.effective_dof_value(0.25, 0.5)
    assert value == pytest.approx(2.0)
    assert se == 0.0
    assert math.isnan(ExperimentManager.effective_dof_value(1.0, 0.9)[0])
    assert math.isnan(ExperimentManager.effective_dof_value(0.5, 0.0)[0])
    _, se = ExperimentManager.effective_dof_value(0.25, 0.5, P_se=0.01, p_se=0.01)
    assert se > 0


def test_extreme_fractions(experiment_manager, ieee14):
    spec = EnsembleSpec(case=ieee14, n_samples=4, fractions=(0.0, 1.0))
    summary = experiment_manager.run_ensemble(spec).summary
    none_missing, all_missing = summary.iloc[0], summary.iloc[1]
    assert none_missing["P"] == 1.0 and none_missing["p"] == 1.0
    assert all_missing["P"] == 0.0 and all_missing["p"] == 0.0
    for row in (none_missing, all_missing):
        assert row["C"] == pytest.approx(0.0, abs=1e-12)
        assert row["M"] == pytest.approx(0.0, abs=1e-12)
        assert not row["N_eff_defined"]


def test_retrievability_bounds(experiment_manager, ieee14):
    spec = EnsembleSpec(case=ieee14, n_samples=30, fractions=(0.2,), base_seed=5)
    row = experiment_manager.run_ensemble(spec).summary.iloc[0]
    # 4 of 20 flows and 3 of 14 injections are dropped; measured items are always retrievable
    assert row["p"] >= 1.0 - 7 / 34 - 1e-12
    assert row["P"] <= row["p"]
    assert row["samples"] == 30


def test_views_read_the_cached_ensemble(experiment_manager, ieee14):
    spec = EnsembleSpec(case=ieee14, n_samples=5, fractions=(0.1, 0.3))
    first = experiment_manager.run_ensemble(spec)
    assert experiment_manager.run_ensemble(spec) is first
    assert list(experiment_manager.observability_probability(spec).columns) == [
        "flow_fraction", "injection_fraction", "samples", "P", "P_se"]
    assert len(experiment_manager.retrievability_fraction(spec)) == 2
    assert "N_eff" in experiment_manager.effective_dof(spec).columns
    assert "C_se" in experiment_manager.correlation_C(spec).columns
    assert "MC" in experiment_manager.correlation_M(spec).columns


def test_parallel_and_serial_ensembles_agree(grid_manager, ieee14):
    serial = ExperimentManager(grid_manager).run_ensemble(
        EnsembleSpec(case=ieee14, n_samples=12, fractions=(0.3,), base_seed=40, workers=1))
    parallel = ExperimentManager(grid_manager).run_ensemble(
        EnsembleSpec(case=ieee14, n_samples=12, fractions=(0.3,), base_seed=40, workers=2))
    pd.testing.assert_frame_equal(serial.summary, parallel.summary)
    pd.testing.assert_frame_equal(serial.r_profile, parallel.r_profile)


def test_fingerprint_ignores_workers(ieee14):
    first = EnsembleSpec(case=ieee14, n_samples=3, workers=1)
    second = EnsembleSpec(case=ieee14, n_samples=3, workers=4)
    assert first.fingerprint() == second.fingerprint()
    assert first.fingerprint() != EnsembleSpec(case=ieee14, n_samples=3, base_seed=1).fingerprint()


def test_retrieval_ratios_grow_with_depth(experiment_manager, ieee14):
    spec = EnsembleSpec(case=ieee14, n_samples=20, fractions=(0.3,), base_seed=3)
    profile = experiment_manager.retrieval_ratios(spec)
    assert not profile.empty
    ratios = profile["ratio"].to_numpy()
    assert np.all(np.diff(ratios) >= -1e-12)
    assert np.all(ratios <= 1.0 + 1e-12)
    assert list(profile["depth"]) == sorted(profile["depth"])


def test_variance_ratio_is_relative_to_depth_one(experiment_manager, ieee14):
    spec = EnsembleSpec(case=ieee14, n_samples=10, fractions=(0.3,), base_seed=2)
    ratios = experiment_manager.variance_ratio_by_depth(spec)
    assert not ratios.empty
    first = ratios.iloc[0]
    assert first["depth"] == 1
    assert first["ratio"] == pytest.approx(1.0)
    assert (ratios["mean_variance"] > 0).all()


def test_spec_validation(ieee14):
    with pytest.raises(ConfigError):
        EnsembleSpec(case=ieee14, n_samples=0)
    with pytest.raises(ConfigError):
        EnsembleSpec(case=ieee14, fractions=(1.2,))
    with pytest.raises(ConfigError):
        EnsembleSpec(case=ieee14, fractions=())
    assert EnsembleSpec(case=ieee14, fractions=(0.1, (0.2, 0.5))).fractions == ((0.1, 0.1), (0.2, 0.5))


def test_timing_benchmark_rows(experiment_manager, grid_manager, ieee14, chain):
    cases = [chain, grid_manager.spanning_tree(ieee14, seed=0), ieee14]
    df = experiment_manager.timing_benchmark(cases, [0.0, 0.3], repeats=1)
    assert list(df.columns) == BENCH_COLUMNS
    assert len(df) == 6
    assert (df["wls_ms"] > 0).all()
    assert list(df["lines"][::2]) == [2, 13, 20]


def test_fit_linear_scaling():
    df = pd.DataFrame({"case": ["a", "b", "c"], "fraction": [0.0] * 3, "bp_ms": [1.0, 2.0, 3.0],
                       "wls_ms": [1.0, 4.0, 9.0], "lines": [6, 12, 18], "buses": [4, 8, 12],
                       "flagged": [False] * 3})
    fit = ExperimentManager(None).fit_linear_scaling(df)
    assert fit["slope"] == pytest.approx(0.1)
    assert fit["intercept"] == pytest.approx(0.0, abs=1e-12)
    assert fit["r2"] == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        ExperimentManager(None).fit_linear_scaling(df.iloc[:2])


def test_degree_correlation_signs_under_uniform_masks(experiment_manager, ieee14):
    spec = EnsembleSpec(case=ieee14, n_samples=1000, fractions=(0.3, 0.5), base_seed=17)
    summary = experiment_manager.run_ensemble(spec).summary
    for _, row in summary.iterrows():
        assert row["C"] > 3.0 * row["C_se"]
        assert row["M"] > 0.0
        assert abs(row["MC"]) <= 3.0 * row["MC_se"]

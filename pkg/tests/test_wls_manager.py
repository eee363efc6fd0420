import math

import numpy as np
import pytest
from scipy import sparse

from conftest import SIGMA2, measurement_set
from exceptions import RetrievabilityError


def test_flows_solution_matches_dense_least_squares(factor_graph_manager, wls_manager, ieee14, scenario_manager):
    meas = scenario_manager.full_measurements(ieee14, seed=5)
    graph = factor_graph_manager.build_factor_graph(ieee14, meas)
    solution = wls_manager.wls_flows(graph)

    H = wls_manager.measurement_matrix(graph).toarray()
    scale = 1.0 / np.sqrt(graph.fac_var)
    expected, *_ = np.linalg.lstsq(H * scale[:, None], graph.fac_z * scale, rcond=None)
    np.testing.assert_allclose(solution.means, expected, rtol=0, atol=1e-8)
    assert solution.retrievable_mask.all()
    assert solution.residual == pytest.approx(wls_manager.objective(graph, expected), rel=1e-6, abs=1e-12)
    np.testing.assert_allclose(solution.covariance, solution.covariance.T, rtol=0, atol=1e-18)


def test_angle_and_flow_formulations_agree_on_trees(factor_graph_manager, wls_manager, grid_manager, ieee14,
                                                   scenario_manager):
    tree = grid_manager.spanning_tree(ieee14, seed=11)
    meas = scenario_manager.full_measurements(tree, seed=11)
    graph = factor_graph_manager.build_factor_graph(tree, meas)
    flows = wls_manager.wls_flows(graph)
    angles = wls_manager.wls_angles(tree, meas)
    np.testing.assert_allclose(angles.means, flows.means, rtol=0, atol=1e-7)
    np.testing.assert_allclose(angles.variances, flows.variances, rtol=1e-6)


def test_angle_formulation_is_at_least_as_accurate_on_loops(factor_graph_manager, wls_manager, ieee14,
                                                           scenario_manager):
    meas = scenario_manager.full_measurements(ieee14, seed=6)
    graph = factor_graph_manager.build_factor_graph(ieee14, meas)
    flows = wls_manager.wls_flows(graph)
    angles = wls_manager.wls_angles(ieee14, meas)
    assert angles.retrievable_mask.all()
    # the angle state adds loop constraints, so it never has larger posterior variance
    assert np.all(angles.variances <= flows.variances * (1 + 1e-9))
    assert wls_manager.total_squared_error(angles.means, ieee14) < 5e-2
    assert wls_manager.total_squared_error(ieee14.flows, ieee14) == 0.0


def test_unretrievable_lines_are_masked(factor_graph_manager, wls_manager, chain):
    meas = measurement_set(chain, missing_flows={1}, missing_injections={1, 2})
    graph = factor_graph_manager.build_factor_graph(chain, meas)
    solution = wls_manager.wls_flows(graph)
    assert list(solution.retrievable_mask) == [False, True]
    assert math.isnan(solution.means[0])
    assert solution.means[1] == pytest.approx(100.0)
    assert math.isnan(solution.covariance[0, 1])
    with pytest.raises(RetrievabilityError) as error:
        wls_manager.exact_covariance(graph, [1, 2])
    assert error.value.line_id == 1


def test_no_measurements_retrieve_nothing(factor_graph_manager, wls_manager, chain):
    meas = measurement_set(chain, missing_flows={1, 2}, missing_injections={1, 2, 3})
    solution = wls_manager.wls_flows(factor_graph_manager.build_factor_graph(chain, meas))
    assert not solution.retrievable_mask.any()
    assert np.isnan(solution.means).all()


def test_exact_covariance_ignores_readings(factor_graph_manager, wls_manager, ieee14, scenario_manager):
    first = factor_graph_manager.build_factor_graph(ieee14, scenario_manager.full_measurements(ieee14, seed=1))
    second = factor_graph_manager.build_factor_graph(ieee14, scenario_manager.full_measurements(ieee14, seed=2))
    lines = [3, 8, 14]
    np.testing.assert_array_equal(wls_manager.exact_covariance(first, lines),
                                  wls_manager.exact_covariance(second, lines))
    full = wls_manager.wls_flows(first).covariance
    np.testing.assert_allclose(wls_manager.exact_covariance(first, lines),
                               full[np.ix_([2, 7, 13], [2, 7, 13])], rtol=1e-12)


def test_variance_scales_with_measurement_variance(factor_graph_manager, wls_manager, ieee14, scenario_manager):
    base = scenario_manager.full_measurements(ieee14, variance=SIGMA2, seed=3)
    scaled = scenario_manager.scale_measurements(base, 2.0)
    first = wls_manager.wls_flows(factor_graph_manager.build_factor_graph(ieee14, base))
    second = wls_manager.wls_flows(factor_graph_manager.build_factor_graph(ieee14, scaled))
    np.testing.assert_allclose(second.means, 2.0 * first.means, rtol=1e-9)
    np.testing.assert_allclose(second.covariance, 4.0 * first.covariance, rtol=1e-9, atol=1e-20)


def test_sparse_solver_path(wls_manager):
    n = 600
    A = sparse.diags([-np.ones(n - 1), 4.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsc()
    b = np.linspace(-1.0, 1.0, n)
    solved = wls_manager._solve(A, b)
    assert solved.null_basis.shape == (n, 0)
    np.testing.assert_allclose(A @ solved.solution, b, rtol=0, atol=1e-10)
    np.testing.assert_allclose(solved.inverse @ A.toarray(), np.eye(n), rtol=0, atol=1e-10)


def test_singular_sparse_system_falls_back_to_eigendecomposition(wls_manager):
    n = 500
    diagonal = np.ones(n)
    diagonal[-1] = 0.0
    solved = wls_manager._solve(sparse.diags(diagonal).tocsc(), np.ones(n))
    assert solved.null_basis.shape == (n, 1)
    assert solved.solution[-1] == pytest.approx(0.0)
    assert solved.solution[0] == pytest.approx(1.0)

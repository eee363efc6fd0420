import math

import numpy as np
import pytest

from conftest import measurement_set
from constants import STRATEGY_LEAST_CONNECTED, STRATEGY_MIN_SUM_M_OVER_C, STRATEGY_UNIFORM
from exceptions import ConfigError, GridBpError


@pytest.mark.parametrize("fraction, population, expected", [
    (0.35, 10, 4),
    (0.25, 10, 3),
    (0.2, 14, 3),
    (0.3, 20, 6),
    (0.0, 20, 0),
    (1.0, 20, 20),
])
def test_missing_count_rounds_half_up(scenario_manager, fraction, population, expected):
    assert scenario_manager.missing_count(fraction, population)[0] == expected


def test_mask_sizes_and_determinism(scenario_manager, ieee14):
    mask = scenario_manager.make_mask(ieee14, 0.3, seed=8)
    assert mask.counts == (6, 4)
    assert len(mask.missing_flows) == 6 and len(mask.missing_injections) == 4
    assert mask.missing_flows <= set(ieee14.line_ids)
    assert scenario_manager.make_mask(ieee14, 0.3, seed=8) == mask
    assert scenario_manager.make_mask(ieee14, 0.3, seed=9) != mask


def test_strategies_share_the_flow_mask(scenario_manager, ieee14):
    masks = [scenario_manager.make_mask(ieee14, (0.4, 0.2), strategy, seed=3)
             for strategy in (STRATEGY_UNIFORM, STRATEGY_LEAST_CONNECTED, STRATEGY_MIN_SUM_M_OVER_C)]
    assert masks[0].missing_flows == masks[1].missing_flows == masks[2].missing_flows


def test_least_connected_drops_lowest_degree_first(scenario_manager, ieee14):
    mask = scenario_manager.make_mask(ieee14, (0.0, 3 / 14), STRATEGY_LEAST_CONNECTED, seed=0)
    assert mask.missing_injections == {8, 1, 3}
    assert mask.missing_flows == frozenset()


def test_min_sum_m_over_c_is_optimal_greedy(scenario_manager, ieee14):
    increments = scenario_manager.m_over_c_increments(ieee14)
    assert increments[8] == pytest.approx(1 / 3)
    assert increments[1] == pytest.approx(0.5)
    mask = scenario_manager.make_mask(ieee14, (0.0, 3 / 14), STRATEGY_MIN_SUM_M_OVER_C, seed=0)
    assert mask.missing_injections == {8, 3, 1}
    total = scenario_manager.m_over_c(ieee14, mask.missing_injections).sum()
    assert total == pytest.approx(sum(increments[bus_id] for bus_id in mask.missing_injections))


def test_m_over_c_values(scenario_manager, chain):
    values = scenario_manager.m_over_c(chain, {1})
    np.testing.assert_allclose(values, [0.0, 0.5, 0.0])


def test_sampled_noise_is_common_across_masks(scenario_manager, ieee14):
    empty = scenario_manager.make_mask(ieee14, 0.0)
    masked = scenario_manager.make_mask(ieee14, 0.3, seed=1)
    full = scenario_manager.sample_measurements(ieee14, empty, variance=1e-4, seed=21)
    partial = scenario_manager.sample_measurements(ieee14, masked, variance=1e-4, seed=21)
    for line_id in ieee14.line_ids:
        if line_id in masked.missing_flows:
            assert partial.flow_missing(line_id)
            assert partial.flow[line_id].z == 0.0
        else:
            assert partial.flow[line_id] == full.flow[line_id]
    for bus_id in ieee14.bus_ids:
        if bus_id not in masked.missing_injections:
            assert partial.injection[bus_id] == full.injection[bus_id]
    assert partial.seed == 21


def test_noise_has_requested_spread(scenario_manager, ieee14):
    meas = scenario_manager.full_measurements(ieee14, variance=1e-4, seed=0)
    errors = np.array([meas.flow[line.id].z - line.flow_true for line in ieee14.lines])
    assert np.all(np.abs(errors) < 0.06)
    assert meas.flow[1].variance == 1e-4


def test_sampling_requires_dc_state_and_positive_variance(scenario_manager, grid_manager, ieee14):
    raw = grid_manager.build_case("raw", {1: 0.0, 2: -0.1}, [(1, 2, 1.0)], derive=False)
    empty = scenario_manager.make_mask(raw, 0.0)
    with pytest.raises(GridBpError):
        scenario_manager.sample_measurements(raw, empty)
    with pytest.raises(ConfigError):
        scenario_manager.sample_measurements(ieee14, scenario_manager.make_mask(ieee14, 0.0), variance=0.0)


def test_invalid_fractions_and_strategy(scenario_manager, ieee14):
    with pytest.raises(ConfigError):
        scenario_manager.make_mask(ieee14, 1.5)
    with pytest.raises(ConfigError):
        scenario_manager.make_mask(ieee14, (0.1, 0.2, 0.3))
    with pytest.raises(ConfigError):
        scenario_manager.make_mask(ieee14, 0.1, strategy="Random")


def test_scale_measurements(scenario_manager, chain):
    meas = measurement_set(chain, missing_flows={2})
    scaled = scenario_manager.scale_measurements(meas, 3.0)
    assert scaled.flow[1].z == pytest.approx(3.0 * meas.flow[1].z)
    assert scaled.flow[1].variance == pytest.approx(9.0 * meas.flow[1].variance)
    assert scaled.flow_missing(2)


def test_injection_retrievable_through_incident_flows(scenario_manager, factor_graph_manager, bp_manager, chain):
    meas = measurement_set(chain, missing_injections={2})
    result = bp_manager.run_bp(factor_graph_manager.build_factor_graph(chain, meas))
    flow_flags, injection_flags = scenario_manager.retrievable_items(meas, result)
    assert flow_flags.all() and injection_flags.all()
    assert scenario_manager.injection_retrievable(2, meas, result)

    blind = measurement_set(chain, missing_flows={1}, missing_injections={1, 2})
    result = bp_manager.run_bp(factor_graph_manager.build_factor_graph(chain, blind))
    flow_flags, injection_flags = scenario_manager.retrievable_items(blind, result)
    assert list(flow_flags) == [False, True]
    assert list(injection_flags) == [False, False, True]


def test_measurement_file_keeps_missing_items_and_seed(scenario_manager, ieee14, tmp_path):
    mask = scenario_manager.make_mask(ieee14, 0.2, seed=2)
    meas = scenario_manager.sample_measurements(ieee14, mask, seed=2)
    path = tmp_path / "measurements.csv"
    scenario_manager.write_measurements(meas, path)
    assert path.read_text().startswith("# seed=2\n")
    restored = scenario_manager.read_measurements(path)
    assert restored == meas
    assert all(math.isinf(restored.flow[line_id].variance) for line_id in mask.missing_flows)


def test_measurement_file_validation(scenario_manager, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("kind,id,z,variance\nflow,1,1.0,-1\n")
    with pytest.raises(ConfigError):
        scenario_manager.read_measurements(path)
    path.write_text("kind,id,z\nflow,1,1.0\n")
    with pytest.raises(ConfigError):
        scenario_manager.read_measurements(path)

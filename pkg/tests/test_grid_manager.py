import math

import networkx as nx
import numpy as np
import pytest

from conftest import CASE_DIR
from exceptions import CaseParseError, TopologyError


def test_import_ieee14_dimensions(ieee14):
    assert ieee14.name == "IEEE 14 Bus Test Case"
    assert ieee14.base_mva == pytest.approx(100.0)
    assert ieee14.n_buses == 14
    assert ieee14.n_lines == 20
    assert ieee14.provenance["branch_records"] == 20
    assert ieee14.provenance["merged_pairs"] == []
    first = ieee14.lines[0]
    assert (first.id, first.from_bus, first.to_bus) == (1, 1, 2)
    assert first.susceptance == pytest.approx(1.0 / 0.05917)


def test_dc_flows_follow_angle_differences(ieee14):
    first = ieee14.lines[0]
    expected = 100.0 * (1.0 / 0.05917) * (0.0 - math.radians(-4.98))
    assert first.flow_true == pytest.approx(expected, rel=1e-12)
    assert first.flow_true > 0


def test_injections_balance_and_match_incidence(grid_manager, ieee14):
    assert abs(float(np.sum(ieee14.injections))) < 1e-9
    incidence = grid_manager.incidence_matrix(ieee14)
    assert incidence.shape == (14, 20)
    np.testing.assert_allclose(incidence @ ieee14.flows, ieee14.injections, atol=1e-9)


def test_listed_injections_are_kept(ieee14):
    bus1 = ieee14.buses[0]
    assert bus1.name == "Bus 1     HV"
    assert bus1.listed_injection == pytest.approx(232.4)


def test_derived_injections_differ_from_listed_values(ieee14):
    # listed values come from the AC solution, derived ones from DC flows
    gaps = [abs(bus.injection_true - bus.listed_injection) for bus in ieee14.buses]
    assert max(gaps) > 1.0
    assert sum(bus.listed_injection for bus in ieee14.buses) > 1.0
    assert abs(sum(bus.injection_true for bus in ieee14.buses)) < 1e-9


def test_topology_stats_ieee14(grid_manager, ieee14):
    stats = grid_manager.topology_stats(ieee14)
    assert stats["component_count"] == 1
    assert stats["loop_count"] == 7
    assert stats["degree_histogram"] == {1: 1, 2: 6, 3: 2, 4: 4, 5: 1}
    assert stats["max_degree"] == 5
    assert stats["mean_degree"] == pytest.approx(40 / 14)


def _ieee14_lines():
    return (CASE_DIR / "ieee14cdf.txt").read_text().splitlines()


def test_zero_reactance_reports_line_number(grid_manager, tmp_path):
    lines = _ieee14_lines()
    assert "0.05917" in lines[18]
    lines[18] = lines[18].replace("0.05917", "0.00000")
    path = tmp_path / "broken.txt"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CaseParseError) as error:
        grid_manager.import_cdf(path)
    assert error.value.line_number == 19


def test_unknown_branch_endpoint_is_rejected(grid_manager, tmp_path):
    lines = _ieee14_lines()
    lines[18] = lines[18][:5] + "  99" + lines[18][9:]
    path = tmp_path / "dangling.txt"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TopologyError):
        grid_manager.import_cdf(path)


def test_parallel_lines_are_merged(grid_manager):
    warnings = []
    case = grid_manager.build_case("parallel", {1: 0.0, 2: -0.1, 3: -0.2},
                                   [(1, 2, 10.0), (2, 1, 5.0), (2, 3, 4.0)], warnings_fn=warnings.append)
    assert case.n_lines == 2
    assert case.lines[0].susceptance == pytest.approx(15.0)
    assert case.lines[0].flow_true == pytest.approx(100.0 * 15.0 * 0.1)
    assert case.provenance["merged_pairs"] == [(1, 2)]
    assert len(warnings) == 1


def test_negative_reactance_is_kept_with_warning(grid_manager):
    warnings = []
    case = grid_manager.build_case("capacitor", {1: 0.0, 2: -0.1}, [(1, 2, -5.0)], warnings_fn=warnings.append)
    assert case.lines[0].susceptance == -5.0
    assert warnings


def test_snapshot_reimport_is_exact(grid_manager, ieee14, tmp_path):
    path = tmp_path / "ieee14.snapshot"
    grid_manager.write_snapshot(ieee14, path)
    restored = grid_manager.read_snapshot(path)
    assert restored == ieee14
    np.testing.assert_array_equal(restored.flows, ieee14.flows)


def test_snapshot_rejects_unknown_record(grid_manager, tmp_path):
    path = tmp_path / "bad.snapshot"
    path.write_text("name x\nbase_mva 100.0\nshunt 1 2\n")
    with pytest.raises(CaseParseError):
        grid_manager.read_snapshot(path)


def test_spanning_tree_is_seeded_tree(grid_manager, ieee14):
    tree = grid_manager.spanning_tree(ieee14, seed=3)
    assert tree.n_lines == ieee14.n_buses - 1
    assert nx.is_tree(grid_manager.to_networkx(tree))
    assert tree.is_derived
    assert grid_manager.spanning_tree(ieee14, seed=3).line_ids == tree.line_ids


def test_components_of_disconnected_case(grid_manager):
    case = grid_manager.build_case("split", {1: 0.0, 2: 0.1, 3: 0.0, 4: -0.1}, [(1, 2, 1.0), (3, 4, 1.0)])
    assert grid_manager.components(case) == [[1, 2], [3, 4]]
    assert grid_manager.topology_stats(case)["loop_count"] == 0


def test_degrees_and_neighbours(ieee14):
    assert ieee14.degrees[ieee14.bus_index[8]] == 1
    assert ieee14.neighbor_buses[8] == [7]
    assert sorted(line_id for line_id, _ in ieee14.incident_lines[4]) == [4, 6, 7, 8, 9]


def test_heterogeneity_tables(grid_manager, ieee14):
    buses = grid_manager.bus_table(ieee14)
    assert buses["degree"].sum() == 2 * ieee14.n_lines
    lines = grid_manager.line_table(ieee14)
    assert list(lines["line_id"]) == list(ieee14.line_ids)
    spread = grid_manager.heterogeneity(ieee14).set_index("quantity")
    assert list(spread.index) == ["degree", "injection", "abs_injection", "susceptance", "abs_flow"]
    assert spread.loc["degree", "count"] == 14
    assert spread.loc["degree", "max"] == 5
    assert spread.loc["susceptance", "count"] == 20
    assert spread.loc["susceptance", "max"] == pytest.approx(lines["susceptance"].max())
    assert spread.loc["injection", "mean"] == pytest.approx(0.0, abs=1e-9)

import math
from pathlib import Path

import pytest

from managers import (
    BpManager,
    ExperimentManager,
    FactorGraphManager,
    GridManager,
    Measurement,
    MeasurementSet,
    PartitionManager,
    ScenarioManager,
    WlsManager
)
from services import CaseLibrary

CASE_DIR = Path(__file__).resolve().parents[1] / "data" / "cases"
SIGMA2 = 1e-4


@pytest.fixture
def grid_manager():
    return GridManager()


@pytest.fixture
def factor_graph_manager():
    return FactorGraphManager()


@pytest.fixture
def bp_manager():
    return BpManager()


@pytest.fixture
def wls_manager(grid_manager):
    return WlsManager(grid_manager)


@pytest.fixture
def scenario_manager():
    return ScenarioManager()


@pytest.fixture
def experiment_manager(grid_manager):
    return ExperimentManager(grid_manager)


@pytest.fixture
def partition_manager(grid_manager, wls_manager):
    return PartitionManager(grid_manager, wls_manager)


@pytest.fixture(scope="session")
def ieee14():
    return GridManager().load_case(CASE_DIR / "ieee14cdf.txt")


@pytest.fixture
def chain(grid_manager):
    """Buses 1 - 2 - 3; both lines carry 100 MW from bus 1 towards bus 3."""
    return grid_manager.build_case("chain", {1: 0.0, 2: -0.1, 3: -0.3}, [(1, 2, 10.0), (2, 3, 5.0)])


def load_named_case(name):
    """Load a case from the case directory, skipping the test when it is not installed."""
    library = CaseLibrary()
    try:
        path = library.resolve(name)
    except ValueError:
        try:
            path = CaseLibrary(CASE_DIR).resolve(name)
        except ValueError:
            pytest.skip(f"case {name} is not available")
    return library.grid_manager.load_case(path)


def measurement_set(case, flows=None, injections=None, missing_flows=(), missing_injections=(), variance=SIGMA2):
    """Exact (noise-free) readings of the DC state, with explicit overrides."""
    flows = flows or {}
    injections = injections or {}
    flow = {}
    for line in case.lines:
        if line.id in missing_flows:
            flow[line.id] = Measurement(0.0, math.inf)
        else:
            z, var = flows.get(line.id, (line.flow_true, variance))
            flow[line.id] = Measurement(z, var)
    injection = {}
    for bus in case.buses:
        if bus.id in missing_injections:
            injection[bus.id] = Measurement(0.0, math.inf)
        else:
            z, var = injections.get(bus.id, (bus.injection_true, variance))
            injection[bus.id] = Measurement(z, var)
    return MeasurementSet(flow=flow, injection=injection)

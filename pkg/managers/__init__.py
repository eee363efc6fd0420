# GridBP/managers/__init__.py

from .grid_manager import Bus, GridCase, GridManager, Line
from .factor_graph_manager import FactorGraph, FactorGraphManager, FactorNode, Gaussian1D, VariableNode
from .bp_manager import BpManager, BpOptions, BpResult
from .wls_manager import WlsManager, WlsSolution
from .scenario_manager import Measurement, MeasurementSet, MissingMask, ScenarioManager
from .experiment_manager import EnsembleResult, EnsembleSpec, ExperimentManager
from .partition_manager import AreaFlowReport, Partition, PartitionManager

__all__ = [
    'AreaFlowReport',
    'BpManager',
    'BpOptions',
    'BpResult',
    'Bus',
    'EnsembleResult',
    'EnsembleSpec',
    'ExperimentManager',
    'FactorGraph',
    'FactorGraphManager',
    'FactorNode',
    'Gaussian1D',
    'GridCase',
    'GridManager',
    'Line',
    'Measurement',
    'MeasurementSet',
    'MissingMask',
    'Partition',
    'PartitionManager',
    'ScenarioManager',
    'VariableNode',
    'WlsManager',
    'WlsSolution'
]

# GridBP/__init__.py

from .config import Config
from .constants import *
from .exceptions import (
    CaseParseError,
    ConfigError,
    FactorGraphError,
    GridBpError,
    NumericalError,
    PartitionError,
    RetrievabilityError,
    TopologyError
)
from .managers import (
    BpManager,
    ExperimentManager,
    FactorGraphManager,
    GridManager,
    PartitionManager,
    ScenarioManager,
    WlsManager
)
from .services import CaseLibrary, RunStore

__all__ = [
    'Config',
    'BpManager',
    'ExperimentManager',
    'FactorGraphManager',
    'GridManager',
    'PartitionManager',
    'ScenarioManager',
    'WlsManager',
    'CaseLibrary',
    'RunStore',
    'GridBpError',
    'CaseParseError',
    'TopologyError',
    'FactorGraphError',
    'NumericalError',
    'RetrievabilityError',
    'PartitionError',
    'ConfigError'
]

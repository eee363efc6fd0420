# GridBP/services/__init__.py

from .case_library import CaseLibrary
from .run_store import RunStore, read_config

__all__ = ['CaseLibrary', 'RunStore', 'read_config']

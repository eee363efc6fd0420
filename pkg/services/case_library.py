import logging
from pathlib import Path

from config import Config
from constants import *
from exceptions import ConfigError
from managers.grid_manager import GridManager

logger = logging.getLogger(__name__)


class CaseLibrary:
    """Resolves case names such as 'ieee14' to Common Data Format files in the case directory."""

    def __init__(self, case_dir=None, grid_manager=None):
        self.case_dir = Path(case_dir or Config.CASE_DIR)
        self.grid_manager = grid_manager or GridManager()

    def resolve(self, name_or_path):
        candidate = Path(name_or_path)
        if candidate.is_file():
            return candidate
        for pattern in CASE_FILE_PATTERNS:
            path = self.case_dir / pattern.format(name=name_or_path)
            if path.is_file():
                return path
        known = ", ".join(self.available()) or "none"
        raise ConfigError(f"case '{name_or_path}' not found as a file or in {self.case_dir} (available: {known})")

    def available(self):
        if not self.case_dir.is_dir():
            return []
        return sorted(path.name for path in self.case_dir.iterdir() if path.is_file())

    def load(self, name_or_path, warnings_fn=None):
        path = self.resolve(name_or_path)
        logger.debug("Resolved case %s to %s", name_or_path, path)
        return self.grid_manager.load_case(path, warnings_fn=warnings_fn)

import json
import logging
import subprocess
import timeit
from datetime import datetime
from importlib import metadata
from pathlib import Path

from config import Config, PACKAGE_DIR
from constants import *

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ["numpy", "pandas", "scipy", "networkx", "python-dotenv"]


class RunStore:
    """One directory per run holding config.json, manifest.json and the CSV outputs."""

    def __init__(self, output_dir=None, run_name=None):
        root = Path(output_dir or Config.OUTPUT_DIR)
        run_name = run_name or datetime.now().strftime("run-%Y%m%d-%H%M%S")
        self.path = root / run_name
        self.path.mkdir(parents=True, exist_ok=True)
        self._started = timeit.default_timer()

    def file(self, name):
        return self.path / name

    def write_config(self, config):
        with open(self.file("config.json"), "w") as handle:
            json.dump(config, handle, indent=2, sort_keys=True)

    def write_csv(self, df, name, **kwargs):
        kwargs.setdefault("index", False)
        kwargs.setdefault("float_format", "%.10g")
        df.to_csv(self.file(name), **kwargs)
        logger.debug("Wrote %s (%d rows)", self.file(name), len(df))
        return self.file(name)

    def write_manifest(self, spec, seed, extra=None):
        manifest = {
            "spec": spec,
            "seed": seed,
            "versions": package_versions(),
            "git_revision": git_revision(),
            "wall_time": timeit.default_timer() - self._started,
            "outputs": sorted(path.name for path in self.path.iterdir()
                              if path.name not in ("manifest.json",)),
        }
        manifest.update(extra or {})
        with open(self.file("manifest.json"), "w") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True, default=str)
        return manifest


def read_config(path):
    with open(path, "r") as handle:
        return json.load(handle)


def package_versions():
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def git_revision():
    try:
        completed = subprocess.run(["git", "rev-parse", "HEAD"], cwd=PACKAGE_DIR, capture_output=True, text=True,
                                   timeout=5, check=False)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    revision = completed.stdout.strip()
    return revision if completed.returncode == 0 and revision else "unknown"

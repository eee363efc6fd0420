import logging
import os
from pathlib import Path

from dotenv import load_dotenv

PACKAGE_DIR = Path(__file__).resolve().parent


def configure_logging(level=None):
    # one stream handler for the whole toolkit
    level = level or os.getenv("GRIDBP_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def load_env_variables():
    # Load environment variables with default values
    load_dotenv()  # Load environment variables from .env file
    return {
        "GRIDBP_CASE_DIR": os.getenv("GRIDBP_CASE_DIR", str(PACKAGE_DIR / "data" / "cases")),
        "GRIDBP_OUTPUT_DIR": os.getenv("GRIDBP_OUTPUT_DIR", "runs"),
        "GRIDBP_WORKERS": int(os.getenv("GRIDBP_WORKERS", str(os.cpu_count() or 1))),
        "GRIDBP_LOG_LEVEL": os.getenv("GRIDBP_LOG_LEVEL", "INFO"),
    }


class Config:
    env_vars = load_env_variables()
    CASE_DIR = env_vars["GRIDBP_CASE_DIR"]
    OUTPUT_DIR = env_vars["GRIDBP_OUTPUT_DIR"]
    WORKERS = env_vars["GRIDBP_WORKERS"]
    LOG_LEVEL = env_vars["GRIDBP_LOG_LEVEL"]

# fdlc_trajopt/config.py
import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv

# Load values from .env file for base configuration
# and then from .env.local to override them for local development.
load_dotenv()
load_dotenv(".env.local", override=True)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class Settings:
    PROJECT_NAME: str = "FDLC Trajectory Optimization"
    PROJECT_VERSION: str = "0.1.0"

    # --- Output settings ---
    # Root directory for run bundles when neither the config nor --out names one.
    OUTPUT_DIR: str = os.getenv("FDLC_OUTPUT_DIR", "results")

    # --- Parallelism ---
    # Number of worker processes for the (model, goal) sweep. 1 runs in-process.
    MAX_WORKERS: int = 1
    _raw_workers: Optional[str] = os.getenv("FDLC_MAX_WORKERS")
    if _raw_workers:
        try:
            MAX_WORKERS = max(1, int(_raw_workers))
        except ValueError:
            print(
                f"Warning: Invalid FDLC_MAX_WORKERS '{_raw_workers}'. Defaulting to 1."
            )

    # --- Logging Configuration ---
    LOG_LEVEL: str = os.getenv("FDLC_LOG_LEVEL", "INFO").upper()
    if LOG_LEVEL not in VALID_LOG_LEVELS:
        print(f"Warning: Invalid LOG_LEVEL '{LOG_LEVEL}'. Defaulting to INFO.")
        LOG_LEVEL = "INFO"


# Create a single instance of the Settings class that can be imported elsewhere
settings = Settings()


def configure_logging(verbose: bool = False) -> None:
    """
    Sets up root logging for command-line use.
    DEBUG when verbose, otherwise the level from settings.
    """
    log_level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL)
    if not logging.getLogger().hasHandlers():
        logging.basicConfig(level=log_level, format=LOG_FORMAT, stream=sys.stdout)
    else:
        logging.getLogger().setLevel(log_level)
    # matplotlib is chatty at DEBUG about font discovery
    logging.getLogger("matplotlib").setLevel(logging.WARNING)

"""
Configuration loader for MVFCNN.
Loads environment variables from .env file.

Run-level settings (architecture, SGD, tiling, synthesis) live in
core.models.training.RunConfig; this module only covers process environment.
"""
import os
from pathlib import Path
from dotenv import load_dotenv


# Load .env from the project root
PROJECT_ROOT = Path(__file__).parent.parent
ENV_PATH = PROJECT_ROOT / ".env"
load_dotenv(ENV_PATH)


def _flag(name: str, default: str = "0") -> bool:
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


class Config:
    """Process configuration."""

    # Logging
    LOG_LEVEL: str = os.getenv("MVFCNN_LOG", "INFO").upper()
    LOG_JSON: bool = _flag("MVFCNN_LOG_JSON")
    LOG_FILE: bool = _flag("MVFCNN_LOG_FILE")
    LOG_DIR: Path = Path(os.getenv("MVFCNN_LOG_DIR", str(PROJECT_ROOT / "logs")))

    # Worker cap used when --threads is not given
    DEFAULT_THREADS: int = int(os.getenv("MVFCNN_THREADS", "1"))

    # Slow end-to-end benchmark tests
    RUN_BENCHMARK: bool = _flag("MVFCNN_BENCHMARK")

    # Rewrite tests/golden/ from a fresh run instead of comparing against it
    UPDATE_GOLDEN: bool = _flag("MVFCNN_UPDATE_GOLDEN")


# Singleton instance
config = Config()

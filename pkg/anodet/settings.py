"""
Settings Module
Process-level settings for anodet, read from the environment.

Values come from environment variables (optionally from a ``.env`` file in the
working directory):
- ANODET_OUTPUT_ROOT: default output directory for every command
- ANODET_LOG_LEVEL / ANODET_LOG_DIR: logging configuration
- ANODET_DEVICE: torch device used for training and scoring
- ANODET_NUM_THREADS: optional cap on intra-op CPU threads
"""

import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from anodet.errors import ConfigurationError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

run_logger = logging.getLogger('run')


class Settings:
    """
    Centralized process settings.
    Reads the environment once; call ``reset_settings()`` to re-read it.
    """

    def __init__(self):
        self._output_root = None
        self._log_level = None
        self._log_dir = None
        self._device = None
        self._num_threads = None

        self._load_environment()

    def _load_environment(self):
        """Read and validate all ANODET_* variables."""
        load_dotenv()

        self._output_root = Path(os.getenv('ANODET_OUTPUT_ROOT', 'runs'))
        self._log_dir = Path(os.getenv('ANODET_LOG_DIR', 'logs'))

        level = os.getenv('ANODET_LOG_LEVEL', 'INFO').upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ConfigurationError('ANODET_LOG_LEVEL', f"unknown logging level {level}")
        self._log_level = level

        self._device = os.getenv('ANODET_DEVICE', 'cpu')

        threads = os.getenv('ANODET_NUM_THREADS')
        if threads:
            if not threads.isdigit() or int(threads) < 1:
                raise ConfigurationError('ANODET_NUM_THREADS', f"must be a positive integer, got {threads}")
            self._num_threads = int(threads)

    @property
    def output_root(self) -> Path:
        return self._output_root

    @property
    def log_level(self) -> str:
        return self._log_level

    @property
    def log_dir(self) -> Path:
        return self._log_dir

    @property
    def device(self) -> str:
        return self._device

    @property
    def num_threads(self) -> Optional[int]:
        return self._num_threads


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the global settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings():
    """Drop the cached settings so the next access re-reads the environment."""
    global _settings
    _settings = None


def setup_logging(level: Optional[str] = None, log_dir: Optional[Path] = None):
    """Configure root logging once: a file under the log directory plus stderr."""
    settings = get_settings()
    log_dir = Path(log_dir) if log_dir is not None else settings.log_dir
    log_dir.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, level or settings.log_level),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_dir / 'anodet.log'),
            logging.StreamHandler()
        ]
    )


def log_run_event(event_type: str, details: str):
    """Log notable run events (start, checkpoint, divergence, resume)."""
    run_logger.info(f"RUN_EVENT: {event_type} | {details}")

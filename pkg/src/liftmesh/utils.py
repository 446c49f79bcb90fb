"""
Utility functions for liftmesh.
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import CheckpointIOError

PathLike = Union[str, os.PathLike]


def setup_logging(
    log_level: str = "INFO", log_file: Optional[str] = None
) -> logging.Logger:
    """Set up logging configuration."""
    logger = logging.getLogger("liftmesh")
    logger.setLevel(getattr(logging, log_level.upper()))

    # Clear existing handlers
    logger.handlers.clear()

    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    # Console handler (stderr keeps stdout free for machine output)
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        ensure_directory_exists(os.path.dirname(log_file))
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def ensure_directory_exists(directory: str) -> None:
    """Ensure that a directory exists, create if it doesn't."""
    if directory:
        Path(directory).mkdir(parents=True, exist_ok=True)


def make_rng(seed: int) -> np.random.Generator:
    """Create the run's random generator from a config seed."""
    return np.random.Generator(np.random.PCG64(seed))


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """
    Write bytes to path through a temp file in the same directory and rename.

    Readers never observe a partially written file.
    """
    target = Path(path)
    try:
        ensure_directory_exists(str(target.parent))
        fd, tmp_name = tempfile.mkstemp(
            prefix=f".{target.name}.", suffix=".tmp", dir=str(target.parent)
        )
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp_name, target)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    except OSError as e:
        raise CheckpointIOError(f"Failed to write file ({e.strerror})", str(path))


def atomic_write_text(path: PathLike, text: str) -> None:
    """Text counterpart of atomic_write_bytes (UTF-8)."""
    atomic_write_bytes(path, text.encode("utf-8"))


def read_bytes(path: PathLike) -> bytes:
    """Read a whole file, mapping OS failures to CheckpointIOError."""
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointIOError(f"Failed to read file ({e.strerror})", str(path))


def thread_limit(default: int = 1) -> int:
    """Worker cap from LIFTMESH_THREADS (minimum 1)."""
    raw = os.getenv("LIFTMESH_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger(__name__).warning(
            f"Ignoring non-integer LIFTMESH_THREADS={raw!r}"
        )
        return default

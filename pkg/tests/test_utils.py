"""
Tests for utils module.
"""

import logging

import numpy as np
import pytest

from liftmesh.exceptions import CheckpointIOError
from liftmesh.utils import (atomic_write_bytes, atomic_write_text,
                            ensure_directory_exists, make_rng, read_bytes,
                            setup_logging, thread_limit)


class TestMakeRng:
    """Test seeded generators."""

    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(make_rng(5).normal(size=4), make_rng(5).normal(size=4))

    def test_different_seeds(self):
        assert not np.array_equal(make_rng(5).normal(size=4), make_rng(6).normal(size=4))


class TestAtomicWrite:
    """Test atomic file writes."""

    def test_write_and_read(self, tmp_path):
        path = tmp_path / "out" / "data.bin"
        atomic_write_bytes(path, b"\x00\x01")
        assert read_bytes(path) == b"\x00\x01"

    def test_overwrite(self, tmp_path):
        """Test a second write replaces the file and leaves no temp files."""
        path = tmp_path / "note.txt"
        atomic_write_text(path, "first")
        atomic_write_text(path, "second")
        assert path.read_text() == "second"
        assert [p.name for p in tmp_path.iterdir()] == ["note.txt"]

    def test_unwritable_target(self, tmp_path):
        """Test writing onto a directory raises an I/O error."""
        with pytest.raises(CheckpointIOError):
            atomic_write_bytes(tmp_path, b"x")

    def test_read_missing(self, tmp_path):
        with pytest.raises(CheckpointIOError) as excinfo:
            read_bytes(tmp_path / "missing.bin")
        assert excinfo.value.path.endswith("missing.bin")


class TestThreadLimit:
    """Test the worker cap from the environment."""

    def test_default(self, monkeypatch):
        monkeypatch.delenv("LIFTMESH_THREADS", raising=False)
        assert thread_limit() == 1
        assert thread_limit(default=4) == 4

    def test_from_env(self, monkeypatch):
        monkeypatch.setenv("LIFTMESH_THREADS", "3")
        assert thread_limit() == 3

    def test_clamped(self, monkeypatch):
        monkeypatch.setenv("LIFTMESH_THREADS", "0")
        assert thread_limit() == 1

    def test_invalid(self, monkeypatch):
        monkeypatch.setenv("LIFTMESH_THREADS", "many")
        assert thread_limit(default=2) == 2


class TestSetupLogging:
    """Test logging configuration."""

    def test_console_handler(self):
        logger = setup_logging("DEBUG")
        assert logger.name == "liftmesh"
        assert logger.level == logging.DEBUG
        assert len(logger.handlers) == 1

    def test_file_handler(self, tmp_path):
        log_file = tmp_path / "logs" / "run.log"
        logger = setup_logging("INFO", str(log_file))
        logger.info("hello")
        for handler in logger.handlers:
            handler.flush()
        assert "hello" in log_file.read_text()
        logger.handlers.clear()

    def test_ensure_directory(self, tmp_path):
        target = tmp_path / "a" / "b"
        ensure_directory_exists(str(target))
        assert target.is_dir()

"""
Tests for the HTTP API.
"""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from api.config import Settings
from api.services import PipelineService
from app import app
from liftmesh.io_formats import save_checkpoint
from liftmesh.pose_shape_estimator import combine_checkpoint

SMALL_CONFIG = "lifter.dim=16\nlifter.branches=2\nlifter.blocks=1\npse.dim=16\npse.tokens=8\npse.blocks=1\npse.hidden=32\n"


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "api.cfg"
    path.write_text(SMALL_CONFIG)
    return str(path)


@pytest.fixture
def client(monkeypatch, small_config):
    """Client over a freshly initialized small model bundle."""
    monkeypatch.setattr(Settings, "CONFIG_PATH", small_config)
    monkeypatch.setattr(Settings, "CHECKPOINT_PATH", None)
    monkeypatch.setattr(Settings, "BODY_PATH", None)
    monkeypatch.setattr(Settings, "INIT_SEED", 0)
    PipelineService.reset()
    with TestClient(app) as test_client:
        yield test_client
    PipelineService.reset()


@pytest.fixture
def joints(pose_coords):
    return pose_coords.tolist()


class TestHealth:
    """Test service endpoints."""

    def test_health(self, client):
        response = client.get("/api/v1/health")
        assert response.status_code == 200
        assert response.json() == {"status": "healthy"}

    def test_root(self, client):
        response = client.get("/")
        assert response.status_code == 200
        assert response.json()["message"] == "liftmesh API"


class TestLiftEndpoint:
    """Test POST /lift."""

    def test_lift(self, client, joints):
        response = client.post("/api/v1/lift", json={"joints": joints})
        assert response.status_code == 200
        body = response.json()
        assert np.array(body["joints3d"]).shape == (17, 3)
        assert len(body["shape"]) == 10
        assert len(body["camera"]) == 3
        assert "features" not in body

    def test_lift_with_features(self, client, joints):
        response = client.post("/api/v1/lift", json={"joints": joints, "include_features": True})
        assert response.status_code == 200
        assert np.array(response.json()["features"]).shape == (17, 16)

    def test_deterministic(self, client, joints):
        """Test the same pose gives the same answer twice."""
        first = client.post("/api/v1/lift", json={"joints": joints}).json()
        second = client.post("/api/v1/lift", json={"joints": joints}).json()
        assert first == second

    def test_coco_input(self, client, joints):
        """Test COCO-ordered joints are remapped before lifting."""
        response = client.post("/api/v1/lift", json={"joints": joints, "topology": "coco17"})
        assert response.status_code == 200

    def test_wrong_joint_count(self, client):
        response = client.post("/api/v1/lift", json={"joints": [[0.0, 0.0]] * 16})
        assert response.status_code == 422

    def test_wrong_row_width(self, client):
        response = client.post("/api/v1/lift", json={"joints": [[0.0, 0.0, 0.0]] * 17})
        assert response.status_code == 422

    def test_unknown_topology(self, client, joints):
        response = client.post("/api/v1/lift", json={"joints": joints, "topology": "mpii16"})
        assert response.status_code == 422

    def test_missing_joints(self, client):
        assert client.post("/api/v1/lift", json={}).status_code == 422


class TestMeshEndpoint:
    """Test POST /mesh."""

    def test_mesh(self, client, joints):
        response = client.post("/api/v1/mesh", json={"joints": joints})
        assert response.status_code == 200
        body = response.json()
        assert len(body["theta"]) == 72
        assert np.array(body["vertices"]).shape == (120, 3)
        assert np.array(body["joints3d"]).shape == (17, 3)

    def test_mesh_without_vertices(self, client, joints):
        response = client.post("/api/v1/mesh", json={"joints": joints, "include_vertices": False})
        assert response.status_code == 200
        assert "vertices" not in response.json()

    def test_mesh_bad_pose(self, client):
        response = client.post("/api/v1/mesh", json={"joints": [[0.0, 0.0]] * 5})
        assert response.status_code == 422


class TestCheckpointLoading:
    """Test the bundle source settings."""

    def test_checkpoint_from_settings(self, monkeypatch, tmp_path, small_params, joints):
        """Test a configured checkpoint is served instead of a fresh init."""
        lifter, pse = small_params
        path = tmp_path / "served.lmtc"
        save_checkpoint(path, combine_checkpoint(lifter, pse))
        monkeypatch.setattr(Settings, "CHECKPOINT_PATH", str(path))
        monkeypatch.setattr(Settings, "BODY_PATH", None)
        monkeypatch.setattr(Settings, "CONFIG_PATH", None)
        PipelineService.reset()
        try:
            with TestClient(app) as test_client:
                assert PipelineService.get_bundle().source == str(path)
                response = test_client.post("/api/v1/lift", json={"joints": joints})
                assert response.status_code == 200
        finally:
            PipelineService.reset()

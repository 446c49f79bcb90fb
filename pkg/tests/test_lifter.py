"""
Tests for lifter module.
"""

import numpy as np
import pytest

from liftmesh.config import SHAPE_DIM, LifterConfig
from liftmesh.exceptions import ContractViolation, FormatError
from liftmesh.lifter import (LifterParams, init_lifter_params, lifter_forward,
                             lifter_forward_tensor, zero_lifter_params)
from liftmesh.skeleton import H36M17, Pose2D, SkeletonTopology
from liftmesh.tensor_core import Tensor, finite_diff_check, tensor_sum
from liftmesh.utils import make_rng


def expected_lifter_count(cfg: LifterConfig) -> int:
    """Parameter count from the layer dimensions alone."""
    d, bd, j = cfg.dim, cfg.branch_dim, cfg.joints
    block = (
        bd * bd                       # graph convolution
        + 3 * cfg.heads * bd * cfg.head_dim
        + cfg.heads * cfg.head_dim * bd
        + 2 * bd * cfg.ffn_dim + cfg.ffn_dim + bd
        + 4 * bd                      # layer norms
    )
    return (
        2 * d + j * d
        + cfg.branches * d * bd
        + cfg.branches * cfg.blocks * block
        + (d * 3 + 3) + (d * SHAPE_DIM + SHAPE_DIM) + (d * 3 + 3)
    )


class TestLifterParams:
    """Test parameter construction and checkpoint form."""

    @pytest.mark.parametrize("cfg", [LifterConfig(), LifterConfig(dim=16, branches=2, blocks=1, heads=2)])
    def test_parameter_count(self, cfg):
        """Test the count matches the dimension arithmetic."""
        params = init_lifter_params(cfg, H36M17, make_rng(0))
        assert params.parameter_count() == expected_lifter_count(cfg)

    def test_topology_mismatch(self, lifter_config):
        """Test a two-joint skeleton is refused by a 17-joint config."""
        topo = SkeletonTopology("two", ("a", "b"), ((0, 1),))
        with pytest.raises(ContractViolation):
            init_lifter_params(lifter_config, topo, make_rng(0))

    def test_missing_tensor(self, small_params):
        """Test that dropping a head tensor fails validation."""
        lifter, _ = small_params
        tensors = dict(lifter.tensors)
        del tensors["pam.cam_head.b"]
        with pytest.raises(ContractViolation):
            LifterParams(lifter.config, tensors, lifter.adjacency)

    def test_checkpoint_round_trip(self, small_params, pose_coords):
        """Test a reloaded lifter has the same config and output."""
        lifter, _ = small_params
        loaded = LifterParams.from_checkpoint(lifter.to_checkpoint())
        assert loaded.config == lifter.config
        np.testing.assert_array_equal(loaded.adjacency.numpy(), lifter.adjacency.numpy())
        a = lifter_forward(Pose2D(pose_coords), lifter)
        b = lifter_forward(Pose2D(pose_coords), loaded)
        np.testing.assert_array_equal(a.joints3d, b.joints3d)
        np.testing.assert_array_equal(a.shape, b.shape)

    def test_from_empty_checkpoint(self):
        """Test that a checkpoint without lifter tensors raises."""
        with pytest.raises(FormatError):
            LifterParams.from_checkpoint({})

    def test_with_tensors_ignores_unknown(self, small_params):
        """Test only known names are replaced."""
        lifter, _ = small_params
        zero_bias = Tensor(np.zeros(3))
        updated = lifter.with_tensors({"pam.cam_head.b": zero_bias, "other.x": Tensor(1.0)})
        assert "other.x" not in updated.tensors
        np.testing.assert_array_equal(updated["pam.cam_head.b"].numpy(), np.zeros(3))


class TestLifterForward:
    """Test the lifter forward pass."""

    def test_zero_params_give_zero_outputs(self, small_lifter_config, pose_coords):
        """Test all-zero parameters map any pose to zeros."""
        params = zero_lifter_params(small_lifter_config, H36M17)
        out = lifter_forward(Pose2D(pose_coords), params)
        np.testing.assert_array_equal(out.features, np.zeros((17, 16)))
        np.testing.assert_array_equal(out.joints3d, np.zeros((17, 3)))
        np.testing.assert_array_equal(out.shape, np.zeros(SHAPE_DIM))
        np.testing.assert_array_equal(out.camera, np.zeros(3))

    def test_default_shapes(self, desk_params, pose_coords):
        """Test output dims for the default configuration."""
        lifter, _ = desk_params
        out = lifter_forward(Pose2D(pose_coords), lifter)
        assert out.features.shape == (17, 32)
        assert out.joints3d.shape == (17, 3)
        assert out.shape.shape == (SHAPE_DIM,)
        assert out.camera.shape == (3,)

    def test_shape_head_reads_pooled_features(self, small_params, pose_coords):
        """Test β and C come from the joint-mean of F, whatever the row order."""
        lifter, _ = small_params
        out = lifter_forward(Pose2D(pose_coords), lifter)
        shuffled = out.features[make_rng(5).permutation(17)]
        pooled = shuffled.mean(axis=0)
        expected_shape = pooled @ lifter["pam.shape_head.w"].numpy() + lifter["pam.shape_head.b"].numpy()
        expected_cam = pooled @ lifter["pam.cam_head.w"].numpy() + lifter["pam.cam_head.b"].numpy()
        np.testing.assert_allclose(out.shape, expected_shape, atol=1e-12)
        np.testing.assert_allclose(out.camera, expected_cam, atol=1e-12)

    def test_pose_head_scaled_to_millimeters(self, small_params, pose_coords):
        """Test P is the pose head output times the pose scale."""
        lifter, _ = small_params
        out = lifter_forward(Pose2D(pose_coords), lifter)
        raw = out.features @ lifter["pam.pose_head.w"].numpy() + lifter["pam.pose_head.b"].numpy()
        np.testing.assert_allclose(out.joints3d, raw * 1000.0, atol=1e-9)

    def test_batched_matches_single(self, small_params):
        """Test a B×J×2 batch equals per-pose evaluation."""
        lifter, _ = small_params
        coords = make_rng(6).normal(0.0, 0.3, size=(3, 17, 2))
        batched = lifter_forward_tensor(Tensor(coords), lifter)
        for i in range(3):
            single = lifter_forward(Pose2D(coords[i]), lifter)
            np.testing.assert_allclose(batched.joints3d.numpy()[i], single.joints3d, atol=1e-9)
            np.testing.assert_allclose(batched.shape.numpy()[i], single.shape, atol=1e-12)

    def test_wrong_joint_count(self, small_params):
        """Test that a 16-joint pose raises."""
        lifter, _ = small_params
        with pytest.raises(ContractViolation):
            lifter_forward_tensor(Tensor(np.zeros((16, 2))), lifter)

    def test_deterministic(self, small_params, pose_coords):
        """Test repeated calls are bitwise identical."""
        lifter, _ = small_params
        a = lifter_forward(Pose2D(pose_coords), lifter)
        b = lifter_forward(Pose2D(pose_coords), lifter)
        np.testing.assert_array_equal(a.features, b.features)

    def test_to_dict_feature_toggle(self, small_params, pose_coords):
        """Test features are only serialized on request."""
        lifter, _ = small_params
        out = lifter_forward(Pose2D(pose_coords), lifter)
        assert "features" not in out.to_dict(include_features=False)
        assert len(out.to_dict()["features"]) == 17

    @pytest.mark.parametrize("seed", range(10))
    def test_input_gradient(self, lifter_config, seed):
        """Test every lifter output's gradient w.r.t. the 2D input at default dims."""
        rng = make_rng(seed)
        lifter = init_lifter_params(lifter_config, H36M17, rng)
        probes = [Tensor(rng.normal(size=dims)) for dims in ((17, 3), (SHAPE_DIM,), (3,))]
        coords = Tensor(rng.normal(0.0, 0.3, size=(17, 2)))

        def f(c):
            out = lifter_forward_tensor(c, lifter)
            return (
                tensor_sum(out.joints3d * probes[0]) * 1e-3
                + tensor_sum(out.shape * probes[1])
                + tensor_sum(out.camera * probes[2])
            )

        assert finite_diff_check(f, coords) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_parameter_gradient(self, lifter_config, seed):
        """Test gradients reach the projection, the trunk and the heads."""
        names = ("pam.input_proj", "pam.gt.1.0.gcn_weight", "pam.cam_head.w", "pam.split.2", "pam.pos_embed")
        name = names[seed % len(names)]
        rng = make_rng(seed)
        lifter = init_lifter_params(lifter_config, H36M17, rng)
        probes = [Tensor(rng.normal(size=dims)) for dims in ((17, 3), (SHAPE_DIM,), (3,))]
        coords = Tensor(rng.normal(0.0, 0.3, size=(17, 2)))

        def f(w):
            out = lifter_forward_tensor(coords, lifter.with_tensors({name: w}))
            return (
                tensor_sum(out.joints3d * probes[0]) * 1e-3
                + tensor_sum(out.shape * probes[1])
                + tensor_sum(out.camera * probes[2])
            )

        assert finite_diff_check(f, lifter[name]) < 1e-4

"""
Pose analysis module: lifts a 2D skeleton to per-joint features, root-relative
3D joints (mm), body shape coefficients and a weak-perspective camera.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Union

import numpy as np

from .config import SHAPE_DIM, LifterConfig
from .exceptions import ContractViolation, FormatError
from .graph_transformer import (GtBlockParams, init_block_params,
                                parallel_fuse, xavier_uniform)
from .skeleton import Pose2D, SkeletonTopology, build_adjacency
from .tensor_core import Tensor, as_tensor, matmul, mean, reshape

logger = logging.getLogger(__name__)

PREFIX = "pam"
META_POSE_SCALE = "pam.meta.pose_scale"
META_ADJACENCY = "pam.meta.adjacency"
_META = (META_POSE_SCALE, META_ADJACENCY)


@dataclass(frozen=True)
class LifterParams:
    """Learnable lifter tensors keyed by checkpoint name, plus the skeleton adjacency."""

    config: LifterConfig
    tensors: Mapping[str, Tensor]
    adjacency: Tensor

    def __post_init__(self):
        j, d = self.config.joints, self.config.dim
        expected = {
            "pam.input_proj": (2, d),
            "pam.pos_embed": (j, d),
            "pam.pose_head.w": (d, 3),
            "pam.pose_head.b": (3,),
            "pam.shape_head.w": (d, SHAPE_DIM),
            "pam.shape_head.b": (SHAPE_DIM,),
            "pam.cam_head.w": (d, 3),
            "pam.cam_head.b": (3,),
        }
        for name, dims in expected.items():
            if name not in self.tensors:
                raise ContractViolation(f"Missing lifter tensor {name}")
            if self.tensors[name].dims != dims:
                raise ContractViolation(
                    f"{name} dims {self.tensors[name].dims} != {dims}"
                )
        if self.adjacency.dims != (j, j):
            raise ContractViolation(f"adjacency dims {self.adjacency.dims} != ({j}, {j})")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def split_weights(self) -> List[Tensor]:
        return [self.tensors[f"pam.split.{b}"] for b in range(self.config.branches)]

    def branches(self) -> List[List[GtBlockParams]]:
        return [
            [
                GtBlockParams.from_named(self.tensors, f"pam.gt.{b}.{i}")
                for i in range(self.config.blocks)
            ]
            for b in range(self.config.branches)
        ]

    def with_tensors(self, updates: Mapping[str, Tensor]) -> "LifterParams":
        merged = dict(self.tensors)
        merged.update({k: v for k, v in updates.items() if k in merged})
        return LifterParams(self.config, merged, self.adjacency)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def to_checkpoint(self) -> Dict[str, np.ndarray]:
        named = {name: t.data for name, t in self.tensors.items()}
        named[META_POSE_SCALE] = np.array(self.config.pose_scale)
        named[META_ADJACENCY] = self.adjacency.data
        return named

    @classmethod
    def from_checkpoint(cls, named: Mapping[str, np.ndarray]) -> "LifterParams":
        """Rebuild from checkpoint tensors, inferring dims from their shapes."""
        try:
            input_proj = named["pam.input_proj"]
            pos_embed = named["pam.pos_embed"]
            adjacency = named[META_ADJACENCY]
        except KeyError as e:
            raise FormatError("Checkpoint has no lifter tensors", entry=e.args[0])

        branches = 0
        while f"pam.split.{branches}" in named:
            branches += 1
        blocks = 0
        while f"pam.gt.0.{blocks}.gcn_weight" in named:
            blocks += 1
        heads = 0
        while f"pam.gt.0.0.q.{heads}" in named:
            heads += 1
        if not branches or not blocks or not heads:
            raise FormatError("Checkpoint lifter trunk is incomplete")

        dim = int(input_proj.shape[1])
        branch_dim = dim // branches
        ffn_dim = int(named["pam.gt.0.0.ffn.w1"].shape[1])
        config = LifterConfig(
            joints=int(pos_embed.shape[0]),
            dim=dim,
            branches=branches,
            blocks=blocks,
            heads=heads,
            ffn_mult=max(1, ffn_dim // branch_dim),
            pose_scale=float(named.get(META_POSE_SCALE, np.array(1000.0))),
        )
        tensors = {
            name: Tensor(value)
            for name, value in named.items()
            if name.startswith(f"{PREFIX}.") and name not in _META
        }
        params = cls(config, tensors, Tensor(adjacency))
        params.branches()
        return params


@dataclass(frozen=True)
class LifterOutput:
    """F (J×D), P (J×3, mm), β (10), C (3)."""

    features: np.ndarray
    joints3d: np.ndarray
    shape: np.ndarray
    camera: np.ndarray

    def __post_init__(self):
        for name in ("features", "joints3d", "shape", "camera"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractViolation(f"Lifter produced non-finite {name}")

    def to_dict(self, include_features: bool = True) -> Dict[str, list]:
        out = {
            "joints3d": self.joints3d.tolist(),
            "shape": self.shape.tolist(),
            "camera": self.camera.tolist(),
        }
        if include_features:
            out["features"] = self.features.tolist()
        return out


@dataclass(frozen=True)
class LifterTensors:
    """Tape-aware counterpart of LifterOutput with optional leading batch dims."""

    features: Tensor
    joints3d: Tensor
    shape: Tensor
    camera: Tensor

    def to_output(self) -> LifterOutput:
        return LifterOutput(
            self.features.numpy(), self.joints3d.numpy(),
            self.shape.numpy(), self.camera.numpy(),
        )


def init_lifter_params(
    config: LifterConfig, topology: SkeletonTopology, rng: np.random.Generator
) -> LifterParams:
    """Random initialization; the pose and shape heads start small."""
    if topology.num_joints != config.joints:
        raise ContractViolation(
            f"topology {topology.name} has {topology.num_joints} joints, config expects {config.joints}"
        )
    d, bd = config.dim, config.branch_dim
    tensors: Dict[str, Tensor] = {
        "pam.input_proj": xavier_uniform(rng, 2, d),
        "pam.pos_embed": Tensor(rng.normal(0.0, 0.02, size=(config.joints, d))),
    }
    for b in range(config.branches):
        tensors[f"pam.split.{b}"] = xavier_uniform(rng, d, bd)
    for b in range(config.branches):
        for i in range(config.blocks):
            block = init_block_params(bd, bd, config.heads, config.ffn_dim, rng)
            tensors.update(block.to_named(f"pam.gt.{b}.{i}"))
    tensors["pam.pose_head.w"] = Tensor(0.1 * xavier_uniform(rng, d, 3).data)
    tensors["pam.pose_head.b"] = Tensor(np.zeros(3))
    tensors["pam.shape_head.w"] = Tensor(0.1 * xavier_uniform(rng, d, SHAPE_DIM).data)
    tensors["pam.shape_head.b"] = Tensor(np.zeros(SHAPE_DIM))
    tensors["pam.cam_head.w"] = Tensor(0.1 * xavier_uniform(rng, d, 3).data)
    tensors["pam.cam_head.b"] = Tensor(np.array([1.0, 0.0, 0.0]))
    params = LifterParams(config, tensors, build_adjacency(topology))
    logger.debug(f"Initialized lifter with {params.parameter_count()} parameters")
    return params


def zero_lifter_params(config: LifterConfig, topology: SkeletonTopology) -> LifterParams:
    template = init_lifter_params(config, topology, np.random.default_rng(0))
    zeros = {name: Tensor(np.zeros(t.dims)) for name, t in template.tensors.items()}
    return LifterParams(config, zeros, template.adjacency)


def _coords_tensor(pose: Union[Pose2D, Tensor, np.ndarray], joints: int) -> Tensor:
    coords = as_tensor(pose.coords if isinstance(pose, Pose2D) else pose)
    if coords.ndim < 2 or coords.dims[-2:] != (joints, 2):
        raise ContractViolation(f"Expected …×{joints}×2 pose coordinates, got {coords.dims}")
    return coords


def project_embed(pose: Union[Pose2D, Tensor], params: LifterParams) -> Tensor:
    """Per-joint linear map of (x, y) into D dims plus the positional embedding."""
    coords = _coords_tensor(pose, params.config.joints)
    return matmul(coords, params["pam.input_proj"]) + params["pam.pos_embed"]


def lifter_forward_tensor(
    coords: Union[Pose2D, Tensor],
    params: LifterParams,
    rng: Optional[np.random.Generator] = None,
) -> LifterTensors:
    """Differentiable forward over …×J×2 coordinates."""
    cfg = params.config
    embedded = project_embed(coords, params)
    lead = embedded.dims[:-2]
    features = parallel_fuse(
        embedded, params.adjacency, params.split_weights(), params.branches(),
        rng, cfg.dropout if rng is not None else 0.0,
    )
    joints3d = (
        matmul(features, params["pam.pose_head.w"]) + params["pam.pose_head.b"]
    ) * cfg.pose_scale
    pooled = mean(features, axis=-2, keepdims=True)
    shape = reshape(
        matmul(pooled, params["pam.shape_head.w"]) + params["pam.shape_head.b"],
        (*lead, SHAPE_DIM),
    )
    camera = reshape(
        matmul(pooled, params["pam.cam_head.w"]) + params["pam.cam_head.b"], (*lead, 3)
    )
    return LifterTensors(features, joints3d, shape, camera)


def lifter_forward(pose: Pose2D, params: LifterParams) -> LifterOutput:
    return lifter_forward_tensor(pose, params).to_output()

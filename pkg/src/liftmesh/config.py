"""
Configuration settings for liftmesh.

Every default the pipeline depends on lives here. Config files are flat
``key=value`` documents (parsed with python-dotenv) whose dotted keys map onto
the nested models below, e.g. ``lifter.dim=32`` or ``train.lambda_3d=1.0``.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .exceptions import ConfigError
from .skeleton import (DEFAULT_TOPOLOGY, SkeletonTopology, get_topology,
                       topology_from_config, topology_to_config)

logger = logging.getLogger(__name__)

SHAPE_DIM = 10
NUM_BODY_JOINTS = 24
THETA_DIM = NUM_BODY_JOINTS * 3


class Defaults:
    """File and environment names used across the package."""

    LOSS_CURVE_NAME = "loss.csv"

    ENV_LOG_LEVEL = "LIFTMESH_LOG_LEVEL"
    LOG_LEVEL = "WARNING"

    @classmethod
    def get_log_level(cls) -> str:
        return os.getenv(cls.ENV_LOG_LEVEL, cls.LOG_LEVEL)


def _require_positive(**values: int) -> None:
    for name, value in values.items():
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")


class LifterConfig(BaseModel):
    """Pose analysis module: projection, parallel graph-transformer trunk, heads."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    joints: int = 17
    dim: int = 32
    branches: int = 4
    blocks: int = 2
    heads: int = 2
    ffn_mult: int = 2
    dropout: float = 0.0
    pose_scale: float = 1000.0

    @model_validator(mode="after")
    def _check_dims(self) -> "LifterConfig":
        _require_positive(
            joints=self.joints, dim=self.dim, branches=self.branches,
            blocks=self.blocks, heads=self.heads, ffn_mult=self.ffn_mult,
        )
        if self.dim % self.branches:
            raise ConfigError(
                f"lifter.branches={self.branches} does not divide lifter.dim={self.dim}"
            )
        if self.branch_dim % self.heads:
            raise ConfigError(
                f"lifter.heads={self.heads} does not divide branch dim {self.branch_dim}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"lifter.dropout must be in [0, 1), got {self.dropout}")
        if self.pose_scale <= 0:
            raise ConfigError(f"lifter.pose_scale must be > 0, got {self.pose_scale}")
        return self

    @property
    def branch_dim(self) -> int:
        return self.dim // self.branches

    @property
    def head_dim(self) -> int:
        return self.branch_dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.branch_dim


class PseConfig(BaseModel):
    """Pose-and-shape estimator: two token branches plus iterative regressor."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dim: int = 32
    tokens: int = 16
    blocks: int = 2
    heads: int = 2
    ffn_mult: int = 2
    hidden: int = 256
    n_iter: int = 3
    source_mode: Literal["features", "joints"] = "features"
    template_source: Literal["mean_mesh", "rest_pose"] = "mean_mesh"
    tie_branch_weights: bool = False

    @model_validator(mode="after")
    def _check_dims(self) -> "PseConfig":
        _require_positive(
            dim=self.dim, tokens=self.tokens, blocks=self.blocks, heads=self.heads,
            ffn_mult=self.ffn_mult, hidden=self.hidden, n_iter=self.n_iter,
        )
        if self.dim % self.heads:
            raise ConfigError(f"pse.heads={self.heads} does not divide pse.dim={self.dim}")
        return self

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.dim


class TrainConfig(BaseModel):
    """Loss weights, optimizer and run settings for desk-scale training."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["lifter-only", "pse-only", "end-to-end"] = "end-to-end"
    lambda_3d: float = 1.0
    lambda_2d: float = 0.5
    lambda_theta: float = 1.0
    lambda_beta: float = 0.1
    lambda_vert: float = 0.5
    lambda_cam: float = 0.0
    loss_kind: Literal["l1", "l2"] = "l1"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    n_samples: int = 32
    noise_sigma: float = 0.0
    checkpoint_every: int = 0
    progress: bool = True

    @model_validator(mode="after")
    def _check_values(self) -> "TrainConfig":
        for name in (
            "lambda_3d", "lambda_2d", "lambda_theta", "lambda_beta",
            "lambda_vert", "lambda_cam",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0, got {getattr(self, name)}")
        _require_positive(
            steps=self.steps, batch_size=self.batch_size, n_samples=self.n_samples
        )
        if self.lr < 0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("train.adam_beta1 and train.adam_beta2 must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError(f"train.adam_eps must be > 0, got {self.adam_eps}")
        if self.noise_sigma < 0:
            raise ConfigError(f"train.noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.checkpoint_every < 0:
            raise ConfigError("train.checkpoint_every must be >= 0")
        return self

    def effective_weights(self) -> Dict[str, float]:
        """Loss weights after the mode's masking."""
        weights = {
            "3d": self.lambda_3d,
            "2d": self.lambda_2d,
            "theta": self.lambda_theta,
            "beta": self.lambda_beta,
            "vert": self.lambda_vert,
            "cam": self.lambda_cam,
        }
        if self.mode == "lifter-only":
            weights["theta"] = weights["vert"] = 0.0
        elif self.mode == "pse-only":
            weights["3d"] = weights["2d"] = weights["beta"] = weights["cam"] = 0.0
        return weights


class PipelineConfig(BaseModel):
    """Top-level configuration document."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    topology: str = DEFAULT_TOPOLOGY
    topology_def: Optional[SkeletonTopology] = None
    body_vertices: int = 120
    lifter: LifterConfig = LifterConfig()
    pse: PseConfig = PseConfig()
    train: TrainConfig = TrainConfig()

    @model_validator(mode="after")
    def _check_topology(self) -> "PipelineConfig":
        topo = self.resolve_topology()
        if topo.num_joints != self.lifter.joints:
            raise ConfigError(
                f"lifter.joints={self.lifter.joints} does not match topology "
                f"{topo.name} ({topo.num_joints} joints)"
            )
        if self.body_vertices < 1:
            raise ConfigError(f"body_vertices must be >= 1, got {self.body_vertices}")
        return self

    def resolve_topology(self) -> SkeletonTopology:
        if self.topology_def is not None:
            return self.topology_def
        return get_topology(self.topology)

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "PipelineConfig":
        return self.model_copy(update={"train": self.train.model_copy(update={"seed": seed})})

    def to_flat(self) -> Dict[str, str]:
        flat: Dict[str, str] = {"topology": self.topology}
        if self.topology_def is not None:
            flat.update(topology_to_config(self.topology_def))
        flat["body_vertices"] = str(self.body_vertices)
        flat["seed"] = str(self.train.seed)
        for section in ("lifter", "pse", "train"):
            for key, value in getattr(self, section).model_dump().items():
                if section == "train" and key == "seed":
                    continue
                flat[f"{section}.{key}"] = _format_value(value)
        return flat

    def to_config_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_flat(values: Mapping[str, Optional[str]]) -> PipelineConfig:
    """Build a PipelineConfig from flat dotted keys."""
    sections: Dict[str, Dict[str, str]] = {"lifter": {}, "pse": {}, "train": {}}
    top: Dict[str, Any] = {}
    topo_keys: Dict[str, str] = {}
    unknown: List[str] = []

    for key, raw in values.items():
        if raw is None:
            raise ConfigError(f"Config key '{key}' has no value")
        raw = raw.strip()
        if key == "seed":
            sections["train"]["seed"] = raw
        elif key.startswith("topology."):
            topo_keys[key] = raw
        elif "." in key:
            section, field = key.split(".", 1)
            if section not in sections:
                unknown.append(key)
                continue
            sections[section][field] = raw
        elif key in ("topology", "body_vertices"):
            top[key] = raw
        else:
            unknown.append(key)

    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")

    if topo_keys:
        topology_def = topology_from_config(topo_keys)
        top["topology_def"] = topology_def
        top.setdefault("topology", topology_def.name)

    try:
        return PipelineConfig(
            lifter=LifterConfig(**sections["lifter"]),
            pse=PseConfig(**sections["pse"]),
            train=TrainConfig(**sections["train"]),
            **top,
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Load a flat key=value config file; defaults when path is None."""
    if path is None:
        return PipelineConfig()
    if not Path(path).is_file():
        raise ConfigError(f"Config file not found: {path}")
    values = dotenv_values(path)
    logger.debug(f"Loaded {len(values)} config keys from {path}")
    return parse_flat(values)

"""
Pose-and-shape estimator.

Pose tokens (lifter features or 3D joints) and mean-mesh template tokens run
through graph-transformer stacks over a complete graph, are concatenated into
one (J+T)×D embedding and pooled into an iterative residual regressor that
outputs the 72 body-model pose angles. ``full_pipeline`` chains the lifter,
this estimator and forward kinematics.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .body_model import BodyModel, forward_kinematics_tensor, regress_joints
from .config import SHAPE_DIM, THETA_DIM, PseConfig
from .exceptions import ConfigError, ContractViolation, FormatError
from .graph_transformer import (GtBlockParams, init_block_params,
                                run_block_stack, xavier_uniform)
from .lifter import LifterParams, LifterTensors, lifter_forward_tensor
from .skeleton import Pose2D, Pose3D, complete_adjacency
from .tensor_core import (Tensor, as_tensor, concat, gelu, matmul, mean,
                          reshape, zeros)

logger = logging.getLogger(__name__)

PREFIX = "pse"
META_N_ITER = "pse.meta.n_iter"
META_SOURCE_MODE = "pse.meta.source_mode"
META_TEMPLATE_SOURCE = "pse.meta.template_source"
META_TIED = "pse.meta.tied"
TEMPLATE_INDICES = "pse.template_indices"
_META = (META_N_ITER, META_SOURCE_MODE, META_TEMPLATE_SOURCE, META_TIED, TEMPLATE_INDICES)

_SOURCE_CODES = {"features": 0, "joints": 1}
_TEMPLATE_CODES = {"mean_mesh": 0, "rest_pose": 1}
MM_PER_M = 1000.0


def uniform_stride_indices(count: int, available: int) -> np.ndarray:
    """T indices spread evenly over `available` items."""
    if not 1 <= count <= available:
        raise ContractViolation(f"Cannot pick {count} template tokens from {available}")
    return (np.arange(count) * available) // count


@dataclass(frozen=True)
class PseParams:
    """Estimator tensors keyed by checkpoint name, with the template subsample."""

    config: PseConfig
    tensors: Mapping[str, Tensor]
    template_indices: np.ndarray
    joints: int

    def __post_init__(self):
        indices = np.array(self.template_indices, dtype=np.int64)
        indices.setflags(write=False)
        object.__setattr__(self, "template_indices", indices)
        if indices.shape != (self.config.tokens,):
            raise ContractViolation(
                f"{indices.shape[0]} template indices for {self.config.tokens} tokens"
            )
        d, hidden = self.config.dim, self.config.hidden
        expected = {
            "pse.pose_embed": (self.joints, d),
            "pse.template_proj": (3, d),
            "pse.template_embed": (self.config.tokens, d),
            "pse.reg.w1": (d + THETA_DIM, hidden),
            "pse.reg.b1": (hidden,),
            "pse.reg.w2": (hidden, hidden),
            "pse.reg.b2": (hidden,),
            "pse.reg.w3": (hidden, THETA_DIM),
            "pse.reg.b3": (THETA_DIM,),
        }
        for name, dims in expected.items():
            if name not in self.tensors:
                raise ContractViolation(f"Missing estimator tensor {name}")
            if self.tensors[name].dims != dims:
                raise ContractViolation(f"{name} dims {self.tensors[name].dims} != {dims}")
        adapter = self.tensors.get("pse.pose_adapter")
        if adapter is None or adapter.dims[1] != d:
            raise ContractViolation("pse.pose_adapter missing or not …×D")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def input_dim(self) -> int:
        return self.tensors["pse.pose_adapter"].dims[0]

    def stack(self, branch: str) -> List[GtBlockParams]:
        """Block stack for the 'pose' or 'template' branch."""
        name = "shared" if self.config.tie_branch_weights else branch
        return [
            GtBlockParams.from_named(self.tensors, f"pse.gt.{name}.{i}")
            for i in range(self.config.blocks)
        ]

    def with_tensors(self, updates: Mapping[str, Tensor]) -> "PseParams":
        merged = dict(self.tensors)
        merged.update({k: v for k, v in updates.items() if k in merged})
        return PseParams(self.config, merged, self.template_indices, self.joints)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def to_checkpoint(self) -> Dict[str, np.ndarray]:
        named = {name: t.data for name, t in self.tensors.items()}
        named[TEMPLATE_INDICES] = self.template_indices
        named[META_N_ITER] = np.array(self.config.n_iter, dtype=np.int64)
        named[META_SOURCE_MODE] = np.array(_SOURCE_CODES[self.config.source_mode], dtype=np.int64)
        named[META_TEMPLATE_SOURCE] = np.array(
            _TEMPLATE_CODES[self.config.template_source], dtype=np.int64
        )
        named[META_TIED] = np.array(int(self.config.tie_branch_weights), dtype=np.int64)
        return named

    @classmethod
    def from_checkpoint(cls, named: Mapping[str, np.ndarray]) -> "PseParams":
        """Rebuild from checkpoint tensors, inferring dims from their shapes."""
        try:
            pose_embed = named["pse.pose_embed"]
            template_embed = named["pse.template_embed"]
            hidden = int(named["pse.reg.w2"].shape[0])
            indices = named[TEMPLATE_INDICES]
            tied = bool(int(named[META_TIED]))
            n_iter = int(named[META_N_ITER])
            source_code = int(named[META_SOURCE_MODE])
            template_code = int(named[META_TEMPLATE_SOURCE])
        except KeyError as e:
            raise FormatError("Checkpoint has no estimator tensors", entry=e.args[0])

        stack_name = "shared" if tied else "pose"
        blocks = 0
        while f"pse.gt.{stack_name}.{blocks}.gcn_weight" in named:
            blocks += 1
        heads = 0
        while f"pse.gt.{stack_name}.0.q.{heads}" in named:
            heads += 1
        if not blocks or not heads:
            raise FormatError("Checkpoint estimator stack is incomplete")

        dim = int(pose_embed.shape[1])
        ffn_dim = int(named[f"pse.gt.{stack_name}.0.ffn.w1"].shape[1])
        source = {v: k for k, v in _SOURCE_CODES.items()}.get(source_code)
        template = {v: k for k, v in _TEMPLATE_CODES.items()}.get(template_code)
        if source is None or template is None:
            raise FormatError("Unknown estimator mode code", entry=META_SOURCE_MODE)
        config = PseConfig(
            dim=dim,
            tokens=int(template_embed.shape[0]),
            blocks=blocks,
            heads=heads,
            ffn_mult=max(1, ffn_dim // dim),
            hidden=hidden,
            n_iter=n_iter,
            source_mode=source,
            template_source=template,
            tie_branch_weights=tied,
        )
        tensors = {
            name: Tensor(value)
            for name, value in named.items()
            if name.startswith(f"{PREFIX}.") and name not in _META
        }
        params = cls(config, tensors, indices, int(pose_embed.shape[0]))
        params.stack("pose")
        params.stack("template")
        return params


@dataclass(frozen=True)
class RegressionTrace:
    """θ_0 … θ_N of the iterative regressor (each …×72)."""

    thetas: Tuple[Tensor, ...]

    @property
    def final(self) -> Tensor:
        return self.thetas[-1]

    def __len__(self) -> int:
        return len(self.thetas)


@dataclass(frozen=True)
class MeshResult:
    """Pipeline output: posed vertices plus the θ, β, C, P that produced them."""

    vertices: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    camera: np.ndarray
    joints3d: np.ndarray
    body_joints: np.ndarray

    def to_dict(self, include_vertices: bool = True) -> Dict[str, list]:
        """JSON form; joints and vertices in millimeters like pose records."""
        out = {
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "camera": self.camera.tolist(),
            "joints3d": self.joints3d.tolist(),
        }
        if include_vertices:
            out["vertices"] = (self.vertices * MM_PER_M).tolist()
        return out


@dataclass(frozen=True)
class PipelineTensors:
    """Every intermediate of one differentiable pipeline pass."""

    lifter: LifterTensors
    fused: Tensor
    trace: RegressionTrace
    vertices: Tensor
    body_joints: Tensor


def init_pse_params(
    config: PseConfig,
    joints: int,
    input_dim: int,
    model: BodyModel,
    rng: np.random.Generator,
) -> PseParams:
    """
    Random initialization. ``input_dim`` is the lifter feature width in
    features mode and 3 in joints mode. The last regressor layer starts small
    so the first iterations stay near the rest pose.
    """
    if config.source_mode == "joints" and input_dim != 3:
        raise ConfigError(f"joints source mode consumes 3D joints, got input_dim={input_dim}")
    available = model.num_vertices if config.template_source == "mean_mesh" else model.num_joints
    indices = uniform_stride_indices(config.tokens, available)
    d, hidden = config.dim, config.hidden

    tensors: Dict[str, Tensor] = {
        "pse.pose_adapter": xavier_uniform(rng, input_dim, d),
        "pse.pose_embed": Tensor(rng.normal(0.0, 0.02, size=(joints, d))),
        "pse.template_proj": xavier_uniform(rng, 3, d),
        "pse.template_embed": Tensor(rng.normal(0.0, 0.02, size=(config.tokens, d))),
    }
    branches = ("shared",) if config.tie_branch_weights else ("pose", "template")
    for branch in branches:
        for i in range(config.blocks):
            block = init_block_params(d, d, config.heads, config.ffn_dim, rng)
            tensors.update(block.to_named(f"pse.gt.{branch}.{i}"))
    tensors.update({
        "pse.reg.w1": xavier_uniform(rng, d + THETA_DIM, hidden),
        "pse.reg.b1": Tensor(np.zeros(hidden)),
        "pse.reg.w2": xavier_uniform(rng, hidden, hidden),
        "pse.reg.b2": Tensor(np.zeros(hidden)),
        "pse.reg.w3": Tensor(0.01 * xavier_uniform(rng, hidden, THETA_DIM).data),
        "pse.reg.b3": Tensor(np.zeros(THETA_DIM)),
    })
    params = PseParams(config, tensors, indices, joints)
    logger.debug(f"Initialized estimator with {params.parameter_count()} parameters")
    return params


def zero_pse_params(
    config: PseConfig, joints: int, input_dim: int, model: BodyModel
) -> PseParams:
    template = init_pse_params(config, joints, input_dim, model, np.random.default_rng(0))
    zeroed = {name: Tensor(np.zeros(t.dims)) for name, t in template.tensors.items()}
    return PseParams(config, zeroed, template.template_indices, joints)


def template_points(model: BodyModel, params: PseParams) -> np.ndarray:
    """Subsampled template source points (meters)."""
    if params.config.template_source == "mean_mesh":
        source = model.template
    else:
        source = regress_joints(model, model.template)
    indices = params.template_indices
    if indices.size and (indices.min() < 0 or indices.max() >= source.shape[0]):
        raise ContractViolation(
            f"template index out of range for {source.shape[0]} {params.config.template_source} points"
        )
    return source[indices]


def template_tokens(model: BodyModel, params: PseParams) -> Tensor:
    """T×D tokens from the mean template (β = 0)."""
    points = Tensor(template_points(model, params))
    return matmul(points, params["pse.template_proj"]) + params["pse.template_embed"]


def _pose_tensor(pose_input, params: PseParams) -> Tensor:
    mode = params.config.source_mode
    if isinstance(pose_input, Pose3D):
        if mode != "joints":
            raise ConfigError(f"Estimator in '{mode}' mode cannot consume 3D joints")
        pose_input = Tensor(pose_input.coords)
    x = as_tensor(pose_input)
    if x.ndim < 2 or x.dims[-2] != params.joints:
        raise ContractViolation(f"pose input must be …×{params.joints}×…, got {x.dims}")
    if x.dims[-1] != params.input_dim:
        raise ConfigError(
            f"Estimator in '{mode}' mode expects width {params.input_dim}, got {x.dims[-1]}"
        )
    if mode == "joints":
        x = x / MM_PER_M
    return x


def pse_forward(
    pose_input: Union[Tensor, Pose3D],
    model: BodyModel,
    params: PseParams,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Fused (J+T)×D embedding; pose rows first."""
    x = _pose_tensor(pose_input, params)
    lead = x.dims[:-2]
    pose_tokens = matmul(x, params["pse.pose_adapter"]) + params["pse.pose_embed"]
    pose_out = run_block_stack(
        pose_tokens, complete_adjacency(params.joints), params.stack("pose"), rng, dropout_rate
    )
    template_out = run_block_stack(
        template_tokens(model, params),
        complete_adjacency(params.config.tokens),
        params.stack("template"),
        rng,
        dropout_rate,
    )
    if lead:
        template_out = template_out + zeros((*lead, params.config.tokens, params.config.dim))
    return concat([pose_out, template_out], axis=-2)


def iterative_regress(fused: Tensor, params: PseParams) -> RegressionTrace:
    """θ_i = θ_{i-1} + MLP([pooled, θ_{i-1}]) starting from θ_0 = 0."""
    if fused.dims[-1] != params.config.dim:
        raise ContractViolation(f"fused width {fused.dims[-1]} != {params.config.dim}")
    lead = fused.dims[:-2]
    pooled = mean(fused, axis=-2, keepdims=True)
    theta = zeros((*lead, 1, THETA_DIM))
    thetas = [reshape(theta, (*lead, THETA_DIM))]
    for _ in range(params.config.n_iter):
        h = gelu(matmul(concat([pooled, theta], axis=-1), params["pse.reg.w1"]) + params["pse.reg.b1"])
        h = gelu(matmul(h, params["pse.reg.w2"]) + params["pse.reg.b2"])
        theta = theta + (matmul(h, params["pse.reg.w3"]) + params["pse.reg.b3"])
        thetas.append(reshape(theta, (*lead, THETA_DIM)))
    return RegressionTrace(tuple(thetas))


def check_compatible(lifter: LifterParams, pse: PseParams) -> None:
    if lifter.config.joints != pse.joints:
        raise ConfigError(
            f"lifter has {lifter.config.joints} joints, estimator {pse.joints}"
        )
    expected = lifter.config.dim if pse.config.source_mode == "features" else 3
    if pse.input_dim != expected:
        raise ConfigError(
            f"estimator in '{pse.config.source_mode}' mode expects width {expected}, "
            f"adapter takes {pse.input_dim}"
        )


def pipeline_forward_tensor(
    coords,
    lifter: LifterParams,
    pse: PseParams,
    model: BodyModel,
    rng: Optional[np.random.Generator] = None,
    joints_override: Optional[Tensor] = None,
    beta_override: Optional[Tensor] = None,
) -> PipelineTensors:
    """
    Differentiable lifter → estimator → kinematics pass.

    ``joints_override`` replaces P as the joints-mode estimator input and
    ``beta_override`` replaces β for kinematics (used by pse-only training).
    """
    check_compatible(lifter, pse)
    lifted = lifter_forward_tensor(coords, lifter, rng)
    if pse.config.source_mode == "features":
        pose_input = lifted.features
    else:
        pose_input = joints_override if joints_override is not None else lifted.joints3d
    fused = pse_forward(pose_input, model, pse, rng, lifter.config.dropout if rng is not None else 0.0)
    trace = iterative_regress(fused, pse)
    beta = beta_override if beta_override is not None else lifted.shape
    vertices, body_joints = forward_kinematics_tensor(model, trace.final, beta)
    return PipelineTensors(lifted, fused, trace, vertices, body_joints)


def full_pipeline(
    pose: Pose2D, lifter: LifterParams, pse: PseParams, model: BodyModel
) -> MeshResult:
    out = pipeline_forward_tensor(pose, lifter, pse, model)
    return MeshResult(
        vertices=out.vertices.numpy(),
        theta=out.trace.final.numpy(),
        beta=out.lifter.shape.numpy(),
        camera=out.lifter.camera.numpy(),
        joints3d=out.lifter.joints3d.numpy(),
        body_joints=out.body_joints.numpy(),
    )


def split_checkpoint(named: Mapping[str, np.ndarray]) -> Tuple[LifterParams, PseParams]:
    """Both bundles from one combined checkpoint."""
    return LifterParams.from_checkpoint(named), PseParams.from_checkpoint(named)


def combine_checkpoint(lifter: LifterParams, pse: PseParams) -> Dict[str, np.ndarray]:
    named = lifter.to_checkpoint()
    named.update(pse.to_checkpoint())
    return named

"""
SMPL-style parametric body model.

A ``BodyModel`` carries a mean template mesh, linear shape blendshapes, a
joint regressor, a 24-joint kinematic tree and linear-blend-skinning weights.
``forward_kinematics_tensor`` poses the mesh from axis-angle rotations and is
differentiable through the tape; the numpy wrappers below serve inference.

Pose-dependent blendshapes are not modelled.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .config import NUM_BODY_JOINTS, SHAPE_DIM, THETA_DIM
from .exceptions import ContractViolation, FormatError, TopologyError
from .io_formats import load_checkpoint, save_checkpoint
from .skeleton import H36M17
from .tensor_core import (Tensor, as_tensor, matmul, record, reshape, stack)
from .utils import atomic_write_text, make_rng

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-8

SMPL_PARENTS: Tuple[int, ...] = (
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
)

# Rest joint layout of the desk model in meters (x left, y up, z forward).
DESK_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.06, -0.09, 0.00],   # l_hip
    [-0.06, -0.09, 0.00],  # r_hip
    [0.00, 0.11, -0.02],   # spine1
    [0.10, -0.47, 0.00],   # l_knee
    [-0.10, -0.47, 0.00],  # r_knee
    [0.00, 0.25, 0.00],    # spine2
    [0.09, -0.87, -0.04],  # l_ankle
    [-0.09, -0.87, -0.04], # r_ankle
    [0.00, 0.30, 0.02],    # spine3
    [0.12, -0.93, 0.08],   # l_foot
    [-0.12, -0.93, 0.08],  # r_foot
    [0.00, 0.51, -0.01],   # neck
    [0.08, 0.42, -0.01],   # l_collar
    [-0.08, 0.42, -0.01],  # r_collar
    [0.00, 0.58, 0.04],    # head
    [0.19, 0.45, -0.02],   # l_shoulder
    [-0.19, 0.45, -0.02],  # r_shoulder
    [0.45, 0.43, -0.04],   # l_elbow
    [-0.45, 0.43, -0.04],  # r_elbow
    [0.71, 0.44, -0.04],   # l_wrist
    [-0.71, 0.44, -0.04],  # r_wrist
    [0.80, 0.43, -0.05],   # l_hand
    [-0.80, 0.43, -0.05],  # r_hand
])

# h36m17 joint -> {body joint: weight}; each body joint stands for the mean of its vertices.
H36M_FROM_BODY: Tuple[Dict[int, float], ...] = (
    {0: 1.0}, {2: 1.0}, {5: 1.0}, {8: 1.0}, {1: 1.0}, {4: 1.0}, {7: 1.0},
    {3: 0.5, 6: 0.5}, {12: 1.0}, {15: 0.5, 12: 0.5}, {15: 1.0},
    {16: 1.0}, {18: 1.0}, {20: 1.0}, {17: 1.0}, {19: 1.0}, {21: 1.0},
)


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PoseTheta:
    """24 axis-angle rotations in radians."""

    axis_angle: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.axis_angle, dtype=np.float64)
        if arr.shape == (THETA_DIM,):
            arr = arr.reshape(NUM_BODY_JOINTS, 3)
        if arr.shape != (NUM_BODY_JOINTS, 3):
            raise ContractViolation(f"theta must be 72 or 24×3, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("theta must be finite")
        norms = np.linalg.norm(arr, axis=1)
        if np.any(norms > 2 * math.pi):
            logger.warning(
                f"theta rows exceed 2π (max {norms.max():.3f} rad); rotations wrap"
            )
        object.__setattr__(self, "axis_angle", _frozen(arr))

    def flat(self) -> np.ndarray:
        return self.axis_angle.reshape(-1)


@dataclass(frozen=True)
class PosedMesh:
    vertices: np.ndarray
    joints: np.ndarray


@dataclass(frozen=True)
class BodyModel:
    """Template (V×3, meters), shape dirs (V×3×10), regressor (24×V), tree, weights (V×24)."""

    template: np.ndarray
    shape_dirs: np.ndarray
    joint_regressor: np.ndarray
    parents: Tuple[int, ...]
    skin_weights: np.ndarray
    eval_regressor: Optional[np.ndarray] = None
    faces: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("template", "shape_dirs", "joint_regressor", "skin_weights"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        if self.eval_regressor is not None:
            object.__setattr__(self, "eval_regressor", _frozen(self.eval_regressor))
        if self.faces is not None:
            object.__setattr__(self, "faces", _frozen(self.faces, np.int64))
        self._validate()

    def _validate(self) -> None:
        v = self.num_vertices
        j = self.num_joints
        if self.template.shape != (v, 3):
            raise ContractViolation(f"template must be V×3, got {self.template.shape}")
        if self.shape_dirs.shape != (v, 3, SHAPE_DIM):
            raise ContractViolation(f"shape_dirs must be {(v, 3, SHAPE_DIM)}, got {self.shape_dirs.shape}")
        if self.joint_regressor.shape != (j, v):
            raise ContractViolation(f"joint_regressor must be {(j, v)}, got {self.joint_regressor.shape}")
        if self.skin_weights.shape != (v, j):
            raise ContractViolation(f"skin_weights must be {(v, j)}, got {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0) or not np.allclose(
            self.skin_weights.sum(axis=1), 1.0, atol=1e-6, rtol=0.0
        ):
            raise ContractViolation("skin_weights rows must be non-negative and sum to 1")
        if not self.parents or self.parents[0] != -1:
            raise TopologyError("parents[0] must be -1 (root)")
        for child, parent in enumerate(self.parents[1:], start=1):
            if not 0 <= parent < child:
                raise TopologyError(
                    f"joint {child} has parent {parent}; parents must precede children"
                )
        if self.eval_regressor is not None and self.eval_regressor.shape[1] != v:
            raise ContractViolation("eval_regressor columns must match vertex count")
        if self.faces is not None and (
            self.faces.ndim != 2 or self.faces.shape[1] != 3
            or self.faces.min(initial=0) < 0 or self.faces.max(initial=0) >= v
        ):
            raise ContractViolation("faces must be F×3 vertex indices")

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @cached_property
    def _template_t(self) -> Tensor:
        return Tensor(self.template)

    @cached_property
    def _shape_basis_t(self) -> Tensor:
        return Tensor(self.shape_dirs.reshape(-1, SHAPE_DIM).T)

    @cached_property
    def _regressor_t(self) -> Tensor:
        return Tensor(self.joint_regressor)

    @cached_property
    def _weights_t(self) -> Tensor:
        return Tensor(self.skin_weights)

    def to_named(self) -> Dict[str, np.ndarray]:
        named = {
            "body.template": self.template,
            "body.shape_dirs": self.shape_dirs,
            "body.joint_regressor": self.joint_regressor,
            "body.skin_weights": self.skin_weights,
            "body.parents": np.array(self.parents, dtype=np.int64),
        }
        if self.eval_regressor is not None:
            named["body.eval_regressor"] = self.eval_regressor
        if self.faces is not None:
            named["body.faces"] = self.faces
        return named

    @classmethod
    def from_named(cls, named: Dict[str, np.ndarray]) -> "BodyModel":
        required = (
            "body.template", "body.shape_dirs", "body.joint_regressor",
            "body.skin_weights", "body.parents",
        )
        missing = [k for k in required if k not in named]
        if missing:
            raise FormatError(f"Body model missing tensors: {', '.join(missing)}")
        return cls(
            template=named["body.template"],
            shape_dirs=named["body.shape_dirs"],
            joint_regressor=named["body.joint_regressor"],
            parents=tuple(int(p) for p in named["body.parents"]),
            skin_weights=named["body.skin_weights"],
            eval_regressor=named.get("body.eval_regressor"),
            faces=named.get("body.faces"),
        )


def save_body_model(path: Union[str, Path], model: BodyModel) -> None:
    save_checkpoint(path, model.to_named())


def load_body_model(path: Union[str, Path]) -> BodyModel:
    return BodyModel.from_named(load_checkpoint(path))


# -- rotations -------------------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices [v]× for …×3 vectors."""
    zero = np.zeros(v.shape[:-1])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )


def _rodrigues_np(v: np.ndarray) -> np.ndarray:
    theta = np.sqrt(np.sum(v * v, axis=-1))
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = _skew(v / safe[..., None])
    sin = np.sin(theta)[..., None, None]
    one_minus_cos = (1.0 - np.cos(theta))[..., None, None]
    rot = np.eye(3) + sin * k + one_minus_cos * np.matmul(k, k)
    return np.where(small[..., None, None], np.eye(3) + _skew(v), rot)


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle 3-vector to a 3×3 rotation matrix."""
    v = np.asarray(axis_angle, dtype=np.float64)
    if v.shape != (3,):
        raise ContractViolation(f"rodrigues expects a 3-vector, got {v.shape}")
    return _rodrigues_np(v)


def rodrigues_tensor(axis_angle: Tensor) -> Tensor:
    """Batched Rodrigues (…×3 → …×3×3) with an analytic VJP."""
    axis_angle = as_tensor(axis_angle)
    if axis_angle.dims[-1] != 3:
        raise ContractViolation(f"rodrigues_tensor expects …×3, got {axis_angle.dims}")
    v = axis_angle.data
    rot = _rodrigues_np(v)

    def vjp(g):
        theta_sq = np.sum(v * v, axis=-1)
        small = np.sqrt(theta_sq) < SMALL_ANGLE
        safe_sq = np.where(small, 1.0, theta_sq)[..., None, None]
        i_minus_r = np.eye(3) - rot
        kv = _skew(v)
        grad = np.empty(v.shape)
        for i in range(3):
            w = np.cross(v, i_minus_r[..., :, i])
            d_rot = np.matmul(v[..., i, None, None] * kv + _skew(w), rot) / safe_sq
            d_rot = np.where(small[..., None, None], _skew(np.eye(3)[i]), d_rot)
            grad[..., i] = np.sum(g * d_rot, axis=(-2, -1))
        return (grad,)

    return record("rodrigues", rot, (axis_angle,), vjp)


# -- shape, regression, kinematics -----------------------------------------


def apply_shape(model: BodyModel, beta) -> np.ndarray:
    """template + Σ_k β_k · shape_dirs[:, :, k]."""
    return apply_shape_tensor(model, Tensor(beta)).numpy()


def apply_shape_tensor(model: BodyModel, beta: Tensor) -> Tensor:
    beta = as_tensor(beta)
    if beta.dims[-1] != SHAPE_DIM:
        raise ContractViolation(f"beta must end in {SHAPE_DIM}, got {beta.dims}")
    lead = beta.dims[:-1]
    rows = beta if beta.ndim >= 2 else reshape(beta, (1, SHAPE_DIM))
    offsets = matmul(rows, model._shape_basis_t)
    return model._template_t + reshape(offsets, (*lead, model.num_vertices, 3))


def regress_joints(model: BodyModel, vertices) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape[-2:] != (model.num_vertices, 3):
        raise ContractViolation(
            f"vertices must be …×{model.num_vertices}×3, got {vertices.shape}"
        )
    return np.matmul(model.joint_regressor, vertices)


def forward_kinematics_tensor(
    model: BodyModel, theta: Tensor, beta: Tensor
) -> Tuple[Tensor, Tensor]:
    """
    Pose the shaped mesh; returns (vertices …×V×3, joints …×24×3).

    Each joint rotates about its rest position; world transforms compose down
    the tree and vertices blend the rest-relative transforms by skin weight.
    """
    theta, beta = as_tensor(theta), as_tensor(beta)
    n_joints = model.num_joints
    if theta.dims[-1] == 3 * n_joints:
        lead = theta.dims[:-1]
        theta = reshape(theta, (*lead, n_joints, 3))
    elif theta.dims[-2:] == (n_joints, 3):
        lead = theta.dims[:-2]
    else:
        raise ContractViolation(f"theta must end in {3 * n_joints} or {n_joints}×3, got {theta.dims}")
    if beta.dims != (*lead, SHAPE_DIM):
        raise ContractViolation(f"beta dims {beta.dims} do not match theta batch {lead}")

    n_verts = model.num_vertices
    shaped = apply_shape_tensor(model, beta)
    rest = matmul(model._regressor_t, shaped)
    rots = rodrigues_tensor(theta)

    world_rot = []
    world_trans = []
    for j, parent in enumerate(model.parents):
        local_rot = rots[..., j, :, :]
        joint = reshape(rest[..., j, :], (*lead, 3, 1))
        if parent < 0:
            world_rot.append(local_rot)
            world_trans.append(joint)
            continue
        offset = joint - reshape(rest[..., parent, :], (*lead, 3, 1))
        world_rot.append(matmul(world_rot[parent], local_rot))
        world_trans.append(matmul(world_rot[parent], offset) + world_trans[parent])

    trans = stack(world_trans, axis=-3)
    posed_joints = reshape(trans, (*lead, n_joints, 3))

    a_rot = stack(world_rot, axis=-3)
    rest_col = reshape(rest, (*lead, n_joints, 3, 1))
    a_trans = reshape(trans - matmul(a_rot, rest_col), (*lead, n_joints, 3))

    blend_rot = reshape(
        matmul(model._weights_t, reshape(a_rot, (*lead, n_joints, 9))),
        (*lead, n_verts, 3, 3),
    )
    blend_trans = matmul(model._weights_t, a_trans)
    rotated = matmul(blend_rot, reshape(shaped, (*lead, n_verts, 3, 1)))
    vertices = reshape(rotated, (*lead, n_verts, 3)) + blend_trans
    return vertices, posed_joints


def forward_kinematics_lbs(model: BodyModel, theta, beta) -> PosedMesh:
    theta = theta if isinstance(theta, PoseTheta) else PoseTheta(theta)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (SHAPE_DIM,):
        raise ContractViolation(f"beta must have {SHAPE_DIM} entries, got {beta.shape}")
    vertices, joints = forward_kinematics_tensor(model, Tensor(theta.axis_angle), Tensor(beta))
    return PosedMesh(vertices.numpy(), joints.numpy())


def eval_joints(model: BodyModel, vertices) -> np.ndarray:
    """Evaluation skeleton (e.g. h36m17) regressed from posed vertices."""
    if model.eval_regressor is None:
        raise ContractViolation("Body model has no evaluation regressor")
    return np.matmul(model.eval_regressor, np.asarray(vertices, dtype=np.float64))


# -- desk model --------------------------------------------------------------


def _vertex_groups(num_vertices: int, num_joints: int) -> Sequence[np.ndarray]:
    per_joint, extra = divmod(num_vertices, num_joints)
    groups, start = [], 0
    for j in range(num_joints):
        size = per_joint + (1 if j < extra else 0)
        groups.append(np.arange(start, start + size))
        start += size
    return groups


def _ring_frame(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    direction = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


def make_desk_model(num_vertices: int = 120, seed: int = 0) -> BodyModel:
    """
    Deterministic synthetic body on the SMPL kinematic tree.

    Each joint owns a vertex group: a center vertex on the joint, fully
    weighted to it, and a ring around the incoming bone weighted 0.7/0.3
    between the joint and its parent (the root group is fully rigid). The
    regressor averages each group, and the evaluation regressor maps onto the
    h36m17 skeleton.
    """
    n_joints = NUM_BODY_JOINTS
    if num_vertices < n_joints:
        raise ContractViolation(f"desk model needs at least {n_joints} vertices")
    rng = make_rng(seed)
    groups = _vertex_groups(num_vertices, n_joints)

    template = np.zeros((num_vertices, 3))
    weights = np.zeros((num_vertices, n_joints))
    regressor = np.zeros((n_joints, num_vertices))
    faces = []
    for j, group in enumerate(groups):
        parent = SMPL_PARENTS[j]
        center = DESK_REST_JOINTS[j]
        template[group[0]] = center
        weights[group[0], j] = 1.0
        regressor[j, group] = 1.0 / len(group)

        ring = group[1:]
        bone = center - DESK_REST_JOINTS[parent] if parent >= 0 else np.array([0.0, 1.0, 0.0])
        u, w = _ring_frame(bone)
        radius = 0.08 if j in (0, 3, 6, 9) else 0.04
        for k, vid in enumerate(ring):
            phi = 2.0 * math.pi * k / len(ring)
            jitter = rng.normal(0.0, 0.002, size=3)
            template[vid] = center + radius * (math.cos(phi) * u + math.sin(phi) * w) + jitter
            if parent < 0:
                weights[vid, j] = 1.0
            else:
                weights[vid, j] = 0.7
                weights[vid, parent] = 0.3
        if len(ring) >= 3:
            for k in range(len(ring)):
                faces.append((group[0], ring[k], ring[(k + 1) % len(ring)]))

    # Smooth, deterministic shape space: stature, girth, then low-frequency bumps.
    shape_dirs = np.zeros((num_vertices, 3, SHAPE_DIM))
    shape_dirs[:, 1, 0] = 0.1 * template[:, 1]
    shape_dirs[:, 0, 1] = 0.1 * template[:, 0]
    shape_dirs[:, 2, 1] = 0.1 * template[:, 2]
    shape_dirs[:, 0, 2] = 0.05 * np.sign(template[:, 0]) * np.clip(template[:, 1], 0.0, None)
    for k in range(3, SHAPE_DIM):
        freq = rng.normal(0.0, 3.0, size=(3, 3))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
        shape_dirs[:, :, k] = 0.02 * np.sin(template @ freq + phase)

    eval_regressor = np.zeros((H36M17.num_joints, num_vertices))
    for row, mix in enumerate(H36M_FROM_BODY):
        for body_joint, weight in mix.items():
            eval_regressor[row] += weight * regressor[body_joint]

    logger.debug(f"Built desk body model: {num_vertices} vertices, {len(faces)} faces")
    return BodyModel(
        template=template,
        shape_dirs=shape_dirs,
        joint_regressor=regressor,
        parents=SMPL_PARENTS,
        skin_weights=weights,
        eval_regressor=eval_regressor,
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
    )


def write_obj(path: Union[str, Path], vertices, faces=None) -> None:
    """ASCII OBJ: `v x y z` lines, then 1-based `f a b c` lines when faces are given."""
    vertices = np.asarray(vertices, dtype=np.float64)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    if faces is not None:
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces))
    atomic_write_text(path, "\n".join(lines) + "\n")

"""
Weak-perspective camera: uniform scale plus 2D translation, depth dropped.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .exceptions import ContractViolation
from .tensor_core import Tensor, as_tensor

CAMERA_DIM = 3


@dataclass(frozen=True)
class WeakPerspective:
    """Camera C = (s, t_x, t_y)."""

    s: float
    t: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "t", (float(self.t[0]), float(self.t[1])))
        if not np.isfinite([self.s, *self.t]).all():
            raise ContractViolation(f"Camera values must be finite, got {self.as_vector()}")
        if self.s <= 0:
            raise ContractViolation(f"Camera scale must be > 0, got {self.s}")

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> "WeakPerspective":
        values = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=float)
        if values.shape != (CAMERA_DIM,):
            raise ContractViolation(f"Camera vector must have 3 entries, got {values.shape}")
        return cls(values[0], (values[1], values[2]))

    def as_vector(self) -> np.ndarray:
        return np.array([self.s, self.t[0], self.t[1]])


def weak_perspective_project(joints, cam: WeakPerspective) -> np.ndarray:
    """s·(x, y) + (t_x, t_y) for each joint."""
    joints = np.asarray(joints.data if isinstance(joints, Tensor) else joints, dtype=float)
    if joints.ndim != 2 or joints.shape[1] != 3:
        raise ContractViolation(f"Expected J×3 joints, got {joints.shape}")
    if cam.s <= 0:
        raise ContractViolation(f"Camera scale must be > 0, got {cam.s}")
    return cam.s * joints[:, :2] + np.asarray(cam.t)


def project_tensor(joints: Tensor, cam: Tensor) -> Tensor:
    """Differentiable projection of …×J×3 joints with …×3 camera vectors."""
    joints, cam = as_tensor(joints), as_tensor(cam)
    if joints.dims[-1] != 3 or cam.dims[-1] != CAMERA_DIM:
        raise ContractViolation(f"project_tensor: joints {joints.dims}, camera {cam.dims}")
    scale = cam[..., 0:1][..., None, :]
    shift = cam[..., 1:3][..., None, :]
    return joints[..., 0:2] * scale + shift

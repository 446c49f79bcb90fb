"""
liftmesh

Pose-based human mesh recovery: a graph-transformer lifter turns a 2D skeleton
into 3D joints, body shape and a weak-perspective camera; a two-branch
pose/shape estimator regresses body-model pose angles that forward kinematics
turns into a mesh.
"""

__version__ = "0.1.0"

from .body_model import BodyModel, forward_kinematics_lbs, make_desk_model
from .config import PipelineConfig, load_config
from .exceptions import LiftMeshError
from .lifter import LifterParams, lifter_forward
from .metrics import evaluate, mpjpe, pa_mpjpe
from .pose_shape_estimator import MeshResult, PseParams, full_pipeline
from .skeleton import Pose2D, Pose3D, get_topology

__all__ = [
    "BodyModel",
    "LiftMeshError",
    "LifterParams",
    "MeshResult",
    "PipelineConfig",
    "Pose2D",
    "Pose3D",
    "PseParams",
    "evaluate",
    "forward_kinematics_lbs",
    "full_pipeline",
    "get_topology",
    "lifter_forward",
    "load_config",
    "make_desk_model",
    "mpjpe",
    "pa_mpjpe",
]

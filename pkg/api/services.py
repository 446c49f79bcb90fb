"""
Services holding the loaded model bundle and running inference.
"""

import logging
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

# Make the src layout importable when running from a checkout
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
from liftmesh.body_model import BodyModel, load_body_model, make_desk_model
from liftmesh.config import load_config
from liftmesh.exceptions import IngestionError
from liftmesh.io_formats import load_checkpoint
from liftmesh.lifter import LifterOutput, LifterParams, init_lifter_params, lifter_forward
from liftmesh.pose_shape_estimator import (MeshResult, PseParams, full_pipeline,
                                           init_pse_params, split_checkpoint)
from liftmesh.skeleton import H36M17, Pose2D, get_topology, map_coco_to_h36m
from liftmesh.utils import make_rng

from .config import settings

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelBundle:
    lifter: LifterParams
    pse: PseParams
    body: BodyModel
    source: str


class PipelineService:
    """Loads the model bundle once and serves lift/mesh requests."""

    _bundle: Optional[ModelBundle] = None
    _lock = threading.Lock()

    @classmethod
    def get_bundle(cls) -> ModelBundle:
        if cls._bundle is None:
            with cls._lock:
                if cls._bundle is None:
                    cls._bundle = cls._load()
        return cls._bundle

    @classmethod
    def reset(cls) -> None:
        with cls._lock:
            cls._bundle = None

    @staticmethod
    def _load() -> ModelBundle:
        cfg = load_config(settings.CONFIG_PATH)
        if settings.BODY_PATH:
            body = load_body_model(settings.BODY_PATH)
        else:
            body = make_desk_model(cfg.body_vertices)

        if settings.CHECKPOINT_PATH:
            lifter, pse = split_checkpoint(load_checkpoint(settings.CHECKPOINT_PATH))
            source = settings.CHECKPOINT_PATH
        else:
            rng = make_rng(settings.INIT_SEED)
            topology = cfg.resolve_topology()
            lifter = init_lifter_params(cfg.lifter, topology, rng)
            input_dim = cfg.lifter.dim if cfg.pse.source_mode == "features" else 3
            pse = init_pse_params(cfg.pse, topology.num_joints, input_dim, body, rng)
            source = f"init(seed={settings.INIT_SEED})"
        logger.info(f"Model bundle ready from {source}")
        return ModelBundle(lifter, pse, body, source)

    @staticmethod
    def _pose(joints, topology: str, expected: int) -> Pose2D:
        get_topology(topology)
        pose = Pose2D(np.asarray(joints, dtype=float), None, topology)
        if topology == "coco17" and expected == H36M17.num_joints:
            pose = map_coco_to_h36m(pose)
        if pose.num_joints != expected:
            raise IngestionError(
                f"Pose has {pose.num_joints} joints, model expects {expected}"
            )
        return pose

    @classmethod
    def lift(cls, joints, topology: str) -> LifterOutput:
        bundle = cls.get_bundle()
        pose = cls._pose(joints, topology, bundle.lifter.config.joints)
        return lifter_forward(pose, bundle.lifter)

    @classmethod
    def mesh(cls, joints, topology: str) -> MeshResult:
        bundle = cls.get_bundle()
        pose = cls._pose(joints, topology, bundle.lifter.config.joints)
        return full_pipeline(pose, bundle.lifter, bundle.pse, bundle.body)

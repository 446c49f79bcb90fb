"""
Joint topologies, skeleton adjacency and pose records.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .exceptions import (ConfigError, ContractViolation, TopologyError,
                         TopologyNotFoundError)
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TOPOLOGY = "h36m17"


@dataclass(frozen=True)
class SkeletonTopology:
    """Named joint tree; edges are (parent, child) pairs."""

    name: str
    joint_names: Tuple[str, ...]
    edges: Tuple[Tuple[int, int], ...]
    root: int = 0

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(
            self, "edges", tuple((int(a), int(b)) for a, b in self.edges)
        )
        self._validate()

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def index(self, joint_name: str) -> int:
        try:
            return self.joint_names.index(joint_name)
        except ValueError:
            raise TopologyError(f"Joint '{joint_name}' not in topology {self.name}")

    def parents(self) -> Tuple[int, ...]:
        """Parent index per joint, -1 for the root."""
        parent = [-1] * self.num_joints
        for a, b in self.edges:
            parent[b] = a
        return tuple(parent)

    def _validate(self) -> None:
        n = self.num_joints
        if n < 1:
            raise TopologyError(f"Topology {self.name} has no joints")
        if not 0 <= self.root < n:
            raise TopologyError(f"Root {self.root} out of range for {n} joints")
        if len(self.edges) != n - 1:
            raise TopologyError(
                f"Topology {self.name}: a tree over {n} joints needs {n - 1} edges, "
                f"got {len(self.edges)}"
            )

        neighbours: List[List[int]] = [[] for _ in range(n)]
        children_seen = set()
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise TopologyError(f"Edge ({a}, {b}) out of range for {n} joints")
            if a == b:
                raise TopologyError(f"Self-loop on joint {a}")
            if b == self.root or b in children_seen:
                raise TopologyError(f"Joint {b} has more than one parent")
            children_seen.add(b)
            neighbours[a].append(b)
            neighbours[b].append(a)

        seen = {self.root}
        queue = deque([self.root])
        while queue:
            j = queue.popleft()
            for k in neighbours[j]:
                if k not in seen:
                    seen.add(k)
                    queue.append(k)
        if len(seen) != n:
            raise TopologyError(f"Topology {self.name} is not connected")


def _read_only(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose2D:
    """J×2 joint coordinates with optional per-joint confidence."""

    coords: np.ndarray
    confidence: Optional[np.ndarray] = None
    topology: Optional[str] = None

    def __post_init__(self):
        coords = _read_only(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ContractViolation(f"Pose2D coords must be J×2, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ContractViolation("Pose2D coords must be finite")
        object.__setattr__(self, "coords", coords)
        if self.confidence is not None:
            conf = _read_only(self.confidence)
            if conf.shape != (coords.shape[0],):
                raise ContractViolation(
                    f"confidence length {conf.shape} does not match {coords.shape[0]} joints"
                )
            object.__setattr__(self, "confidence", conf)

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class Pose3D:
    """J×3 joint coordinates in millimeters, root-relative unless stated."""

    coords: np.ndarray
    topology: Optional[str] = None

    def __post_init__(self):
        coords = _read_only(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ContractViolation(f"Pose3D coords must be J×3, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ContractViolation("Pose3D coords must be finite")
        object.__setattr__(self, "coords", coords)

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]

    def root_relative(self, root: int = 0) -> "Pose3D":
        return Pose3D(self.coords - self.coords[root], self.topology)


H36M17 = SkeletonTopology(
    name="h36m17",
    joint_names=(
        "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
        "spine", "neck", "nose", "head",
        "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    ),
    edges=(
        (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8),
        (8, 9), (9, 10), (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16),
    ),
    root=0,
)

COCO17 = SkeletonTopology(
    name="coco17",
    joint_names=(
        "nose", "l_eye", "r_eye", "l_ear", "r_ear",
        "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
        "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
    ),
    edges=(
        (0, 1), (0, 2), (1, 3), (2, 4), (0, 5), (0, 6), (5, 7), (7, 9),
        (6, 8), (8, 10), (5, 11), (6, 12), (11, 13), (13, 15), (12, 14), (14, 16),
    ),
    root=0,
)

_TOPOLOGIES: Dict[str, SkeletonTopology] = {H36M17.name: H36M17, COCO17.name: COCO17}

# h36m17 joint -> COCO source joints; synthesized joints average their sources.
COCO_TO_H36M: Tuple[Tuple[int, ...], ...] = (
    (11, 12),        # pelvis
    (12,),           # r_hip
    (14,),           # r_knee
    (16,),           # r_ankle
    (11,),           # l_hip
    (13,),           # l_knee
    (15,),           # l_ankle
    (11, 12, 5, 6),  # spine: midpoint of pelvis and neck
    (5, 6),          # neck
    (0,),            # nose
    (1, 2),          # head
    (5,), (7,), (9,),
    (6,), (8,), (10,),
)


def default_topologies() -> Dict[str, SkeletonTopology]:
    return dict(_TOPOLOGIES)


def get_topology(name: str) -> SkeletonTopology:
    try:
        return _TOPOLOGIES[name]
    except KeyError:
        raise TopologyNotFoundError(
            f"Unknown topology '{name}' (available: {', '.join(sorted(_TOPOLOGIES))})"
        )


def build_adjacency(topology: SkeletonTopology) -> Tensor:
    """Symmetric normalized adjacency D^-1/2 (A + I) D^-1/2."""
    n = topology.num_joints
    a = np.eye(n)
    for i, j in topology.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return Tensor(a * np.outer(inv_sqrt, inv_sqrt))


def complete_adjacency(n: int) -> Tensor:
    """Normalized complete graph with self-loops; every entry is 1/n."""
    if n < 1:
        raise ContractViolation(f"complete_adjacency needs n >= 1, got {n}")
    return Tensor(np.full((n, n), 1.0 / n))


def map_coco_to_h36m(pose: Pose2D) -> Pose2D:
    """Remap a COCO-17 pose onto the h36m17 joint order."""
    if pose.num_joints != COCO17.num_joints:
        raise ContractViolation(f"Expected 17 COCO joints, got {pose.num_joints}")
    if pose.topology not in (None, COCO17.name):
        raise ContractViolation(f"Expected a coco17 pose, got topology {pose.topology}")

    coords = np.stack([pose.coords[list(src)].mean(axis=0) for src in COCO_TO_H36M])
    confidence = None
    if pose.confidence is not None:
        confidence = np.array([pose.confidence[list(src)].min() for src in COCO_TO_H36M])
    return Pose2D(coords, confidence, H36M17.name)


def topology_to_config(topology: SkeletonTopology) -> Dict[str, str]:
    """Flat key=value form of a topology."""
    return {
        "topology.name": topology.name,
        "topology.joints": ",".join(topology.joint_names),
        "topology.edges": ",".join(f"{a}-{b}" for a, b in topology.edges),
        "topology.root": str(topology.root),
    }


def topology_from_config(values: Mapping[str, str]) -> SkeletonTopology:
    """Inverse of topology_to_config."""
    missing = [k for k in ("topology.name", "topology.joints") if not values.get(k)]
    if "topology.edges" not in values:
        missing.append("topology.edges")
    if missing:
        raise ConfigError(f"Topology definition missing keys: {', '.join(missing)}")

    names = tuple(n.strip() for n in values["topology.joints"].split(","))
    edges = []
    raw_edges = (values["topology.edges"] or "").strip()
    for token in raw_edges.split(",") if raw_edges else ():
        try:
            a, b = token.split("-")
            edges.append((int(a), int(b)))
        except ValueError:
            raise ConfigError(f"Malformed edge '{token}' (expected parent-child)")
    try:
        root = int(values.get("topology.root") or 0)
    except ValueError:
        raise ConfigError(f"Malformed topology.root '{values.get('topology.root')}'")
    return SkeletonTopology(values["topology.name"].strip(), names, tuple(edges), root)

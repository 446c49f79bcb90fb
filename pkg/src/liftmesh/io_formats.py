"""
File formats: the binary tensor container, line-delimited pose records and
COCO keypoint ingestion.

Container layout (little-endian, no padding)::

    header   magic b"LMTC" | version u32 | entry count u64
    entry    name length u32 | UTF-8 name | dtype u32 | rank u32 |
             dims u64 × rank | payload (8 bytes per element)

dtype 0 is float64, dtype 1 is int64.
"""

import json
import logging
import math
import struct
from pathlib import Path
from typing import (Any, Dict, Iterable, Iterator, List, Mapping, Optional,
                    Tuple, Union)

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .exceptions import CheckpointIOError, FormatError, IngestionError
from .skeleton import COCO17, DEFAULT_TOPOLOGY, Pose2D, Pose3D, get_topology
from .tensor_core import Tensor
from .utils import atomic_write_bytes, atomic_write_text, read_bytes

logger = logging.getLogger(__name__)

MAGIC = b"LMTC"
VERSION = 1
DTYPE_F64 = 0
DTYPE_I64 = 1

_HEADER = struct.Struct("<4sIQ")
_U32 = struct.Struct("<I")
_ENTRY_META = struct.Struct("<II")
_DIM = struct.Struct("<Q")

_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_I64: np.dtype("<i8")}

TensorLike = Union[Tensor, np.ndarray]


def _entry_array(name: str, value: TensorLike) -> Tuple[int, np.ndarray]:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return DTYPE_I64, arr.astype("<i8")
    if np.issubdtype(arr.dtype, np.floating):
        return DTYPE_F64, arr.astype("<f8")
    raise FormatError(f"Unsupported dtype {arr.dtype}", entry=name)


def encode_container(named: Mapping[str, TensorLike]) -> bytes:
    """Serialize named tensors; identical input always yields identical bytes."""
    parts = [_HEADER.pack(MAGIC, VERSION, len(named))]
    for name, value in named.items():
        dtype, arr = _entry_array(name, value)
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_ENTRY_META.pack(dtype, arr.ndim))
        parts.extend(_DIM.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> Dict[str, np.ndarray]:
    """Parse a container; every returned array is read-only."""
    view = memoryview(buf)
    if len(view) < _HEADER.size:
        raise FormatError(f"Truncated header ({len(view)} bytes)")
    magic, version, count = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise FormatError(f"Unsupported container version {version}")

    offset = _HEADER.size
    out: Dict[str, np.ndarray] = {}

    def take(size: int, what: str, entry: Optional[str]) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise FormatError(f"Truncated {what}", entry=entry)
        chunk = view[offset:offset + size]
        offset += size
        return chunk

    for index in range(count):
        label = f"#{index}"
        (name_len,) = _U32.unpack(take(_U32.size, "name length", label))
        try:
            name = bytes(take(name_len, "name", label)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("Entry name is not valid UTF-8", entry=label)
        if name in out:
            raise FormatError("Duplicate entry name", entry=name)
        dtype, rank = _ENTRY_META.unpack(take(_ENTRY_META.size, "entry header", name))
        if dtype not in _DTYPES:
            raise FormatError(f"Unknown dtype code {dtype}", entry=name)
        dims = tuple(
            _DIM.unpack(take(_DIM.size, "dims", name))[0] for _ in range(rank)
        )
        count_elems = math.prod(dims)
        if 8 * count_elems > len(view) - offset:
            raise FormatError("dims exceed payload", entry=name)
        payload = take(8 * count_elems, "payload", name)
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims)
        arr = arr.astype(np.float64 if dtype == DTYPE_F64 else np.int64)
        arr.setflags(write=False)
        out[name] = arr

    if offset != len(view):
        raise FormatError(f"{len(view) - offset} trailing bytes after last entry")
    return out


def save_checkpoint(path: Union[str, Path], named: Mapping[str, TensorLike]) -> None:
    """Write a container atomically."""
    payload = encode_container(named)
    atomic_write_bytes(path, payload)
    logger.info(f"Wrote {len(named)} tensors ({len(payload)} bytes) to {path}")


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    named = decode_container(read_bytes(path))
    logger.debug(f"Loaded {len(named)} tensors from {path}")
    return named


# -- pose records ----------------------------------------------------------


class PoseRecord(BaseModel):
    """One line of a pose file."""

    model_config = ConfigDict(extra="ignore")

    id: Union[int, str]
    topology: str = DEFAULT_TOPOLOGY
    joints: Optional[List[List[float]]] = None
    conf: Optional[List[float]] = None
    gt3d: Optional[List[List[float]]] = None
    gt_vertices: Optional[List[List[float]]] = None
    gt_theta: Optional[List[float]] = None
    gt_beta: Optional[List[float]] = None
    gt_cam: Optional[List[float]] = None
    joints3d: Optional[List[List[float]]] = None
    vertices: Optional[List[List[float]]] = None

    def to_pose2d(self) -> Pose2D:
        if self.joints is None:
            raise IngestionError("Record has no 2D joints", record_id=self.id)
        return Pose2D(np.asarray(self.joints), self.conf, self.topology)

    def joints_3d(self, prefer_gt: bool = False) -> np.ndarray:
        """Predicted joints if present, otherwise ground truth (or the reverse)."""
        first, second = (self.gt3d, self.joints3d) if prefer_gt else (self.joints3d, self.gt3d)
        coords = first if first is not None else second
        if coords is None:
            raise IngestionError("Record has no 3D joints", record_id=self.id)
        return Pose3D(np.asarray(coords), self.topology).coords

    def mesh_vertices(self, prefer_gt: bool = False) -> np.ndarray:
        first, second = (
            (self.gt_vertices, self.vertices) if prefer_gt else (self.vertices, self.gt_vertices)
        )
        coords = first if first is not None else second
        if coords is None:
            raise IngestionError("Record has no mesh vertices", record_id=self.id)
        arr = np.asarray(coords, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise IngestionError(f"Vertices must be V×3, got {arr.shape}", record_id=self.id)
        return arr


def _check_record(record: PoseRecord) -> None:
    topology = get_topology(record.topology)
    for field in ("joints", "gt3d", "joints3d"):
        rows = getattr(record, field)
        if rows is None:
            continue
        width = 2 if field == "joints" else 3
        if len(rows) != topology.num_joints:
            raise IngestionError(
                f"'{field}' has {len(rows)} joints, topology {topology.name} "
                f"needs {topology.num_joints}",
                record_id=record.id,
            )
        if any(len(row) != width for row in rows):
            raise IngestionError(f"'{field}' rows must have {width} values", record_id=record.id)
    if record.conf is not None and len(record.conf) != topology.num_joints:
        raise IngestionError("'conf' length does not match joints", record_id=record.id)


def parse_pose_lines(lines: Iterable[str]) -> Iterator[PoseRecord]:
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise IngestionError(f"Malformed JSON on line {line_no}: {e.msg}")
        try:
            record = PoseRecord.model_validate(raw)
        except ValidationError as e:
            record_id = raw.get("id") if isinstance(raw, dict) else None
            raise IngestionError(
                f"Invalid pose record on line {line_no}: {e.error_count()} errors",
                record_id=record_id,
            )
        _check_record(record)
        yield record


def read_pose_file(path: Union[str, Path]) -> List[PoseRecord]:
    text = read_bytes(path).decode("utf-8", errors="strict")
    records = list(parse_pose_lines(text.splitlines()))
    logger.info(f"Read {len(records)} pose records from {path}")
    return records


def to_json_line(payload: Mapping[str, Any]) -> str:
    return json.dumps(payload, separators=(",", ":"))


def record_to_json(record: PoseRecord) -> str:
    return to_json_line(record.model_dump(exclude_none=True))


def write_pose_file(path: Union[str, Path], records: Iterable[PoseRecord]) -> None:
    atomic_write_text(path, "".join(record_to_json(r) + "\n" for r in records))


# -- COCO keypoints --------------------------------------------------------


def iter_coco_keypoints(path: Union[str, Path]) -> Iterator[Tuple[Any, Pose2D]]:
    """Yield (annotation id, coco17 Pose2D) for each person annotation."""
    try:
        document = json.loads(read_bytes(path).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise IngestionError(f"Malformed COCO JSON in {path}: {e}")
    annotations = document.get("annotations") if isinstance(document, dict) else None
    if not isinstance(annotations, list):
        raise IngestionError(f"{path} has no 'annotations' list")

    n_values = 3 * COCO17.num_joints
    for index, ann in enumerate(annotations):
        ann_id = ann.get("id", index) if isinstance(ann, dict) else index
        keypoints = ann.get("keypoints") if isinstance(ann, dict) else None
        if not isinstance(keypoints, list) or len(keypoints) != n_values:
            count = len(keypoints) if isinstance(keypoints, list) else "no"
            raise IngestionError(
                f"Expected {n_values} keypoint values, got {count}", record_id=ann_id
            )
        try:
            triplets = np.asarray(keypoints, dtype=float).reshape(COCO17.num_joints, 3)
        except (TypeError, ValueError):
            raise IngestionError("Keypoints must be numeric", record_id=ann_id)
        confidence = (triplets[:, 2] > 0).astype(float)
        yield ann_id, Pose2D(triplets[:, :2], confidence, COCO17.name)


def read_coco_keypoints(path: Union[str, Path]) -> List[Pose2D]:
    return [pose for _, pose in iter_coco_keypoints(path)]

"""
Evaluation metrics: MPJPE, PA-MPJPE and MPVE (all in millimeters).

MPJPE aligns root joints by translation; PA-MPJPE first applies the
least-squares similarity transform (scale, rotation, translation) from
pred to ground truth; MPVE aligns mesh centroids.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .exceptions import AlignmentError, ContractViolation
from .skeleton import Pose3D

logger = logging.getLogger(__name__)

_RANK_TOL = 1e-12


def _coords(pose) -> np.ndarray:
    arr = pose.coords if isinstance(pose, Pose3D) else np.asarray(pose, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractViolation(f"Expected J×3 joints, got {arr.shape}")
    return arr


def _check_pair(pred: np.ndarray, gt: np.ndarray, what: str = "joint") -> None:
    if pred.shape != gt.shape:
        raise ContractViolation(f"{what} count mismatch: {pred.shape} vs {gt.shape}")


def per_joint_errors(pred, gt, root: int = 0) -> np.ndarray:
    """Per-joint Euclidean distances after root translation alignment."""
    pred, gt = _coords(pred), _coords(gt)
    _check_pair(pred, gt)
    if not 0 <= root < pred.shape[0]:
        raise ContractViolation(f"root {root} out of range for {pred.shape[0]} joints")
    return np.linalg.norm((pred - pred[root]) - (gt - gt[root]), axis=1)


def mpjpe(pred, gt, root: int = 0) -> float:
    return float(np.mean(per_joint_errors(pred, gt, root)))


@dataclass(frozen=True)
class Similarity:
    """x ↦ s·R·x + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes_align(pred, gt) -> Similarity:
    """Least-squares similarity transform taking pred onto gt, without reflections."""
    pred, gt = _coords(pred), _coords(gt)
    _check_pair(pred, gt)
    if pred.shape[0] < 3:
        raise AlignmentError(f"Procrustes needs at least 3 joints, got {pred.shape[0]}")

    mu_pred = pred.mean(axis=0)
    mu_gt = gt.mean(axis=0)
    x = pred - mu_pred
    y = gt - mu_gt

    var_pred = float(np.sum(x * x))
    if var_pred <= 0.0:
        raise AlignmentError("Prediction has zero variance")
    gt_sv = np.linalg.svd(y, compute_uv=False)
    if gt_sv[0] <= 0.0 or gt_sv[1] <= _RANK_TOL * gt_sv[0]:
        raise AlignmentError("Ground truth is degenerate (collinear or coincident)")

    cov = y.T @ x
    u, sv, vt = np.linalg.svd(cov)
    correction = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        correction[2, 2] = -1.0
    rotation = u @ correction @ vt
    scale = float(np.sum(sv * np.diag(correction)) / var_pred)
    translation = mu_gt - scale * rotation @ mu_pred
    return Similarity(scale, rotation, translation)


def pa_mpjpe(pred, gt) -> float:
    """
    Mean per-joint error after Procrustes alignment.

    The alignment minimizes the summed squared error, so that sum never exceeds
    the unaligned one. The mean Euclidean error carries no such bound: a single
    outlier joint gets its error spread over the others, and the result can be
    larger than mpjpe.
    """
    pred, gt = _coords(pred), _coords(gt)
    aligned = procrustes_align(pred, gt).apply(pred)
    return float(np.mean(np.linalg.norm(aligned - gt, axis=1)))


def mpve(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex distance after centroid alignment."""
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 3:
        raise ContractViolation(f"Expected V×3 vertices, got {pred.shape}")
    _check_pair(pred, gt, "vertex")
    offset = gt.mean(axis=0) - pred.mean(axis=0)
    return float(np.mean(np.linalg.norm(pred + offset - gt, axis=1)))


class EvalReport(BaseModel):
    """Aggregate metrics in millimeters."""

    mpjpe_mm: float = Field(ge=0.0)
    pa_mpjpe_mm: float = Field(ge=0.0)
    mpve_mm: Optional[float] = Field(default=None, ge=0.0)
    n_samples: int = Field(ge=0)
    per_joint_mm: List[float] = Field(default_factory=list)

    def to_text(self) -> str:
        """Flat key=value report."""
        lines = [
            f"mpjpe_mm={self.mpjpe_mm!r}",
            f"pa_mpjpe_mm={self.pa_mpjpe_mm!r}",
        ]
        if self.mpve_mm is not None:
            lines.append(f"mpve_mm={self.mpve_mm!r}")
        lines.append(f"n_samples={self.n_samples}")
        lines.extend(f"joint_{i}_mm={v!r}" for i, v in enumerate(self.per_joint_mm))
        return "\n".join(lines) + "\n"


def _sample_metrics(args: Tuple[np.ndarray, np.ndarray, int]) -> Tuple[np.ndarray, float]:
    pred, gt, root = args
    return per_joint_errors(pred, gt, root), pa_mpjpe(pred, gt)


def evaluate(
    preds: Sequence,
    gts: Sequence,
    mesh_preds: Optional[Sequence] = None,
    mesh_gts: Optional[Sequence] = None,
    root: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Per-sample metrics averaged in sample order."""
    if len(preds) != len(gts):
        raise ContractViolation(f"{len(preds)} predictions for {len(gts)} ground truths")
    if (mesh_preds is None) != (mesh_gts is None):
        raise ContractViolation("mesh predictions and ground truths must be given together")
    if not preds:
        return EvalReport(mpjpe_mm=0.0, pa_mpjpe_mm=0.0, n_samples=0)

    jobs = [(_coords(p), _coords(g), root) for p, g in zip(preds, gts)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sample_metrics, jobs))
    else:
        results = [_sample_metrics(job) for job in jobs]

    per_joint = np.stack([r[0] for r in results])
    pa_values = np.array([r[1] for r in results])

    mpve_value = None
    if mesh_preds is not None:
        if len(mesh_preds) != len(mesh_gts):
            raise ContractViolation(
                f"{len(mesh_preds)} predicted meshes for {len(mesh_gts)} ground truths"
            )
        mpve_value = float(np.mean([mpve(p, g) for p, g in zip(mesh_preds, mesh_gts)]))

    report = EvalReport(
        mpjpe_mm=float(np.mean(per_joint.mean(axis=1))),
        pa_mpjpe_mm=float(np.mean(pa_values)),
        mpve_mm=mpve_value,
        n_samples=len(preds),
        per_joint_mm=per_joint.mean(axis=0).tolist(),
    )
    logger.info(
        f"Evaluated {report.n_samples} samples: MPJPE {report.mpjpe_mm:.2f} mm, "
        f"PA-MPJPE {report.pa_mpjpe_mm:.2f} mm"
    )
    return report

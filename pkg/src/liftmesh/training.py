"""
Desk-scale supervised training: synthetic data, losses, Adam and the loop.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .body_model import BodyModel, eval_joints, forward_kinematics_tensor
from .camera import WeakPerspective, project_tensor, weak_perspective_project
from .config import NUM_BODY_JOINTS, SHAPE_DIM, THETA_DIM, TrainConfig
from .exceptions import ContractViolation, NumericalError
from .lifter import LifterParams, LifterTensors, lifter_forward_tensor
from .pose_shape_estimator import (MM_PER_M, PipelineTensors, PseParams,
                                   pipeline_forward_tensor)
from .tensor_core import Tape, Tensor, mean, square, tensor_abs
from .utils import atomic_write_text, make_rng

logger = logging.getLogger(__name__)

THETA_RANGE = 0.4
BETA_RANGE = 2.0
SCALE_RANGE = (0.8, 1.2)
TRANSLATION_RANGE = 0.1


@dataclass(frozen=True)
class SynthSample:
    """One exactly realizable training example; 3D joints are root-relative mm."""

    gt_theta: np.ndarray
    gt_beta: np.ndarray
    gt_cam: WeakPerspective
    gt_joints3d: np.ndarray
    gt_vertices: np.ndarray
    pose2d: np.ndarray


@dataclass(frozen=True)
class SynthBatch:
    """Stacked sample arrays (leading dim = batch)."""

    pose2d: np.ndarray
    joints3d: np.ndarray
    vertices: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    camera: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[SynthSample]) -> "SynthBatch":
        return cls(
            pose2d=np.stack([s.pose2d for s in samples]),
            joints3d=np.stack([s.gt_joints3d for s in samples]),
            vertices=np.stack([s.gt_vertices for s in samples]),
            theta=np.stack([s.gt_theta for s in samples]),
            beta=np.stack([s.gt_beta for s in samples]),
            camera=np.stack([s.gt_cam.as_vector() for s in samples]),
        )

    def __len__(self) -> int:
        return self.pose2d.shape[0]

    def select(self, indices: np.ndarray) -> "SynthBatch":
        return SynthBatch(*(getattr(self, f)[indices] for f in self.__dataclass_fields__))


def make_synth_dataset(
    n: int, model: BodyModel, seed: int, noise_sigma: float = 0.0
) -> List[SynthSample]:
    """
    Random poses, shapes and cameras pushed through the body model.

    Non-root joints rotate within ±0.4 rad per axis, the root only yaws in
    [-π, π]. 2D inputs are the exact reprojection of the root-relative joints
    plus Gaussian noise of std ``noise_sigma``.
    """
    if n < 1:
        raise ContractViolation(f"dataset size must be >= 1, got {n}")
    if noise_sigma < 0:
        raise ContractViolation(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = make_rng(seed)

    theta = rng.uniform(-THETA_RANGE, THETA_RANGE, size=(n, NUM_BODY_JOINTS, 3))
    theta[:, 0, :] = 0.0
    theta[:, 0, 1] = rng.uniform(-math.pi, math.pi, size=n)
    beta = rng.uniform(-BETA_RANGE, BETA_RANGE, size=(n, SHAPE_DIM))
    scale = rng.uniform(*SCALE_RANGE, size=n)
    shift = rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE, size=(n, 2))
    noise = rng.normal(0.0, 1.0, size=(n, model.eval_regressor.shape[0], 2)) if noise_sigma > 0 else None

    vertices, _ = forward_kinematics_tensor(
        model, Tensor(theta.reshape(n, THETA_DIM)), Tensor(beta)
    )
    vertices = vertices.numpy()
    samples = []
    for i in range(n):
        joints_m = eval_joints(model, vertices[i])
        joints_m = joints_m - joints_m[0]
        cam = WeakPerspective(scale[i], (shift[i, 0], shift[i, 1]))
        pose2d = weak_perspective_project(joints_m, cam)
        if noise is not None:
            pose2d = pose2d + noise_sigma * noise[i]
        samples.append(
            SynthSample(
                gt_theta=theta[i].reshape(THETA_DIM),
                gt_beta=beta[i],
                gt_cam=cam,
                gt_joints3d=joints_m * MM_PER_M,
                gt_vertices=vertices[i],
                pose2d=pose2d,
            )
        )
    logger.info(f"Generated {n} synthetic samples (seed {seed}, σ={noise_sigma})")
    return samples


# -- losses ----------------------------------------------------------------


def _distance(pred: Tensor, target: np.ndarray, kind: str, name: str) -> Tensor:
    if pred.dims != target.shape:
        raise ContractViolation(f"{name} term: prediction {pred.dims} vs target {target.shape}")
    diff = pred - target
    return mean(tensor_abs(diff) if kind == "l1" else square(diff))


def total_loss(
    output: Union[PipelineTensors, LifterTensors],
    target: SynthBatch,
    cfg: TrainConfig,
) -> Tuple[Tensor, Dict[str, float]]:
    """
    Weighted sum of mean L1 (or L2) terms. Joint and vertex terms are in mm,
    the reprojection term in normalized image units; zero-weight terms are
    skipped entirely.
    """
    lifted = output.lifter if isinstance(output, PipelineTensors) else output
    weights = cfg.effective_weights()
    kind = cfg.loss_kind

    def needs_mesh(term: str) -> PipelineTensors:
        if not isinstance(output, PipelineTensors):
            raise ContractViolation(f"'{term}' term needs the full pipeline output")
        return output

    terms: Dict[str, Tensor] = {}
    if weights["3d"] > 0:
        terms["3d"] = _distance(lifted.joints3d, target.joints3d, kind, "3d")
    if weights["2d"] > 0:
        projected = project_tensor(lifted.joints3d / MM_PER_M, lifted.camera)
        terms["2d"] = _distance(projected, target.pose2d, kind, "2d")
    if weights["beta"] > 0:
        terms["beta"] = _distance(lifted.shape, target.beta, kind, "beta")
    if weights["cam"] > 0:
        terms["cam"] = _distance(lifted.camera, target.camera, kind, "cam")
    if weights["theta"] > 0:
        terms["theta"] = _distance(needs_mesh("theta").trace.final, target.theta, kind, "theta")
    if weights["vert"] > 0:
        terms["vert"] = _distance(
            needs_mesh("vert").vertices * MM_PER_M, target.vertices * MM_PER_M, kind, "vert"
        )
    if not terms:
        raise ContractViolation(f"All loss weights are zero in mode {cfg.mode}")

    loss = None
    for name, value in terms.items():
        weighted = value * weights[name]
        loss = weighted if loss is None else loss + weighted
    return loss, {name: value.item() for name, value in terms.items()}


# -- optimizer -------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = np.asarray(grads[name])
        if g.shape != np.shape(value):
            raise ContractViolation(f"gradient for {name} has dims {g.shape}, expected {np.shape(value)}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = value - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


# -- loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    lifter: LifterParams
    pse: PseParams
    losses: List[float]
    mpjpe: List[float]


CheckpointCallback = Callable[[int, LifterParams, PseParams], None]


def batch_mpjpe(pred_mm: np.ndarray, gt_mm: np.ndarray, root: int = 0) -> float:
    pred = pred_mm - pred_mm[..., root:root + 1, :]
    gt = gt_mm - gt_mm[..., root:root + 1, :]
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def _forward(
    mode: str,
    batch: SynthBatch,
    lifter: LifterParams,
    pse: PseParams,
    model: BodyModel,
    rng: Optional[np.random.Generator],
) -> Union[PipelineTensors, LifterTensors]:
    coords = Tensor(batch.pose2d)
    if mode == "lifter-only":
        return lifter_forward_tensor(coords, lifter, rng)
    if mode == "pse-only":
        joints = Tensor(batch.joints3d) if pse.config.source_mode == "joints" else None
        return pipeline_forward_tensor(
            coords, lifter, pse, model, rng,
            joints_override=joints, beta_override=Tensor(batch.beta),
        )
    return pipeline_forward_tensor(coords, lifter, pse, model, rng)


def train_loop(
    cfg: TrainConfig,
    data: Sequence[SynthSample],
    lifter: LifterParams,
    pse: PseParams,
    model: BodyModel,
    on_checkpoint: Optional[CheckpointCallback] = None,
) -> TrainResult:
    """
    Forward, loss, backward and Adam for ``cfg.steps`` steps.

    lifter-only updates only the lifter, pse-only only the estimator (lifter
    frozen, ground-truth β for kinematics and ground-truth P in joints mode),
    end-to-end updates both.
    """
    if not data:
        raise ContractViolation("train_loop needs at least one sample")
    dataset = SynthBatch.from_samples(data)
    rng = make_rng(cfg.seed)
    train_lifter = cfg.mode in ("lifter-only", "end-to-end")
    train_pse = cfg.mode in ("pse-only", "end-to-end")

    state = AdamState()
    losses: List[float] = []
    mpjpe_curve: List[float] = []
    logger.info(
        f"Training {cfg.mode} for {cfg.steps} steps on {len(dataset)} samples "
        f"(batch {min(cfg.batch_size, len(dataset))}, lr {cfg.lr})"
    )

    progress = tqdm(range(1, cfg.steps + 1), disable=not cfg.progress, desc=cfg.mode, unit="step")
    for step in progress:
        if cfg.batch_size >= len(dataset):
            batch = dataset
        else:
            batch = dataset.select(np.sort(rng.choice(len(dataset), cfg.batch_size, replace=False)))

        with Tape() as tape:
            watched: Dict[str, Tensor] = {}
            step_lifter, step_pse = lifter, pse
            if train_lifter:
                lifter_watch = tape.watch_all(lifter.tensors)
                watched.update(lifter_watch)
                step_lifter = lifter.with_tensors(lifter_watch)
            if train_pse:
                pse_watch = tape.watch_all(pse.tensors)
                watched.update(pse_watch)
                step_pse = pse.with_tensors(pse_watch)
            output = _forward(cfg.mode, batch, step_lifter, step_pse, model, rng)
            loss, _terms = total_loss(output, batch, cfg)

        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"Non-finite loss {value}", step=step)
        grads = tape.grads_by_name(loss, watched)

        current = {name: t.data for name, t in watched.items()}
        updated, state = adam_step(current, grads, state, cfg)
        if train_lifter:
            lifter = lifter.with_tensors({n: Tensor(updated[n]) for n in lifter.tensors})
        if train_pse:
            pse = pse.with_tensors({n: Tensor(updated[n]) for n in pse.tensors})

        lifted = output.lifter if isinstance(output, PipelineTensors) else output
        losses.append(value)
        mpjpe_curve.append(batch_mpjpe(lifted.joints3d.data, batch.joints3d))
        progress.set_postfix(loss=f"{value:.4f}")

        if on_checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(step, lifter, pse)

    logger.info(f"Training finished: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return TrainResult(lifter, pse, losses, mpjpe_curve)


def write_loss_curve(path: Union[str, Path], losses: Sequence[float], mpjpe: Sequence[float]) -> None:
    """CSV with columns step, loss, mpjpe."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "mpjpe"])
    for step, (loss, error) in enumerate(zip(losses, mpjpe), start=1):
        writer.writerow([step, repr(float(loss)), repr(float(error))])
    atomic_write_text(path, buf.getvalue())

"""
Command-line front-end.

Machine output (JSON or JSON lines) goes to standard output; logs and
diagnostics go to the error stream. Exit codes: 0 success, 1 usage or
configuration error, 2 data/format error, 3 numerical failure.
"""

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, TypeVar

import numpy as np
from dotenv import load_dotenv

from . import __version__
from .body_model import (BodyModel, load_body_model, make_desk_model,
                         save_body_model, write_obj)
from .config import Defaults, PipelineConfig, load_config
from .exceptions import (AlignmentError, ConfigError, ContractViolation,
                         IngestionError, LiftMeshError, NumericalError)
from .io_formats import (PoseRecord, iter_coco_keypoints, load_checkpoint,
                         read_pose_file, save_checkpoint, to_json_line,
                         write_pose_file)
from .lifter import LifterParams, init_lifter_params, lifter_forward
from .metrics import evaluate
from .pose_shape_estimator import (MM_PER_M, PseParams, combine_checkpoint,
                                   full_pipeline, init_pse_params,
                                   split_checkpoint)
from .skeleton import H36M17, Pose2D, get_topology, map_coco_to_h36m
from .training import make_synth_dataset, train_loop, write_loss_curve
from .utils import (atomic_write_text, ensure_directory_exists, make_rng,
                    setup_logging, thread_limit)

logger = logging.getLogger(__name__)

MIN_BENCH_ITERS = 100
T = TypeVar("T")
R = TypeVar("R")


class ExitStatus(IntEnum):
    SUCCESS = 0
    USAGE = 1
    DATA = 2
    NUMERICAL = 3


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def exit_status_for(error: BaseException) -> ExitStatus:
    """Map a failure onto its stable exit code."""
    if isinstance(error, (UsageError, ConfigError)):
        return ExitStatus.USAGE
    if isinstance(error, (NumericalError, AlignmentError)):
        return ExitStatus.NUMERICAL
    return ExitStatus.DATA


# -- helpers ---------------------------------------------------------------


def _emit(payload: Mapping[str, Any]) -> None:
    sys.stdout.write(to_json_line(payload) + "\n")
    sys.stdout.flush()


def _ordered_map(fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """Map over items with up to LIFTMESH_THREADS workers, keeping input order."""
    workers = min(thread_limit(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_params(path: str):
    lifter, pse = split_checkpoint(load_checkpoint(path))
    logger.info(
        f"Loaded checkpoint {path}: lifter {lifter.parameter_count()} params, "
        f"estimator {pse.parameter_count()} params"
    )
    return lifter, pse


def _body_model(path: Optional[str], cfg: PipelineConfig) -> BodyModel:
    if path:
        return load_body_model(path)
    logger.info(f"No body model given; using the {cfg.body_vertices}-vertex desk model")
    return make_desk_model(cfg.body_vertices)


def _init_params(cfg: PipelineConfig, model: BodyModel):
    topology = cfg.resolve_topology()
    rng = make_rng(cfg.seed)
    lifter = init_lifter_params(cfg.lifter, topology, rng)
    input_dim = cfg.lifter.dim if cfg.pse.source_mode == "features" else 3
    pse = init_pse_params(cfg.pse, topology.num_joints, input_dim, model, rng)
    return lifter, pse


def _input_pose(record: PoseRecord, joints: int) -> Pose2D:
    pose = record.to_pose2d()
    if record.topology == "coco17" and joints == H36M17.num_joints:
        pose = map_coco_to_h36m(pose)
    if pose.num_joints != joints:
        raise IngestionError(
            f"Pose has {pose.num_joints} joints, checkpoint expects {joints}",
            record_id=record.id,
        )
    return pose


def _output_topology(record: PoseRecord) -> str:
    return H36M17.name if record.topology == "coco17" else record.topology


# -- subcommands -----------------------------------------------------------


def cmd_lift(args: argparse.Namespace) -> ExitStatus:
    lifter, _ = _load_params(args.ckpt)
    records = read_pose_file(args.poses)

    def lift_one(record: PoseRecord) -> str:
        out = lifter_forward(_input_pose(record, lifter.config.joints), lifter)
        payload = {"id": record.id, "topology": _output_topology(record)}
        payload.update(out.to_dict(include_features=not args.no_features))
        return to_json_line(payload)

    lines = _ordered_map(lift_one, records)
    if args.out:
        atomic_write_text(args.out, "".join(line + "\n" for line in lines))
        _emit({"command": "lift", "records": len(lines), "out": args.out})
    else:
        for line in lines:
            sys.stdout.write(line + "\n")
    return ExitStatus.SUCCESS


def cmd_mesh(args: argparse.Namespace) -> ExitStatus:
    cfg = _pipeline_config(args)
    lifter, pse = _load_params(args.ckpt)
    model = _body_model(args.body, cfg)
    records = read_pose_file(args.poses)
    out_dir = Path(args.out_dir)
    ensure_directory_exists(str(out_dir))

    def mesh_one(record: PoseRecord) -> Dict[str, Any]:
        result = full_pipeline(_input_pose(record, lifter.config.joints), lifter, pse, model)
        if args.obj:
            write_obj(out_dir / f"{record.id}.obj", result.vertices, model.faces)
        payload = {"id": record.id, "topology": _output_topology(record)}
        payload.update(result.to_dict(include_vertices=True))
        return payload

    results = _ordered_map(mesh_one, records)
    out_file = out_dir / "meshes.jsonl"
    atomic_write_text(out_file, "".join(to_json_line(r) + "\n" for r in results))
    _emit({
        "command": "mesh",
        "records": len(results),
        "out": str(out_file),
        "obj": bool(args.obj),
    })
    return ExitStatus.SUCCESS


def _by_id(records: Iterable[PoseRecord], what: str) -> Dict[Any, PoseRecord]:
    indexed: Dict[Any, PoseRecord] = {}
    for record in records:
        if record.id in indexed:
            raise IngestionError(f"Duplicate id in {what} file", record_id=record.id)
        indexed[record.id] = record
    return indexed


def _paired(pred_path: str, gt_path: str) -> List[tuple]:
    preds = read_pose_file(pred_path)
    gts = _by_id(read_pose_file(gt_path), "ground-truth")
    pairs = []
    for record in preds:
        if record.id not in gts:
            raise IngestionError("Prediction has no ground truth", record_id=record.id)
        pairs.append((record, gts[record.id]))
    return pairs


def cmd_eval(args: argparse.Namespace) -> ExitStatus:
    if (args.mesh_pred is None) != (args.mesh_gt is None):
        raise UsageError("--mesh-pred and --mesh-gt must be given together")
    pairs = _paired(args.pred, args.gt)
    roots = {get_topology(gt.topology).root for _, gt in pairs}
    if len(roots) > 1:
        raise ContractViolation("Ground truth mixes topologies with different roots")

    mesh_preds = mesh_gts = None
    if args.mesh_pred is not None:
        mesh_pairs = _paired(args.mesh_pred, args.mesh_gt)
        mesh_preds = [p.mesh_vertices() for p, _ in mesh_pairs]
        mesh_gts = [g.mesh_vertices(prefer_gt=True) for _, g in mesh_pairs]

    report = evaluate(
        [p.joints_3d() for p, _ in pairs],
        [g.joints_3d(prefer_gt=True) for _, g in pairs],
        mesh_preds,
        mesh_gts,
        root=roots.pop() if roots else 0,
        workers=thread_limit(),
    )
    if args.report:
        atomic_write_text(args.report, report.to_text())
    _emit(report.model_dump())
    return ExitStatus.SUCCESS


def cmd_train(args: argparse.Namespace) -> ExitStatus:
    cfg = _pipeline_config(args)
    overrides: Dict[str, Any] = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.no_progress:
        overrides["progress"] = False
    if overrides:
        try:
            train_cfg = cfg.train.model_validate({**cfg.train.model_dump(), **overrides})
        except ValueError as e:
            raise ConfigError(f"Invalid training override: {e}") from e
        cfg = cfg.model_copy(update={"train": train_cfg})

    model = _body_model(args.body, cfg)
    if args.init:
        lifter, pse = _load_params(args.init)
    else:
        lifter, pse = _init_params(cfg, model)
    data = make_synth_dataset(cfg.train.n_samples, model, cfg.seed, cfg.train.noise_sigma)

    def checkpoint(step: int, lifter_now: LifterParams, pse_now: PseParams) -> None:
        save_checkpoint(args.out, combine_checkpoint(lifter_now, pse_now))
        logger.info(f"Checkpoint written at step {step}")

    result = train_loop(cfg.train, data, lifter, pse, model, on_checkpoint=checkpoint)
    save_checkpoint(args.out, combine_checkpoint(result.lifter, result.pse))
    curve = args.loss_out or str(Path(args.out).parent / Defaults.LOSS_CURVE_NAME)
    write_loss_curve(curve, result.losses, result.mpjpe)
    _emit({
        "command": "train",
        "mode": cfg.train.mode,
        "steps": len(result.losses),
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
        "initial_mpjpe_mm": result.mpjpe[0],
        "final_mpjpe_mm": result.mpjpe[-1],
        "checkpoint": args.out,
        "loss_curve": curve,
    })
    return ExitStatus.SUCCESS


def cmd_synth(args: argparse.Namespace) -> ExitStatus:
    cfg = _pipeline_config(args)
    model = _body_model(args.body, cfg)
    sigma = cfg.train.noise_sigma if args.sigma is None else args.sigma
    samples = make_synth_dataset(args.n, model, cfg.seed, sigma)
    records = [
        PoseRecord(
            id=i,
            topology=H36M17.name,
            joints=s.pose2d.tolist(),
            conf=[1.0] * s.pose2d.shape[0],
            gt3d=s.gt_joints3d.tolist(),
            gt_vertices=(s.gt_vertices * MM_PER_M).tolist(),
            gt_theta=s.gt_theta.tolist(),
            gt_beta=s.gt_beta.tolist(),
            gt_cam=s.gt_cam.as_vector().tolist(),
        )
        for i, s in enumerate(samples)
    ]
    write_pose_file(args.out, records)
    _emit({"command": "synth", "records": len(records), "seed": cfg.seed, "out": args.out})
    return ExitStatus.SUCCESS


def cmd_bench(args: argparse.Namespace) -> ExitStatus:
    if args.iters < MIN_BENCH_ITERS:
        raise UsageError(f"--iters must be >= {MIN_BENCH_ITERS}, got {args.iters}")
    cfg = _pipeline_config(args)
    model = _body_model(args.body, cfg)
    lifter, pse = _load_params(args.ckpt) if args.ckpt else _init_params(cfg, model)

    payload: Dict[str, Any] = {
        "command": "bench",
        "parameters": lifter.parameter_count() + pse.parameter_count(),
        "lifter_parameters": lifter.parameter_count(),
        "pse_parameters": pse.parameter_count(),
        "iters": args.iters,
    }
    if not args.no_timing:
        rng = make_rng(cfg.seed)
        pose = Pose2D(rng.normal(0.0, 0.3, size=(lifter.config.joints, 2)))
        full_pipeline(pose, lifter, pse, model)
        latencies = np.empty(args.iters)
        for i in range(args.iters):
            start = time.perf_counter()
            full_pipeline(pose, lifter, pse, model)
            latencies[i] = (time.perf_counter() - start) * 1000.0
        payload["median_ms"] = float(np.median(latencies))
        payload["p95_ms"] = float(np.percentile(latencies, 95))
        logger.info(
            f"Forward latency over {args.iters} runs: median {payload['median_ms']:.3f} ms, "
            f"p95 {payload['p95_ms']:.3f} ms"
        )
    _emit(payload)
    return ExitStatus.SUCCESS


def cmd_convert_coco(args: argparse.Namespace) -> ExitStatus:
    records = []
    for ann_id, pose in iter_coco_keypoints(args.input):
        mapped = map_coco_to_h36m(pose)
        records.append(
            PoseRecord(
                id=ann_id,
                topology=mapped.topology,
                joints=mapped.coords.tolist(),
                conf=mapped.confidence.tolist(),
            )
        )
    write_pose_file(args.out, records)
    _emit({"command": "convert-coco", "records": len(records), "out": args.out})
    return ExitStatus.SUCCESS


def cmd_init(args: argparse.Namespace) -> ExitStatus:
    cfg = _pipeline_config(args)
    model = _body_model(args.body, cfg)
    lifter, pse = _init_params(cfg, model)
    save_checkpoint(args.out, combine_checkpoint(lifter, pse))
    _emit({
        "command": "init",
        "seed": cfg.seed,
        "parameters": lifter.parameter_count() + pse.parameter_count(),
        "out": args.out,
    })
    return ExitStatus.SUCCESS


def cmd_make_body(args: argparse.Namespace) -> ExitStatus:
    seed = args.seed if args.seed is not None else 0
    model = make_desk_model(args.vertices, seed=seed)
    save_body_model(args.out, model)
    _emit({
        "command": "make-body",
        "vertices": model.num_vertices,
        "joints": model.num_joints,
        "seed": seed,
        "out": args.out,
    })
    return ExitStatus.SUCCESS


# -- parser ----------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument(
        "--log-level",
        default=default,
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help=f"log level (env {Defaults.ENV_LOG_LEVEL}, default {Defaults.LOG_LEVEL})",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liftmesh", description="Pose-based human mesh pipeline")
    parser.add_argument("--version", action="version", version=f"liftmesh {__version__}")
    _add_common(parser, None)

    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("lift", parents=[common], help="2D poses -> lifter outputs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out")
    p.add_argument("--no-features", action="store_true", help="omit per-joint features")
    p.set_defaults(handler=cmd_lift)

    p = sub.add_parser("mesh", parents=[common], help="2D poses -> meshes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--body", help="body model container (default: desk model)")
    p.add_argument("--poses", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--obj", action="store_true", help="also write one OBJ per pose")
    p.set_defaults(handler=cmd_mesh)

    p = sub.add_parser("eval", parents=[common], help="MPJPE / PA-MPJPE / MPVE report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mesh-pred")
    p.add_argument("--mesh-gt")
    p.add_argument("--report", help="also write a flat key=value report")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("train", parents=[common], help="desk-scale training on synthetic data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mode", choices=["lifter-only", "pse-only", "end-to-end"])
    p.add_argument("--steps", type=int)
    p.add_argument("--init", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--body")
    p.add_argument("--loss-out", help=f"loss curve CSV (default: next to --out, {Defaults.LOSS_CURVE_NAME})")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="emit a synthetic pose file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--body")
    p.add_argument("--sigma", type=float, help="2D noise std (default: train.noise_sigma)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("bench", parents=[common], help="parameter count and forward latency")
    p.add_argument("--ckpt", help="checkpoint (default: fresh init from config)")
    p.add_argument("--body")
    p.add_argument("--iters", type=int, default=MIN_BENCH_ITERS)
    p.add_argument("--no-timing", action="store_true", help="skip latency measurement")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("convert-coco", parents=[common], help="COCO keypoints -> h36m17 pose file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_convert_coco)

    p = sub.add_parser("init", parents=[common], help="write a freshly initialized checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--body")
    p.set_defaults(handler=cmd_init)

    p = sub.add_parser("make-body", parents=[common], help="write the desk body model")
    p.add_argument("--out", required=True)
    p.add_argument("--vertices", type=int, default=120)
    p.set_defaults(handler=cmd_make_body)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, dispatch the subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"liftmesh: error: {e}\n")
        return ExitStatus.USAGE
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)

    setup_logging(args.log_level or Defaults.get_log_level())
    if not getattr(args, "handler", None):
        parser.print_usage(sys.stderr)
        return ExitStatus.USAGE

    try:
        return int(args.handler(args))
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return ExitStatus.USAGE
    except LiftMeshError as e:
        status = exit_status_for(e)
        logger.error(f"{type(e).__name__}: {e}")
        return status
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return ExitStatus.USAGE


def main() -> None:
    """Console entry point."""
    load_dotenv()
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

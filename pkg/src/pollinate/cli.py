"""
Command-line entry point.

Every subcommand reads its inputs through the repositories, runs one pipeline
stage and writes deterministic artifacts. Library errors carry their exit
code; main() is the only place that turns them into a process status.
"""

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import SweepSpec, run_sweep
from .config import SCHEMA_VERSION, PipelineConfig, apply_overrides, get_settings, load_config
from .dersim import RodNetwork, resolve_nodes, run
from .errors import InputFormatError, NewtonDivergence, PollinateError, ValidationFailed
from .fusion import camera_poses, clean_cloud, fill_volume, fuse_views, voxelize
from .graspplan import plan_grasp
from .i18n import translator
from .main import setup_logging
from .models import ActuationProfile, PlantKind, SimplifiedSkeleton, SweepKind
from .repositories import (
    DepthViewRepository,
    GraspPoseRepository,
    PointCloudRepository,
    RodNetworkRepository,
    SkeletonRepository,
    SweepResultRepository,
    TimeSeriesRepository,
    VoxelGridRepository,
    dumps_json,
    pose_from_dict,
    read_json,
    write_json,
)
from .skeleton import skeletonize_cloud
from .synthetic import make_plant, plant_views, sample_cloud
from .validation import REPORT_VERSION, run_checks

logger = logging.getLogger(__name__)

VISIBLE_COMMANDS = "{fuse,skeletonize,plan-grasp,simulate,sweep,validate}"


def _load_network(path: str, config: PipelineConfig) -> tuple[RodNetwork, SimplifiedSkeleton | None]:
    """Rod network from a network file, or resampled from a skeleton file."""
    path = Path(path)
    data = read_json(path)
    if isinstance(data, dict) and "segments" in data:
        skel = SkeletonRepository.from_dict(data, path)
        network = RodNetwork.from_skeleton(
            skel, config.material.to_params(), config.material.max_edge_len
        )
        return network, skel
    return RodNetworkRepository.from_dict(data, path), None


def _grasp_node(
    network: RodNetwork,
    skel: SimplifiedSkeleton | None,
    grasp_file: str | None,
    node: int,
    config: PipelineConfig,
) -> int:
    """Configured node, else the rod node nearest the planned grasp position."""
    if node != -1:
        return resolve_nodes(network, [node])[0]
    if grasp_file is not None:
        position = GraspPoseRepository.load(grasp_file).position
    elif skel is not None:
        position = plan_grasp(skel, config.grasp)[0].position
    else:
        raise InputFormatError(translator.get("simulate.no_grasp"))
    return network.nearest_node(position, exclude=network.root_clamp())


def _actuation(config: PipelineConfig, grasp_node: int) -> ActuationProfile:
    act = config.sim.actuation
    return ActuationProfile(
        grasp_node=grasp_node,
        direction=np.asarray(act.direction, dtype=float),
        amplitude=act.amplitude_m,
        frequency=act.frequency_hz,
        guess_hops=act.guess_hops,
        guess_decay=act.guess_decay,
    )


# Commands


def cmd_fuse(args, config: PipelineConfig) -> int:
    poses = None
    if args.poses is not None:
        poses = DepthViewRepository.load_poses(args.poses)
        if len(poses) != len(args.views):
            raise InputFormatError(
                f"{args.poses}: {len(poses)} poses for {len(args.views)} views"
            )
        if args.hand_eye is not None:
            hand_eye = pose_from_dict(read_json(args.hand_eye), Path(args.hand_eye))
            poses = camera_poses(poses, hand_eye)

    views = [
        DepthViewRepository.load(path, None if poses is None else poses[i])
        for i, path in enumerate(args.views)
    ]
    fusion = config.fusion
    cloud = fuse_views(views, icp=fusion.icp, max_iter=fusion.icp_max_iter, tol=fusion.icp_tol)
    if not args.raw:
        cloud = clean_cloud(
            cloud, fusion.downsample_cell, fusion.effective_eps, fusion.dbscan_min_pts
        )
    PointCloudRepository.save(args.output, cloud)
    print(translator.get("fuse.done", views=len(views), points=len(cloud), output=args.output))
    return 0


def cmd_skeletonize(args, config: PipelineConfig) -> int:
    cloud = PointCloudRepository.load(args.cloud)
    if args.grid is not None or args.grid_dump is not None:
        grid = voxelize(cloud, config.fusion.voxel_resolution, config.fusion.max_grid_dim)
        if config.fusion.fill_volume:
            grid = fill_volume(grid)
        if args.grid is not None:
            VoxelGridRepository.save(args.grid, grid)
        if args.grid_dump is not None:
            VoxelGridRepository.dump(args.grid_dump, grid)

    skel = skeletonize_cloud(cloud, config.fusion, config.skeleton)
    SkeletonRepository.save(args.output, skel)
    print(
        translator.get(
            "skeletonize.done",
            nodes=len(skel.nodes),
            segments=len(skel.segments),
            output=args.output,
        )
    )
    return 0


def cmd_plan_grasp(args, config: PipelineConfig) -> int:
    skel = SkeletonRepository.load(args.skeleton)
    pose, core = plan_grasp(skel, config.grasp)
    params = {
        "alpha": config.grasp.alpha,
        "v_bias": config.grasp.v_bias,
        "max_angle_deg": config.grasp.max_angle_deg,
        "obstruction_radius_m": config.grasp.obstruction_radius,
        "n_dirs": config.grasp.n_dirs,
    }
    GraspPoseRepository.save(args.output, pose, params, core)
    x, y, z = pose.position
    print(
        translator.get(
            "plan_grasp.done",
            segment=pose.segment_id,
            x=x,
            y=y,
            z=z,
            objective=pose.objective,
            output=args.output,
        )
    )
    return 0


def cmd_simulate(args, config: PipelineConfig) -> int:
    network, skel = _load_network(args.network, config)
    sim = config.sim
    actuation = None
    grasp_node = None
    if sim.actuated:
        grasp_node = _grasp_node(network, skel, args.grasp, sim.actuation.node, config)
        actuation = _actuation(config, grasp_node)

    summary_path = Path(args.summary) if args.summary else Path(args.output).with_suffix(".json")
    summary = {
        "network_nodes": network.node_count,
        "dof": network.dof_count,
        "dt_s": sim.dt_s,
        "duration_s": sim.duration_s,
        "grasp_node": grasp_node,
        "flower_node": network.flower_node(),
    }
    try:
        series = run(network, actuation, sim)
    except NewtonDivergence as e:
        summary.update(
            status="diverged", step_index=e.step_index, residuals=e.residuals, message=str(e)
        )
        write_json(summary_path, summary)
        print(translator.get("simulate.diverged", step=e.step_index, summary=summary_path))
        raise

    text = TimeSeriesRepository.dumps(series)
    Path(args.output).write_text(text, encoding="ascii", newline="\n")
    summary.update(
        status="ok",
        record=list(series.node_ids),
        rows=len(series.times),
        stats=series.stats,
        csv_sha256=hashlib.sha256(text.encode("ascii")).hexdigest(),
    )
    write_json(summary_path, summary)
    print(
        translator.get(
            "simulate.done",
            steps=series.stats.get("steps", 0),
            nodes=list(series.node_ids),
            output=args.output,
        )
    )
    return 0


def _load_sweep_spec(path: str, config: PipelineConfig) -> SweepSpec:
    """Sweep request: kind, network file (relative to the request), values."""
    path = Path(path)
    data = read_json(path)
    if not isinstance(data, dict):
        raise InputFormatError(f"{path}: sweep request must be a JSON object")
    try:
        kind = SweepKind(data.get("kind", SweepKind.AMPLITUDE.value))
    except ValueError as e:
        raise InputFormatError(f"{path}: unknown sweep kind {data.get('kind')!r}") from e
    if "network" not in data:
        raise InputFormatError(f"{path}: missing key 'network'")

    network, skel = _load_network(str(path.parent / data["network"]), config)
    grasp_file = data.get("grasp")
    if grasp_file is not None:
        grasp_file = str(path.parent / grasp_file)

    values = data.get("values")
    if kind is SweepKind.GRASP_LOCATION and values is None and not config.bench.grasp_nodes:
        raise InputFormatError(f"{path}: a grasp-location sweep needs 'values' (node ids)")
    node = int(data.get("grasp_node", config.sim.actuation.node))
    grasp_node = (
        _grasp_node(network, skel, grasp_file, node, config)
        if kind is SweepKind.AMPLITUDE
        else int((values or config.bench.grasp_nodes)[0])
    )
    try:
        spec = SweepSpec.from_config(network, config, kind, grasp_node, values)
        changes = {}
        if "flower_node" in data:
            changes["flower_node"] = int(data["flower_node"])
        if "settle_s" in data:
            changes["settle_time"] = float(data["settle_s"])
        if "measure_s" in data:
            changes["measure_time"] = float(data["measure_s"])
        return replace(spec, **changes) if changes else spec
    except (TypeError, ValueError) as e:
        raise InputFormatError(f"{path}: invalid sweep request: {e}") from e


def cmd_sweep(args, config: PipelineConfig) -> int:
    spec = _load_sweep_spec(args.spec, config)
    workers = args.workers or get_settings().workers
    result = run_sweep(spec, workers)

    output = Path(args.output)
    SweepResultRepository.save(output, result)
    csv_path = Path(args.csv) if args.csv else output.with_suffix(".csv")
    SweepResultRepository.save_csv(csv_path, result)
    if args.emit_gnuplot:
        SweepResultRepository.save_gnuplot(output.with_suffix(".gp"), result, csv_path.name)
    print(
        translator.get(
            "sweep.done",
            kind=result.kind.value,
            points=len(result.inputs),
            r=f"{result.pearson_r:.4f}",
            monotone=result.monotone_decreasing,
            output=output,
        )
    )
    return 0


def _format_metric(value) -> str:
    return "-" if value is None or value != value else f"{value:.4e}"


def cmd_validate(args, config: PipelineConfig) -> int:
    report = run_checks(quick=args.quick, config=config)
    if args.json:
        sys.stdout.write(dumps_json(report))
    else:
        print(translator.get("validate.header", status="", name="check", metric="metric", threshold="threshold"))
        for check in report["checks"]:
            status = (
                "validate.skip"
                if check["skipped"]
                else "validate.pass"
                if check["passed"]
                else "validate.fail"
            )
            print(
                translator.get(
                    "validate.row",
                    status=translator.get(status),
                    name=check["name"],
                    metric=_format_metric(check["metric"]),
                    threshold=_format_metric(check["threshold"]),
                    detail=check["detail"],
                )
            )
        passed = sum(1 for c in report["checks"] if c["passed"])
        print(translator.get("validate.summary", passed=passed, total=len(report["checks"])))

    if not report["passed"]:
        failed = [c["name"] for c in report["checks"] if not c["passed"]]
        raise ValidationFailed(f"Failed checks: {', '.join(failed)}")
    return 0


def cmd_gen_synthetic(args, config: PipelineConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    skel = make_plant(PlantKind(args.plant))
    SkeletonRepository.save(out_dir / "skeleton_truth.json", skel)

    cloud = sample_cloud(skel, args.spacing, args.noise, args.seed)
    PointCloudRepository.save(out_dir / "cloud.ply", cloud)

    network = RodNetwork.from_skeleton(
        skel, config.material.to_params(), config.material.max_edge_len
    )
    RodNetworkRepository.save(out_dir / "network.json", network)

    views = plant_views(skel, count=args.views, spacing=args.spacing) if args.views else []
    for k, view in enumerate(views):
        DepthViewRepository.save(out_dir / f"view_{k}.json", view)
    DepthViewRepository.save_poses(out_dir / "poses.json", [v.pose for v in views])

    print(
        translator.get(
            "gen_synthetic.done",
            plant=args.plant,
            points=len(cloud),
            views=len(views),
            out_dir=out_dir,
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pollinate", description=translator.get("cli.description"))
    parser.add_argument(
        "--version",
        action="version",
        version=translator.get(
            "cli.version", version=__version__, schema=SCHEMA_VERSION, report=REPORT_VERSION
        ),
    )
    parser.add_argument("--config", default=None, help=translator.get("cli.help.config"))
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help=translator.get("cli.help.set"),
    )
    parser.add_argument("--log-level", default=None, help=translator.get("cli.help.log_level"))
    sub = parser.add_subparsers(dest="command", metavar=VISIBLE_COMMANDS, required=True)

    fuse = sub.add_parser("fuse", help=translator.get("cli.help.fuse"))
    fuse.add_argument("views", nargs="+", help="view sidecar JSON files")
    fuse.add_argument("--poses", default=None, help="pose list JSON overriding sidecar poses")
    fuse.add_argument("--hand-eye", default=None, help="flange-to-camera pose JSON")
    fuse.add_argument("--raw", action="store_true", help="skip downsampling and clustering")
    fuse.add_argument("-o", "--output", required=True)
    fuse.set_defaults(handler=cmd_fuse)

    skeletonize = sub.add_parser("skeletonize", help=translator.get("cli.help.skeletonize"))
    skeletonize.add_argument("cloud")
    skeletonize.add_argument("-o", "--output", required=True)
    skeletonize.add_argument("--grid", default=None, help="also write the PVOX voxel grid")
    skeletonize.add_argument("--grid-dump", default=None, help="also write an ASCII grid dump")
    skeletonize.set_defaults(handler=cmd_skeletonize)

    grasp = sub.add_parser("plan-grasp", help=translator.get("cli.help.plan_grasp"))
    grasp.add_argument("skeleton")
    grasp.add_argument("-o", "--output", required=True)
    grasp.set_defaults(handler=cmd_plan_grasp)

    simulate = sub.add_parser("simulate", help=translator.get("cli.help.simulate"))
    simulate.add_argument("network", help="rod network or skeleton JSON")
    simulate.add_argument("-o", "--output", required=True, help="time-series CSV")
    simulate.add_argument("--summary", default=None, help="summary JSON (default: <output>.json)")
    simulate.add_argument("--grasp", default=None, help="grasp JSON locating the actuated node")
    simulate.set_defaults(handler=cmd_simulate)

    sweep = sub.add_parser("sweep", help=translator.get("cli.help.sweep"))
    sweep.add_argument("spec", help="sweep request JSON")
    sweep.add_argument("-o", "--output", required=True)
    sweep.add_argument("--csv", default=None)
    sweep.add_argument("--emit-gnuplot", action="store_true")
    sweep.add_argument("--workers", type=int, default=None)
    sweep.set_defaults(handler=cmd_sweep)

    validate = sub.add_parser("validate", help=translator.get("cli.help.validate"))
    validate.add_argument("--json", action="store_true")
    validate.add_argument("--quick", action="store_true")
    validate.set_defaults(handler=cmd_validate)

    synthetic = sub.add_parser("gen-synthetic")
    synthetic.add_argument("--plant", choices=[k.value for k in PlantKind], default="y_plant")
    synthetic.add_argument("--out-dir", required=True)
    synthetic.add_argument("--views", type=int, default=4)
    synthetic.add_argument("--spacing", type=float, default=0.001)
    synthetic.add_argument("--noise", type=float, default=0.0)
    synthetic.add_argument("--seed", type=int, default=0)
    synthetic.set_defaults(handler=cmd_gen_synthetic)
    return parser


def _report_error(error: Exception, exit_code: int) -> int:
    message = translator.get("errors.exit", error=error)
    for note in getattr(error, "__notes__", ()):
        message += f" ({note})"
    logger.error(message)
    print(message, file=sys.stderr)
    return exit_code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = apply_overrides(load_config(args.config), args.overrides)
        return args.handler(args, config)
    except PollinateError as e:
        return _report_error(e, e.exit_code)
    except ValueError as e:
        # invalid parameters rejected by the library are usage errors
        return _report_error(e, InputFormatError.exit_code)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())

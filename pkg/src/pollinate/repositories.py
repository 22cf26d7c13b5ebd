"""
File formats for every artifact the pipeline reads or writes.

Each repository groups the static load/save operations of one artifact.
Readers raise InputFormatError naming the offending file; writers produce
byte-identical output for identical inputs (sorted JSON keys, full-precision
floats).
"""

import io
import json
import logging
import math
import struct
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError
from plyfile import PlyData, PlyElement, PlyParseError

from .config import MaterialConfig
from .dersim import RodNetwork
from .errors import InputFormatError
from .models import (
    CameraIntrinsics,
    DepthView,
    GraspPose,
    MaterialParams,
    PointCloud,
    RigidTransform,
    Segment,
    SimplifiedSkeleton,
    SkeletonNode,
    StemPath,
    SweepKind,
    SweepResult,
    TimeSeries,
    VoxelGrid,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _clean(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.bool_ | bool):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, float | np.floating):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps_json(data: Any) -> str:
    """Sorted, indented JSON with a trailing newline."""
    return json.dumps(_clean(data), sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, data: Any) -> None:
    Path(path).write_text(dumps_json(data), encoding="utf-8")


def read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise InputFormatError(f"File not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputFormatError(f"{path} is not valid JSON: {e}") from e
    except UnicodeDecodeError as e:
        raise InputFormatError(f"{path} is not a text file") from e


def _require(data: dict, key: str, path: Path):
    if not isinstance(data, dict) or key not in data:
        raise InputFormatError(f"{path}: missing key '{key}'")
    return data[key]


def _float_or_nan(value) -> float:
    return float("nan") if value is None else float(value)


def pose_to_dict(pose: RigidTransform) -> dict:
    return {
        "quaternion_wxyz": pose.as_quaternion().tolist(),
        "translation": pose.translation.tolist(),
    }


def pose_from_dict(data: dict, path: Path) -> RigidTransform:
    try:
        return RigidTransform.from_quaternion(
            _require(data, "quaternion_wxyz", path), _require(data, "translation", path)
        )
    except (TypeError, ValueError) as e:
        raise InputFormatError(f"{path}: invalid pose: {e}") from e


class PointCloudRepository:
    """PLY point clouds: written as ASCII doubles, read in any PLY encoding."""

    VERTEX = [("x", "f8"), ("y", "f8"), ("z", "f8")]

    @staticmethod
    def save(path: str | Path, cloud: PointCloud) -> None:
        """Write x y z per vertex at full precision."""
        vertices = np.empty(len(cloud), dtype=PointCloudRepository.VERTEX)
        for axis, name in enumerate(("x", "y", "z")):
            vertices[name] = cloud.points[:, axis]
        PlyData([PlyElement.describe(vertices, "vertex")], text=True).write(str(path))
        logger.debug(f"Wrote {len(cloud)} points to {path}")

    @staticmethod
    def load(path: str | Path) -> PointCloud:
        """Read the x, y, z properties of the vertex element."""
        path = Path(path)
        if not path.exists():
            raise InputFormatError(f"Point cloud not found: {path}")
        try:
            ply = PlyData.read(str(path))
        except (PlyParseError, ValueError, UnicodeDecodeError) as e:
            raise InputFormatError(f"{path} is not a readable PLY file: {e}") from e

        if "vertex" not in ply:
            raise InputFormatError(f"{path}: PLY file has no vertex element")
        data = ply["vertex"].data
        if not {"x", "y", "z"} <= set(data.dtype.names or ()):
            raise InputFormatError(f"{path}: vertex element lacks x/y/z properties")
        points = np.column_stack([data[name] for name in ("x", "y", "z")]).astype(float)
        return PointCloud(points.reshape(-1, 3))


def _write_pgm(path: Path, image: np.ndarray, sixteen_bit: bool) -> None:
    # mode "I" is saved as 16-bit big-endian P5, mode "L" as 8-bit P5
    pixels = np.asarray(image, dtype=np.int32 if sixteen_bit else np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def _read_pgm(path: Path) -> np.ndarray:
    if not path.exists():
        raise InputFormatError(f"Image not found: {path}")
    try:
        with Image.open(path) as image:
            if image.format != "PPM" or image.mode not in ("L", "I", "I;16", "I;16B"):
                raise InputFormatError(f"{path} is not a grayscale PGM image")
            image.load()
            pixels = np.asarray(image)
    except (UnidentifiedImageError, SyntaxError) as e:
        raise InputFormatError(f"{path} is not a PGM image") from e
    except OSError as e:
        raise InputFormatError(f"{path}: truncated or unreadable pixel data ({e})") from e
    return pixels.astype(np.uint8 if pixels.dtype == np.uint8 else np.uint16)


class DepthViewRepository:
    """Depth PGM + mask PGM + JSON sidecar per view; poses as a JSON list."""

    @staticmethod
    def save(path: str | Path, view: DepthView) -> None:
        """path is the sidecar; images are written next to it."""
        path = Path(path)
        depth_file = path.with_name(f"{path.stem}_depth.pgm")
        mask_file = path.with_name(f"{path.stem}_mask.pgm")
        _write_pgm(depth_file, view.depth, sixteen_bit=True)
        _write_pgm(mask_file, np.where(view.mask, 255, 0), sixteen_bit=False)
        intr = view.intrinsics
        write_json(
            path,
            {
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "depth_scale": intr.depth_scale,
                "depth_file": depth_file.name,
                "mask_file": mask_file.name,
                "pose": pose_to_dict(view.pose),
            },
        )

    @staticmethod
    def load(path: str | Path, pose: RigidTransform | None = None) -> DepthView:
        """Read a view; pose overrides the sidecar pose when given."""
        path = Path(path)
        sidecar = read_json(path)
        try:
            intrinsics = CameraIntrinsics(
                fx=float(_require(sidecar, "fx", path)),
                fy=float(_require(sidecar, "fy", path)),
                cx=float(_require(sidecar, "cx", path)),
                cy=float(_require(sidecar, "cy", path)),
                depth_scale=float(sidecar.get("depth_scale", 0.001)),
            )
        except (TypeError, ValueError) as e:
            raise InputFormatError(f"{path}: invalid intrinsics: {e}") from e

        depth = _read_pgm(path.with_name(sidecar.get("depth_file", f"{path.stem}_depth.pgm")))
        mask = _read_pgm(path.with_name(sidecar.get("mask_file", f"{path.stem}_mask.pgm"))) > 0
        if pose is None:
            pose = pose_from_dict(_require(sidecar, "pose", path), path)
        try:
            return DepthView(depth, mask, intrinsics, pose)
        except ValueError as e:
            raise InputFormatError(f"{path}: {e}") from e

    @staticmethod
    def save_poses(path: str | Path, poses: list[RigidTransform]) -> None:
        write_json(path, [pose_to_dict(p) for p in poses])

    @staticmethod
    def load_poses(path: str | Path) -> list[RigidTransform]:
        path = Path(path)
        if not path.exists():
            raise InputFormatError(f"Pose file not found: {path}")
        data = read_json(path)
        if not isinstance(data, list):
            raise InputFormatError(f"{path}: pose file must hold a JSON array")
        return [pose_from_dict(item, path) for item in data]


class VoxelGridRepository:
    """Binary PVOX grids and an ASCII slice dump for debugging.

    Layout (little-endian): b"PVOX", u32 version, 3 x u32 dims, 3 x f64
    origin, f64 resolution, then occupancy bits in x-fastest order packed
    with bit order "little".
    """

    MAGIC = b"PVOX"
    VERSION = 1
    HEADER = struct.Struct("<4sI3I3dd")

    @staticmethod
    def save(path: str | Path, grid: VoxelGrid) -> None:
        header = VoxelGridRepository.HEADER.pack(
            VoxelGridRepository.MAGIC,
            VoxelGridRepository.VERSION,
            *grid.dims,
            *(float(c) for c in grid.origin),
            float(grid.resolution),
        )
        bits = np.packbits(grid.occupancy.ravel(order="F"), bitorder="little")
        with open(path, "wb") as f:
            f.write(header)
            f.write(bits.tobytes())

    @staticmethod
    def load(path: str | Path) -> VoxelGrid:
        path = Path(path)
        if not path.exists():
            raise InputFormatError(f"Voxel grid not found: {path}")
        data = path.read_bytes()
        size = VoxelGridRepository.HEADER.size
        if len(data) < size:
            raise InputFormatError(f"{path}: truncated voxel grid header")
        magic, version, nx_, ny_, nz_, ox, oy, oz, resolution = (
            VoxelGridRepository.HEADER.unpack_from(data)
        )
        if magic != VoxelGridRepository.MAGIC:
            raise InputFormatError(f"{path} is not a PVOX voxel grid")
        if version != VoxelGridRepository.VERSION:
            raise InputFormatError(f"{path}: unsupported PVOX version {version}")

        count = nx_ * ny_ * nz_
        packed = np.frombuffer(data, dtype=np.uint8, offset=size)
        if packed.size * 8 < count:
            raise InputFormatError(f"{path}: truncated occupancy bits")
        bits = np.unpackbits(packed, count=count, bitorder="little")
        occupancy = bits.reshape((nx_, ny_, nz_), order="F").astype(bool)
        try:
            return VoxelGrid(np.array([ox, oy, oz]), resolution, occupancy)
        except ValueError as e:
            raise InputFormatError(f"{path}: {e}") from e

    @staticmethod
    def dump(path: str | Path, grid: VoxelGrid) -> None:
        """One block per z-slice, rows along y, '#' for occupied voxels."""
        nx_, ny_, nz_ = grid.dims
        lines = [
            f"dims {nx_} {ny_} {nz_}",
            "origin " + " ".join(FLOAT_FORMAT % c for c in grid.origin),
            f"resolution {FLOAT_FORMAT % grid.resolution}",
        ]
        for k in range(nz_):
            lines.append(f"z {k}")
            for j in range(ny_):
                lines.append("".join("#" if grid.occupancy[i, j, k] else "." for i in range(nx_)))
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


class SkeletonRepository:
    """Simplified skeletons as JSON."""

    @staticmethod
    def to_dict(skel: SimplifiedSkeleton) -> dict:
        return {
            "root": skel.root,
            "nodes": [
                {"id": n.id, "xyz_m": list(n.position), "radius_m": n.radius} for n in skel.nodes
            ],
            "segments": [
                {
                    "a": s.a,
                    "b": s.b,
                    "polyline": s.polyline.tolist(),
                    "length_m": s.length,
                    "mean_radius_m": s.mean_radius,
                    "dz_m": s.dz,
                }
                for s in skel.segments
            ],
        }

    @staticmethod
    def from_dict(data: dict, path: Path) -> SimplifiedSkeleton:
        nodes_data = _require(data, "nodes", path)
        segments_data = _require(data, "segments", path)
        if not nodes_data or not segments_data:
            raise InputFormatError(f"{path}: skeleton has no segments")
        try:
            nodes = tuple(
                SkeletonNode(
                    int(item.get("id", i)),
                    tuple(float(c) for c in item["xyz_m"]),
                    float(item["radius_m"]),
                )
                for i, item in enumerate(nodes_data)
            )
            if [n.id for n in nodes] != list(range(len(nodes))):
                raise ValueError("node ids must be 0..n-1 in order")
            segments = []
            for i, item in enumerate(segments_data):
                a, b = int(item["a"]), int(item["b"])
                if not (0 <= a < len(nodes) and 0 <= b < len(nodes)):
                    raise ValueError(f"segment {i} references a missing node")
                polyline = np.asarray(item["polyline"], dtype=float).reshape(-1, 3)
                if len(polyline) < 2:
                    raise ValueError(f"segment {i} polyline needs two points")
                segments.append(
                    Segment(
                        id=i,
                        a=a,
                        b=b,
                        polyline=polyline,
                        length=float(item["length_m"]),
                        mean_radius=float(item["mean_radius_m"]),
                        dz=float(item["dz_m"]),
                    )
                )
            root = int(data.get("root", 0))
        except (KeyError, TypeError, ValueError) as e:
            raise InputFormatError(f"{path}: invalid skeleton: {e}") from e
        return SimplifiedSkeleton(nodes, tuple(segments), root)

    @staticmethod
    def save(path: str | Path, skel: SimplifiedSkeleton) -> None:
        write_json(path, SkeletonRepository.to_dict(skel))

    @staticmethod
    def load(path: str | Path) -> SimplifiedSkeleton:
        path = Path(path)
        data = read_json(path)
        if not data:
            raise InputFormatError(f"{path}: skeleton file is empty")
        return SkeletonRepository.from_dict(data, path)


class GraspPoseRepository:
    """7-DoF grasp poses as JSON."""

    @staticmethod
    def save(
        path: str | Path,
        pose: GraspPose,
        params: dict | None = None,
        core: StemPath | None = None,
    ) -> None:
        data = {
            "position_m": pose.position.tolist(),
            "approach": pose.approach.tolist(),
            "stem_dir": pose.stem_dir.tolist(),
            "quaternion_wxyz": pose.quaternion.tolist(),
            "objective": pose.objective,
            "segment_id": pose.segment_id,
            "params": params or {},
        }
        if core is not None:
            data["stem_segments"] = list(core.segment_ids)
            data["core_segments"] = list(core.core)
        write_json(path, data)

    @staticmethod
    def load(path: str | Path) -> GraspPose:
        path = Path(path)
        data = read_json(path)
        try:
            return GraspPose(
                position=np.asarray(_require(data, "position_m", path), dtype=float),
                approach=np.asarray(_require(data, "approach", path), dtype=float),
                stem_dir=np.asarray(_require(data, "stem_dir", path), dtype=float),
                quaternion=np.asarray(_require(data, "quaternion_wxyz", path), dtype=float),
                objective=float(data.get("objective", 0.0)),
                segment_id=int(data.get("segment_id", -1)),
            )
        except (TypeError, ValueError) as e:
            raise InputFormatError(f"{path}: invalid grasp pose: {e}") from e


class RodNetworkRepository:
    """Rod networks as JSON; skeleton JSON is accepted and resampled."""

    @staticmethod
    def save(path: str | Path, network: RodNetwork) -> None:
        material = network.material
        write_json(
            path,
            {
                "nodes": network.rest_positions.tolist(),
                "edges": [
                    {"a": int(a), "b": int(b), "radius_m": float(r)}
                    for (a, b), r in zip(network.edges, network.radii)
                ],
                "material": {
                    "E_pa": material.young_modulus,
                    "rho_kgm3": material.density,
                    "damping": material.damping,
                },
                "root": network.root,
            },
        )

    @staticmethod
    def from_dict(data: dict, path: Path, material: MaterialParams | None = None) -> RodNetwork:
        nodes = _require(data, "nodes", path)
        edges = _require(data, "edges", path)
        try:
            if material is None and "material" in data:
                m = data["material"]
                material = MaterialParams(
                    young_modulus=float(m["E_pa"]),
                    density=float(m["rho_kgm3"]),
                    damping=float(m.get("damping", 0.5)),
                )
            positions = np.asarray(nodes, dtype=float).reshape(-1, 3)
            pairs = [(int(e["a"]), int(e["b"])) for e in edges]
            radii = [float(e["radius_m"]) for e in edges]
            if any(not (0 <= i < len(positions)) for pair in pairs for i in pair):
                raise ValueError("edge references a missing node")
            return RodNetwork.from_edges(
                positions, pairs, radii, material, root=int(data.get("root", 0))
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputFormatError(f"{path}: invalid rod network: {e}") from e

    @staticmethod
    def load(path: str | Path, material: MaterialConfig | None = None) -> RodNetwork:
        """Read a rod network, or build one from a skeleton file.

        For skeleton input the material comes from material (defaults if
        None); a rod network file carries its own material.
        """
        path = Path(path)
        data = read_json(path)
        if isinstance(data, dict) and "segments" in data:
            material = material or MaterialConfig()
            skel = SkeletonRepository.from_dict(data, path)
            return RodNetwork.from_skeleton(skel, material.to_params(), material.max_edge_len)
        return RodNetworkRepository.from_dict(data, path)


class TimeSeriesRepository:
    """Recorded trajectories as CSV: t_s then x, y, z per recorded node."""

    @staticmethod
    def header(series: TimeSeries) -> str:
        columns = ["t_s"]
        for node in series.node_ids:
            columns += [f"node{node}_x", f"node{node}_y", f"node{node}_z"]
        return ",".join(columns)

    @staticmethod
    def dumps(series: TimeSeries) -> str:
        rows = np.column_stack(
            [series.times, series.positions.reshape(len(series.times), -1)]
        )
        buffer = io.StringIO()
        buffer.write(TimeSeriesRepository.header(series) + "\n")
        np.savetxt(buffer, rows, fmt=FLOAT_FORMAT, delimiter=",")
        return buffer.getvalue()

    @staticmethod
    def save(path: str | Path, series: TimeSeries) -> None:
        Path(path).write_text(TimeSeriesRepository.dumps(series), encoding="ascii", newline="\n")

    @staticmethod
    def load(path: str | Path) -> TimeSeries:
        path = Path(path)
        if not path.exists():
            raise InputFormatError(f"Time series not found: {path}")
        with open(path, encoding="ascii") as f:
            header = f.readline().strip().split(",")
            if not header or header[0] != "t_s" or (len(header) - 1) % 3:
                raise InputFormatError(f"{path}: unexpected CSV header")
            try:
                node_ids = tuple(int(name[4:-2]) for name in header[1::3])
                rows = np.loadtxt(f, delimiter=",", ndmin=2)
            except ValueError as e:
                raise InputFormatError(f"{path}: bad time-series data: {e}") from e
        rows = rows.reshape(-1, len(header))
        return TimeSeries(rows[:, 0], node_ids, rows[:, 1:].reshape(len(rows), len(node_ids), 3))


class SweepResultRepository:
    """Sweep results as JSON, a two-column CSV and an optional gnuplot script."""

    X_LABELS = {
        SweepKind.AMPLITUDE: "actuation_amplitude_m",
        SweepKind.GRASP_LOCATION: "grasp_distance_m",
    }

    @staticmethod
    def to_dict(result: SweepResult) -> dict:
        return {
            "kind": result.kind.value,
            "inputs": result.inputs.tolist(),
            "amplitudes_m": result.amplitudes.tolist(),
            "pearson_r": result.pearson_r,
            "slope": result.slope,
            "intercept": result.intercept,
            "monotone_decreasing": result.monotone_decreasing,
            "degenerate": result.degenerate,
            "flower_node": result.flower_node,
            "grasp_nodes": list(result.grasp_nodes),
        }

    @staticmethod
    def save(path: str | Path, result: SweepResult) -> None:
        write_json(path, SweepResultRepository.to_dict(result))

    @staticmethod
    def load(path: str | Path) -> SweepResult:
        path = Path(path)
        data = read_json(path)
        try:
            return SweepResult(
                kind=SweepKind(_require(data, "kind", path)),
                inputs=np.asarray(data["inputs"], dtype=float),
                amplitudes=np.asarray(data["amplitudes_m"], dtype=float),
                pearson_r=_float_or_nan(data.get("pearson_r")),
                slope=_float_or_nan(data.get("slope")),
                intercept=_float_or_nan(data.get("intercept")),
                monotone_decreasing=bool(data.get("monotone_decreasing", False)),
                degenerate=bool(data.get("degenerate", False)),
                flower_node=int(data.get("flower_node", -1)),
                grasp_nodes=tuple(int(n) for n in data.get("grasp_nodes", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputFormatError(f"{path}: invalid sweep result: {e}") from e

    @staticmethod
    def save_csv(path: str | Path, result: SweepResult) -> None:
        label = SweepResultRepository.X_LABELS[result.kind]
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write(f"{label},amplitude_m\n")
            np.savetxt(
                f, np.column_stack([result.inputs, result.amplitudes]), fmt=FLOAT_FORMAT, delimiter=","
            )

    @staticmethod
    def save_gnuplot(path: str | Path, result: SweepResult, csv_name: str) -> None:
        """Plot script for the CSV, with the fitted line for amplitude sweeps."""
        label = SweepResultRepository.X_LABELS[result.kind]
        lines = [
            "set datafile separator ','",
            f"set xlabel '{label}'",
            "set ylabel 'flower amplitude (m)'",
            "set key top left",
            "set grid",
        ]
        plot = f"plot '{csv_name}' using 1:2 skip 1 with linespoints title 'simulated'"
        if result.kind is SweepKind.AMPLITUDE and not result.degenerate:
            lines.append(f"f(x) = {FLOAT_FORMAT % result.slope} * x + {FLOAT_FORMAT % result.intercept}")
            plot += f", f(x) title 'fit r={result.pearson_r:.4f}'"
        lines.append(plot)
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation

ORTHONORMAL_TOL = 1e-9


class PlantKind(str, Enum):
    """Procedural plant morphologies."""

    STRAIGHT = "straight"
    Y_PLANT = "y_plant"
    BRANCHED = "branched"


class SweepKind(str, Enum):
    """Swept variable of a vibration-transfer experiment."""

    AMPLITUDE = "amplitude"
    GRASP_LOCATION = "grasp_location"


def _as_vector(value, name: str) -> np.ndarray:
    vec = np.asarray(value, dtype=float).reshape(-1)
    if vec.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{name} must be finite")
    return vec


def orthonormal_error(rotation: np.ndarray) -> float:
    """Largest entry of |RᵀR − I|."""
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


def reorthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Closest proper rotation (polar decomposition through SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


# Frames and poses


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) pose: x_out = rotation @ x_in + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        translation = _as_vector(self.translation, "translation")
        if orthonormal_error(rotation) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(rotation) <= 0:
            raise ValueError("rotation must have determinant +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> RigidTransform:
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, quaternion_wxyz, translation) -> RigidTransform:
        """Build from a unit quaternion in (w, x, y, z) order."""
        w, x, y, z = np.asarray(quaternion_wxyz, dtype=float)
        rotation = Rotation.from_quat([x, y, z, w]).as_matrix()
        return cls(rotation, translation)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with w ≥ 0."""
        return rotation_to_quaternion(self.rotation)

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        rotation = self.rotation @ other.rotation
        if orthonormal_error(rotation) > ORTHONORMAL_TOL:
            rotation = reorthonormalize(rotation)
        return RigidTransform(
            rotation, self.rotation @ other.translation + self.translation
        )


def rotation_to_quaternion(rotation: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix, positive-w convention."""
    x, y, z, w = Rotation.from_matrix(rotation).as_quat()
    quat = np.array([w, x, y, z])
    if quat[0] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


def quaternion_to_rotation(quaternion_wxyz) -> np.ndarray:
    w, x, y, z = np.asarray(quaternion_wxyz, dtype=float)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; depth_scale converts raw depth units to meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def project(self, points_camera) -> np.ndarray:
        """Pixel coordinates (u, v) of camera-frame points."""
        points = np.asarray(points_camera, dtype=float)
        z = points[:, 2]
        u = self.fx * points[:, 0] / z + self.cx
        v = self.fy * points[:, 1] / z + self.cy
        return np.column_stack([u, v])


@dataclass(frozen=True, eq=False)
class DepthView:
    """One masked RGB-D capture: raw depth, binary mask and T_{W←C}."""

    depth: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics
    pose: RigidTransform

    def __post_init__(self):
        depth = np.asarray(self.depth)
        mask = np.asarray(self.mask).astype(bool)
        if depth.ndim != 2:
            raise ValueError("depth must be a 2-D array")
        if depth.shape != mask.shape:
            raise ValueError(
                f"depth {depth.shape} and mask {mask.shape} dimensions differ"
            )
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N×3 points in meters."""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("point coordinates must be finite")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def transformed(self, transform: RigidTransform) -> PointCloud:
        return PointCloud(transform.apply(self.points))


# Voxel lattice


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy on a regular lattice.

    occupancy is indexed [ix, iy, iz]; voxel k is centred at
    origin + k * resolution. The outermost layer is always empty.
    """

    origin: np.ndarray
    resolution: float
    occupancy: np.ndarray

    def __post_init__(self):
        origin = _as_vector(self.origin, "origin")
        occupancy = np.asarray(self.occupancy).astype(bool)
        if occupancy.ndim != 3 or min(occupancy.shape) < 1:
            raise ValueError("occupancy must be a 3-D array with dims >= 1")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if _border_occupied(occupancy):
            raise ValueError("border layer of a voxel grid must be empty")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "occupancy", occupancy)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    @property
    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def centers(self, indices) -> np.ndarray:
        """World positions of voxel centres for an (n, 3) index array."""
        return self.origin + np.asarray(indices, dtype=float) * self.resolution

    def occupied_indices(self) -> np.ndarray:
        """Occupied voxel indices in x-fastest (storage) order."""
        idx = np.argwhere(self.occupancy)
        order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))
        return idx[order]

    def with_occupancy(self, occupancy: np.ndarray) -> VoxelGrid:
        return VoxelGrid(self.origin, self.resolution, occupancy)


def _border_occupied(occupancy: np.ndarray) -> bool:
    for axis in range(3):
        if occupancy.shape[axis] < 3:
            if occupancy.any():
                return True
            continue
        first = np.take(occupancy, 0, axis=axis)
        last = np.take(occupancy, -1, axis=axis)
        if first.any() or last.any():
            return True
    return False


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Euclidean distance (voxel units) from occupied voxels to free space."""

    grid: VoxelGrid
    values: np.ndarray

    def at(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=int).reshape(-1, 3)
        return self.values[idx[:, 0], idx[:, 1], idx[:, 2]]


# Skeleton graphs


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Weighted graph over skeleton voxels.

    radii are in meters (EDT * resolution); edt keeps the raw voxel-unit
    values used by the edge cost. components > 1 marks a graph that was
    reduced to its largest connected component.
    """

    voxel_indices: np.ndarray
    positions: np.ndarray
    radii: np.ndarray
    edt: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    resolution: float
    components: int = 1

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        if edges.size and np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("skeleton graph contains a self edge")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(
            self, "weights", np.asarray(self.weights, dtype=float).reshape(-1)
        )
        object.__setattr__(
            self, "positions", np.asarray(self.positions, dtype=float).reshape(-1, 3)
        )

    @property
    def vertex_count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def edge_lengths(self) -> np.ndarray:
        if not len(self.edges):
            return np.zeros(0)
        diff = self.positions[self.edges[:, 1]] - self.positions[self.edges[:, 0]]
        return np.linalg.norm(diff, axis=1)

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))


@dataclass(frozen=True)
class SkeletonNode:
    id: int
    position: tuple[float, float, float]
    radius: float


@dataclass(frozen=True, eq=False)
class Segment:
    """Polyline between two skeleton nodes, oriented away from the root."""

    id: int
    a: int
    b: int
    polyline: np.ndarray
    length: float
    mean_radius: float
    dz: float

    @property
    def chord(self) -> np.ndarray:
        return self.polyline[-1] - self.polyline[0]


@dataclass(frozen=True, eq=False)
class SimplifiedSkeleton:
    """Tree of junctions and endpoints joined by polyline segments."""

    nodes: tuple[SkeletonNode, ...]
    segments: tuple[Segment, ...]
    root: int

    def node(self, node_id: int) -> SkeletonNode:
        return self.nodes[node_id]

    def segment(self, segment_id: int) -> Segment:
        return self.segments[segment_id]

    def degree(self, node_id: int) -> int:
        return sum(1 for s in self.segments if node_id in (s.a, s.b))

    def child_segments(self, node_id: int) -> list[Segment]:
        return [s for s in self.segments if s.a == node_id]

    def parent_segment(self, node_id: int) -> Segment | None:
        for s in self.segments:
            if s.b == node_id:
                return s
        return None

    def leaves(self) -> list[int]:
        """Endpoint nodes other than the root, in id order."""
        return [
            n.id for n in self.nodes if n.id != self.root and not self.child_segments(n.id)
        ]

    def path_to(self, node_id: int) -> list[int]:
        """Segment ids from the root down to node_id."""
        path = []
        current = node_id
        while current != self.root:
            parent = self.parent_segment(current)
            if parent is None:
                raise ValueError(f"node {node_id} is not connected to the root")
            path.append(parent.id)
            current = parent.a
        return path[::-1]

    @property
    def total_length(self) -> float:
        return float(sum(s.length for s in self.segments))

    def scaled_radii(self, factor: float) -> SimplifiedSkeleton:
        """Copy with every radius multiplied by factor."""
        nodes = tuple(
            SkeletonNode(n.id, n.position, n.radius * factor) for n in self.nodes
        )
        segments = tuple(
            Segment(s.id, s.a, s.b, s.polyline, s.length, s.mean_radius * factor, s.dz)
            for s in self.segments
        )
        return SimplifiedSkeleton(nodes, segments, self.root)


# Grasp planning


@dataclass(frozen=True)
class ScoreParams:
    """Hyperparameters of the main-stem path score."""

    alpha: float = 1.0
    v_bias: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.v_bias < 0:
            raise ValueError("alpha and v_bias must be non-negative")


@dataclass(frozen=True)
class StemPath:
    """Root-to-leaf segment path with per-segment pruning flags."""

    segment_ids: tuple[int, ...]
    score: float
    pruned: tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.pruned:
            object.__setattr__(self, "pruned", (False,) * len(self.segment_ids))
        if len(self.pruned) != len(self.segment_ids):
            raise ValueError("pruned flags must match segment ids")

    @property
    def core(self) -> tuple[int, ...]:
        return tuple(s for s, p in zip(self.segment_ids, self.pruned) if not p)


@dataclass(frozen=True, eq=False)
class GraspPose:
    """7-DoF grasp: position plus unit quaternion (w, x, y, z)."""

    position: np.ndarray
    approach: np.ndarray
    stem_dir: np.ndarray
    quaternion: np.ndarray
    objective: float = 0.0
    segment_id: int = -1

    @property
    def rotation(self) -> np.ndarray:
        return quaternion_to_rotation(self.quaternion)


# Rod dynamics


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic stem material; section stiffnesses derive from edge radii."""

    young_modulus: float = 5.0e9
    density: float = 900.0
    damping: float = 0.5

    def __post_init__(self):
        if self.young_modulus <= 0 or self.density <= 0:
            raise ValueError("Young's modulus and density must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")

    @staticmethod
    def area(radius):
        return np.pi * np.asarray(radius, dtype=float) ** 2

    @staticmethod
    def second_moment(radius):
        return np.pi * np.asarray(radius, dtype=float) ** 4 / 4.0

    def axial_stiffness(self, radius):
        return self.young_modulus * self.area(radius)

    def bending_stiffness(self, radius):
        return self.young_modulus * self.second_moment(radius)


@dataclass(frozen=True, eq=False)
class ActuationProfile:
    """Sinusoidal displacement prescribed at the grasp node."""

    grasp_node: int
    direction: np.ndarray
    amplitude: float
    frequency: float
    duration: float = 0.0
    guess_hops: int = 2
    guess_decay: float = 0.5

    def __post_init__(self):
        direction = _as_vector(self.direction, "direction")
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise ValueError("actuation direction must be non-zero")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        object.__setattr__(self, "direction", direction / norm)

    @property
    def period(self) -> float:
        return 1.0 / self.frequency

    def displacement(self, t: float) -> np.ndarray:
        return self.amplitude * math.sin(2.0 * math.pi * self.frequency * t) * self.direction


@dataclass(eq=False)
class TimeSeries:
    """Recorded node positions, one row per step (first row = initial state)."""

    times: np.ndarray
    node_ids: tuple[int, ...]
    positions: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        if len(self.times) == 0:
            return 0.0
        return float(self.times[-1] - self.times[0])

    def trajectory(self, node_id: int) -> np.ndarray:
        try:
            column = self.node_ids.index(node_id)
        except ValueError as e:
            raise KeyError(f"node {node_id} was not recorded") from e
        return self.positions[:, column, :]


@dataclass(eq=False)
class SweepResult:
    """Flower amplitude per swept value plus linear-fit statistics."""

    kind: SweepKind
    inputs: np.ndarray
    amplitudes: np.ndarray
    pearson_r: float
    slope: float
    intercept: float
    monotone_decreasing: bool
    degenerate: bool = False
    flower_node: int = -1
    grasp_nodes: tuple[int, ...] = ()

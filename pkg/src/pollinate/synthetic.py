"""
Procedural plants with known skeletons.

Used to generate ground-truth test data: skeletons built from straight
branches, solid point clouds sampled inside their tubes, and pinhole depth
renderings of clouds.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dersim import RodNetwork
from .models import (
    CameraIntrinsics,
    DepthView,
    MaterialParams,
    PlantKind,
    PointCloud,
    RigidTransform,
    Segment,
    SimplifiedSkeleton,
    SkeletonNode,
)

logger = logging.getLogger(__name__)

POLYLINE_SPACING = 0.005


@dataclass(frozen=True)
class Branch:
    """Straight branch leaving `parent` node at a tilt from +z and an azimuth."""

    parent: int
    length: float
    radius: float
    tilt_deg: float = 0.0
    azimuth_deg: float = 0.0

    @property
    def direction(self) -> np.ndarray:
        tilt = math.radians(self.tilt_deg)
        azimuth = math.radians(self.azimuth_deg)
        return np.array(
            [math.sin(tilt) * math.cos(azimuth), math.sin(tilt) * math.sin(azimuth), math.cos(tilt)]
        )


def build_skeleton(branches: list[Branch], base=(0.0, 0.0, 0.0)) -> SimplifiedSkeleton:
    """Tree whose node 0 is the base; branch k ends at node k + 1."""
    positions = [np.asarray(base, dtype=float)]
    node_radius = [branches[0].radius if branches else 0.0]
    segments = []
    for branch in branches:
        start = positions[branch.parent]
        end = start + branch.length * branch.direction
        n_points = max(2, int(math.ceil(branch.length / POLYLINE_SPACING)) + 1)
        polyline = start + np.linspace(0.0, 1.0, n_points)[:, None] * (end - start)
        positions.append(end)
        node_radius.append(branch.radius)
        segments.append(
            Segment(
                id=len(segments),
                a=branch.parent,
                b=len(positions) - 1,
                polyline=polyline,
                length=float(branch.length),
                mean_radius=float(branch.radius),
                dz=float(end[2] - start[2]),
            )
        )
    nodes = tuple(
        SkeletonNode(i, tuple(float(c) for c in p), float(r))
        for i, (p, r) in enumerate(zip(positions, node_radius))
    )
    return SimplifiedSkeleton(nodes, tuple(segments), 0)


def straight_stem(height: float = 0.4, radius: float = 0.004) -> SimplifiedSkeleton:
    return build_skeleton([Branch(0, height, radius)])


def y_plant(
    trunk: float = 0.25,
    upright: float = 0.15,
    side: float = 0.12,
    radius: float = 0.004,
    branch_radius: float = 0.003,
) -> SimplifiedSkeleton:
    """Vertical trunk splitting into a near-vertical top and a lateral branch."""
    return build_skeleton(
        [
            Branch(0, trunk, radius),
            Branch(1, upright, branch_radius, tilt_deg=12.0, azimuth_deg=180.0),
            Branch(1, side, branch_radius, tilt_deg=55.0, azimuth_deg=0.0),
        ]
    )


def branched_plant() -> SimplifiedSkeleton:
    """Three branching levels: trunk, two forks and a pair of twigs."""
    return build_skeleton(
        [
            Branch(0, 0.20, 0.005),
            Branch(1, 0.14, 0.004, tilt_deg=8.0, azimuth_deg=0.0),
            Branch(1, 0.10, 0.0035, tilt_deg=50.0, azimuth_deg=180.0),
            Branch(2, 0.10, 0.003, tilt_deg=5.0, azimuth_deg=90.0),
            Branch(2, 0.08, 0.003, tilt_deg=55.0, azimuth_deg=300.0),
            Branch(3, 0.06, 0.003, tilt_deg=20.0, azimuth_deg=180.0),
            Branch(3, 0.05, 0.003, tilt_deg=70.0, azimuth_deg=240.0),
        ]
    )


def make_plant(kind: PlantKind) -> SimplifiedSkeleton:
    builders = {
        PlantKind.STRAIGHT: straight_stem,
        PlantKind.Y_PLANT: y_plant,
        PlantKind.BRANCHED: branched_plant,
    }
    return builders[PlantKind(kind)]()


def ground_truth_stem(skel: SimplifiedSkeleton) -> list[int]:
    """Segments from the base to the highest leaf."""
    top = max(skel.leaves(), key=lambda n: (skel.node(n).position[2], -n))
    return skel.path_to(top)


def _capsule_distance(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    axis = p1 - p0
    t = np.clip((points - p0) @ axis / (axis @ axis), 0.0, 1.0)
    return np.linalg.norm(points - (p0 + t[:, None] * axis), axis=1)


def sample_cloud(
    skel: SimplifiedSkeleton,
    spacing: float = 0.001,
    noise: float = 0.0,
    seed: int = 0,
) -> PointCloud:
    """Lattice points inside every segment's tube (spherical caps at the ends)."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    keys = []
    for segment in skel.segments:
        radius = segment.mean_radius
        for p0, p1 in zip(segment.polyline[:-1], segment.polyline[1:]):
            lo = np.floor((np.minimum(p0, p1) - radius) / spacing).astype(int)
            hi = np.ceil((np.maximum(p0, p1) + radius) / spacing).astype(int)
            grid = np.stack(
                np.meshgrid(*(np.arange(lo[c], hi[c] + 1) for c in range(3)), indexing="ij"),
                axis=-1,
            ).reshape(-1, 3)
            inside = _capsule_distance(grid * spacing, p0, p1) <= radius
            keys.append(grid[inside])

    lattice = np.unique(np.vstack(keys), axis=0) if keys else np.zeros((0, 3), dtype=int)
    points = lattice * spacing
    if noise > 0:
        points = points + np.random.default_rng(seed).normal(0.0, noise, points.shape)
    logger.info(f"Sampled {len(points)} points from {len(skel.segments)} segments")
    return PointCloud(points)


def straight_rod(
    length: float = 0.4,
    radius: float = 0.004,
    n_nodes: int = 50,
    material: MaterialParams | None = None,
    direction=(0.0, 0.0, 1.0),
) -> RodNetwork:
    """Uniform straight rod rooted at the origin."""
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    positions = np.linspace(0.0, length, n_nodes)[:, None] * direction
    edges = np.column_stack([np.arange(n_nodes - 1), np.arange(1, n_nodes)])
    return RodNetwork.from_edges(positions, edges, np.full(n_nodes - 1, radius), material)


def random_rod_network(seed: int = 0, segments: int = 3, edges_per_segment: int = 4) -> RodNetwork:
    """Small random tree of wiggly rods for derivative checks."""
    rng = np.random.default_rng(seed)
    positions = [np.zeros(3)]
    edges, radii = [], []
    junctions = [0]
    for _ in range(segments):
        node = int(rng.choice(junctions))
        direction = np.array([0.0, 0.0, 1.0]) + 0.6 * rng.normal(size=3)
        for _ in range(edges_per_segment):
            direction = direction / np.linalg.norm(direction)
            step = (0.01 + 0.01 * rng.random()) * direction
            positions.append(positions[node] + step)
            edges.append((node, len(positions) - 1))
            radii.append(0.002 + 0.002 * rng.random())
            node = len(positions) - 1
            direction = direction + 0.3 * rng.normal(size=3)
        junctions.append(node)
    return RodNetwork.from_edges(np.vstack(positions), edges, radii, MaterialParams(young_modulus=1e8))


# Depth views


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """T_{W←C} of a camera at eye looking at target (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidTransform(np.column_stack([right, down, forward]), eye)


def orbit_poses(target, distance: float, count: int, elevation: float = 0.0) -> list[RigidTransform]:
    """Cameras evenly spaced on a horizontal circle around target."""
    target = np.asarray(target, dtype=float)
    poses = []
    for k in range(count):
        angle = 2 * math.pi * k / count
        eye = target + np.array(
            [distance * math.cos(angle), distance * math.sin(angle), elevation]
        )
        poses.append(look_at(eye, target))
    return poses


def default_intrinsics(width: int = 160, height: int = 240) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(width), fy=float(width), cx=(width - 1) / 2.0, cy=(height - 1) / 2.0
    )


def render_depth(
    cloud: PointCloud,
    intrinsics: CameraIntrinsics,
    pose: RigidTransform,
    width: int,
    height: int,
) -> DepthView:
    """Z-buffered pinhole projection of a cloud; unseen pixels have zero depth."""
    camera_points = pose.inverse().apply(cloud.points)
    camera_points = camera_points[camera_points[:, 2] > 0]
    depth = np.zeros((height, width), dtype=np.uint16)
    if len(camera_points):
        uv = np.rint(intrinsics.project(camera_points)).astype(int)
        inside = (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)
        uv, z = uv[inside], camera_points[inside, 2]
        raw = np.rint(z / intrinsics.depth_scale)
        keep = (raw > 0) & (raw <= np.iinfo(np.uint16).max)
        uv, raw = uv[keep], raw[keep]
        pixel = uv[:, 1] * width + uv[:, 0]
        order = np.lexsort((raw, pixel))
        _, first = np.unique(pixel[order], return_index=True)
        nearest = order[first]
        depth[uv[nearest, 1], uv[nearest, 0]] = raw[nearest].astype(np.uint16)
    return DepthView(depth, depth > 0, intrinsics, pose)


def plane_view(
    width: int = 32,
    height: int = 24,
    distance: float = 0.5,
    intrinsics: CameraIntrinsics | None = None,
    pose: RigidTransform | None = None,
) -> DepthView:
    """Fronto-parallel plane filling the whole image."""
    intrinsics = intrinsics or default_intrinsics(width, height)
    raw = int(round(distance / intrinsics.depth_scale))
    depth = np.full((height, width), raw, dtype=np.uint16)
    return DepthView(depth, np.ones_like(depth, dtype=bool), intrinsics, pose or RigidTransform.identity())


def plant_views(
    skel: SimplifiedSkeleton,
    count: int = 4,
    distance: float = 0.6,
    width: int = 160,
    height: int = 240,
    spacing: float = 0.001,
) -> list[DepthView]:
    """Depth views of a sampled plant from cameras orbiting its mid-height."""
    cloud = sample_cloud(skel, spacing)
    center = cloud.points.mean(axis=0)
    intrinsics = default_intrinsics(width, height)
    return [
        render_depth(cloud, intrinsics, pose, width, height)
        for pose in orbit_poses(center, distance, count)
    ]

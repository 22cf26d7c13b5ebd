"""
Multi-view fusion and point-cloud cleanup.

Depth views are back-projected into the world frame, optionally registered
against the growing fused model with point-to-point ICP, then downsampled,
clustered and voxelized for skeletonization.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN

from .errors import EmptyCloud, GridTooLarge, NoClusters, NoConvergence
from .models import DepthView, PointCloud, RigidTransform, VoxelGrid

logger = logging.getLogger(__name__)

# Relative singular-value threshold below which the Procrustes covariance is
# treated as rank deficient.
RANK_TOL = 1e-9


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a∘b: apply b first, then a."""
    return a @ b


def camera_poses(
    flange_poses: list[RigidTransform], hand_eye: RigidTransform
) -> list[RigidTransform]:
    """T_{B←C} = T_{B←F} · T_{F←C} for every recorded flange pose."""
    return [compose(flange, hand_eye) for flange in flange_poses]


def backproject(view: DepthView) -> PointCloud:
    """Lift every masked-in pixel with positive depth into the world frame."""
    intr = view.intrinsics
    valid = view.mask & (view.depth > 0)
    v, u = np.nonzero(valid)
    if len(u) == 0:
        raise EmptyCloud("Depth view has no masked-in pixels with positive depth")

    z = view.depth[v, u].astype(float) * intr.depth_scale
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    points_camera = np.column_stack([x, y, z])
    return PointCloud(view.pose.apply(points_camera))


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool


def procrustes(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping source onto target (SVD).

    A rank-deficient covariance (fewer than three independent directions,
    e.g. one point or collinear points) leaves rotation underdetermined; the
    rotation then defaults to identity and only the centroids are aligned.
    """
    centroid_s = source.mean(axis=0)
    centroid_t = target.mean(axis=0)
    h = (source - centroid_s).T @ (target - centroid_t)
    u, s, vt = np.linalg.svd(h)

    if s[0] <= 0 or s[1] <= RANK_TOL * s[0]:
        rotation = np.eye(3)
    else:
        v = vt.T
        d = np.sign(np.linalg.det(v @ u.T))
        if d == 0:
            d = 1.0
        rotation = v @ np.diag([1.0, 1.0, d]) @ u.T

    translation = centroid_t - rotation @ centroid_s
    return RigidTransform(rotation, translation)


def _rmse(distances: np.ndarray) -> float:
    return float(np.sqrt(np.mean(distances**2)))


def icp_refine(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    max_iter: int = 50,
    tol: float = 1e-7,
    strict: bool = False,
) -> RegistrationResult:
    """Point-to-point ICP returning ΔT_ICP∘init.

    Iterates until the mean correspondence distance improves by less than
    tol (meters). The best transform seen is returned, so the result never
    has a larger nearest-neighbour RMSE than init.
    """
    if source.is_empty or target.is_empty:
        raise EmptyCloud("ICP needs non-empty source and target clouds")
    if init is None:
        init = RigidTransform.identity()

    tree = cKDTree(target.points)
    current = init
    distances, indices = tree.query(current.apply(source.points))
    best = current
    best_rmse = _rmse(distances)
    previous_mean = float(np.mean(distances))
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        moved = current.apply(source.points)
        delta = procrustes(moved, target.points[indices])
        current = compose(delta, current)

        distances, indices = tree.query(current.apply(source.points))
        mean_distance = float(np.mean(distances))
        rmse = _rmse(distances)
        if rmse < best_rmse:
            best, best_rmse = current, rmse

        if previous_mean - mean_distance < tol:
            converged = True
            break
        previous_mean = mean_distance

    if not converged:
        message = (
            f"ICP did not converge in {max_iter} iterations (rmse {best_rmse:.3e} m)"
        )
        logger.warning(message)
        if strict:
            raise NoConvergence(message, best_transform=best, rmse=best_rmse)

    return RegistrationResult(best, best_rmse, iterations, converged)


def fuse_views(
    views: list[DepthView],
    icp: bool = True,
    max_iter: int = 50,
    tol: float = 1e-7,
) -> PointCloud:
    """Aggregate views in input order, each registered to the fused model so far."""
    if not views:
        raise ValueError("fuse_views needs at least one view")

    fused: list[np.ndarray] = []
    for index, view in enumerate(views):
        try:
            cloud = backproject(view)
        except EmptyCloud:
            logger.warning(f"View {index} contributed no points")
            continue

        if icp and fused:
            model = PointCloud(np.vstack(fused))
            result = icp_refine(cloud, model, max_iter=max_iter, tol=tol)
            cloud = cloud.transformed(result.transform)
            logger.info(
                f"View {index}: ICP rmse {result.rmse:.3e} m after "
                f"{result.iterations} iterations"
            )
        fused.append(cloud.points)

    if not fused:
        raise EmptyCloud("All views are empty after masking")

    merged = PointCloud(np.vstack(fused))
    logger.info(f"Fused {len(views)} views into {len(merged)} points")
    return merged


def voxel_downsample(cloud: PointCloud, cell: float) -> PointCloud:
    """Replace the points of each occupied cell by their centroid."""
    if cell <= 0:
        raise ValueError("cell size must be positive")
    if cloud.is_empty:
        return cloud

    keys = np.floor(cloud.points / cell).astype(np.int64)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None])


def largest_cluster(cloud: PointCloud, eps: float, min_pts: int) -> PointCloud:
    """Points of the most populous DBSCAN cluster.

    Ties go to the cluster with the lowest centroid z, then to the one whose
    first point comes first in the input. Noise is never returned.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts at least 1")
    if cloud.is_empty:
        raise NoClusters("Cannot cluster an empty cloud")

    labels = DBSCAN(eps=eps, min_samples=min_pts).fit(cloud.points).labels_
    cluster_ids = [c for c in np.unique(labels) if c >= 0]
    if not cluster_ids:
        raise NoClusters(f"Every point is noise at eps={eps} m, min_pts={min_pts}")

    def rank(cluster_id):
        members = np.flatnonzero(labels == cluster_id)
        centroid_z = float(cloud.points[members, 2].mean())
        return (-len(members), centroid_z, int(members[0]))

    best = min(cluster_ids, key=rank)
    kept = cloud.points[labels == best]
    logger.info(
        f"DBSCAN found {len(cluster_ids)} clusters; kept {len(kept)}/{len(cloud)} points"
    )
    return PointCloud(kept)


def voxelize(cloud: PointCloud, resolution: float, max_grid_dim: int = 512) -> VoxelGrid:
    """Binary occupancy grid with a one-voxel empty border."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if cloud.is_empty:
        raise EmptyCloud("Cannot voxelize an empty cloud")

    points = cloud.points
    origin = points.min(axis=0) - resolution
    # small offset keeps exact multiples of the resolution in their own cell
    indices = np.floor((points - origin) / resolution + 0.5 + 1e-9).astype(np.int64)
    dims = indices.max(axis=0) + 2
    if np.any(dims > max_grid_dim):
        raise GridTooLarge(dims, max_grid_dim)

    occupancy = np.zeros(tuple(int(d) for d in dims), dtype=bool)
    occupancy[indices[:, 0], indices[:, 1], indices[:, 2]] = True
    grid = VoxelGrid(origin, resolution, occupancy)
    logger.info(f"Voxelized {len(cloud)} points into {grid.dims} ({grid.occupied_count} occupied)")
    return grid


def fill_volume(grid: VoxelGrid) -> VoxelGrid:
    """Fill enclosed cavities so hollow scans become solid volumes."""
    filled = ndimage.binary_fill_holes(grid.occupancy)
    return grid.with_occupancy(filled)


def clean_cloud(cloud: PointCloud, cell: float, eps: float, min_pts: int) -> PointCloud:
    """Downsample, then keep the dominant DBSCAN cluster."""
    downsampled = voxel_downsample(cloud, cell)
    logger.info(f"Downsampled {len(cloud)} -> {len(downsampled)} points at {cell} m")
    return largest_cluster(downsampled, eps, min_pts)

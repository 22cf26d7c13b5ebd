"""
Main-stem selection and grasp pose planning on a simplified skeleton.
"""

import logging
import math

import numpy as np

from .config import GraspConfig
from .errors import DegenerateFrame, EmptySkeleton, ZeroLengthSegment
from .models import GraspPose, ScoreParams, SimplifiedSkeleton, StemPath, rotation_to_quaternion

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12
PERPENDICULAR_TOL = 1e-3
DOWN = np.array([0.0, 0.0, -1.0])


def _segments_score(skel: SimplifiedSkeleton, segment_ids, params: ScoreParams) -> float:
    total = 0.0
    for segment_id in segment_ids:
        segment = skel.segment(segment_id)
        if segment.length <= 0:
            raise ZeroLengthSegment(f"Segment {segment_id} has zero length")
        vertical = 1.0 + params.v_bias * abs(segment.dz) / segment.length
        total += segment.length * segment.mean_radius**params.alpha * vertical
    return total


def score_path(path: StemPath, skel: SimplifiedSkeleton, params: ScoreParams) -> float:
    """Σ L·r̄^α·(1 + v_bias·|dz|/L) over the path's segments."""
    return _segments_score(skel, path.segment_ids, params)


def find_main_stem(skel: SimplifiedSkeleton, params: ScoreParams) -> StemPath:
    """Best-scoring root-to-leaf path.

    Every leaf defines exactly one path, so all of them are scored. Equal
    scores go to the more vertical path (larger Σ|dz|), then to the smaller
    leaf id.
    """
    if not skel.segments:
        raise EmptySkeleton("Skeleton has no segments")

    best = None
    for leaf in skel.leaves():
        ids = skel.path_to(leaf)
        score = _segments_score(skel, ids, params)
        rise = sum(abs(skel.segment(s).dz) for s in ids)
        if best is None:
            best = (score, rise, ids)
            continue
        tol = TIE_TOL * max(1.0, abs(best[0]))
        if score > best[0] + tol or (abs(score - best[0]) <= tol and rise > best[1] + TIE_TOL):
            best = (score, rise, ids)

    score, _, ids = best
    logger.info(f"Main stem: {len(ids)} segments, score {score:.6g}")
    return StemPath(tuple(ids), score)


def segment_angle(skel: SimplifiedSkeleton, segment_id: int) -> float:
    """Angle in degrees between a segment's chord and the vertical axis."""
    chord = skel.segment(segment_id).chord
    norm = np.linalg.norm(chord)
    if norm == 0:
        return 90.0
    return math.degrees(math.acos(min(1.0, abs(chord[2]) / norm)))


def prune_stem(path: StemPath, skel: SimplifiedSkeleton, max_angle: float = 60.0) -> StemPath:
    """Cut the path at the first segment leaning more than max_angle from +z.

    The first segment is always kept.
    """
    pruned = [False] * len(path.segment_ids)
    for i, segment_id in enumerate(path.segment_ids):
        if i > 0 and segment_angle(skel, segment_id) > max_angle:
            pruned[i:] = [True] * (len(pruned) - i)
            logger.info(f"Pruned {len(pruned) - i} stem segments from segment {segment_id}")
            break
    return StemPath(path.segment_ids, path.score, tuple(pruned))


def _point_at(polyline: np.ndarray, cumulative: np.ndarray, s: float) -> np.ndarray:
    s = min(max(s, 0.0), cumulative[-1])
    i = int(np.searchsorted(cumulative, s, side="right")) - 1
    i = min(max(i, 0), len(polyline) - 2)
    span = cumulative[i + 1] - cumulative[i]
    t = 0.0 if span == 0 else (s - cumulative[i]) / span
    return polyline[i] + t * (polyline[i + 1] - polyline[i])


def select_grasp_point(core: StemPath, skel: SimplifiedSkeleton) -> tuple[np.ndarray, np.ndarray, int]:
    """Arc-length midpoint of the longest retained segment and its tangent.

    Returns (P_W, v_e, segment_id); v_e is oriented upward (non-negative z).
    """
    retained = core.core
    if not retained:
        raise EmptySkeleton("Stem has no retained segments")
    segment = max((skel.segment(s) for s in retained), key=lambda seg: (seg.length, -seg.id))
    if segment.length <= 0:
        raise ZeroLengthSegment(f"Segment {segment.id} has zero length")

    polyline = segment.polyline
    steps = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(steps)])
    half = cumulative[-1] / 2.0
    midpoint = _point_at(polyline, cumulative, half)

    # central difference over one mean polyline step
    h = min(half, cumulative[-1] / max(1, len(steps)))
    tangent = _point_at(polyline, cumulative, half + h) - _point_at(polyline, cumulative, half - h)
    tangent = tangent / np.linalg.norm(tangent)
    if tangent[2] < 0:
        tangent = -tangent
    return midpoint, tangent, segment.id


def _nearby_branches(
    point: np.ndarray, skel: SimplifiedSkeleton, radius: float, exclude: int | None
) -> np.ndarray:
    directions = []
    for segment in skel.segments:
        if segment.id == exclude:
            continue
        if np.min(np.linalg.norm(segment.polyline - point, axis=1)) > radius:
            continue
        chord = segment.chord
        norm = np.linalg.norm(chord)
        if norm > 0:
            directions.append(chord / norm)
    return np.asarray(directions).reshape(-1, 3)


def approach_basis(v_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis (u1, u2) of the plane perpendicular to v_e."""
    u1 = np.array([1.0, 0.0, 0.0]) - v_e[0] * v_e
    if np.linalg.norm(u1) < 1e-6:
        u1 = np.array([0.0, 1.0, 0.0]) - v_e[1] * v_e
    u1 = u1 / np.linalg.norm(u1)
    u2 = np.cross(v_e, u1)
    return u1, u2 / np.linalg.norm(u2)


def approach_vector(
    P_W,
    v_e,
    skel: SimplifiedSkeleton,
    radius: float = 0.10,
    n_dirs: int = 360,
    exclude: int | None = None,
) -> tuple[np.ndarray, float]:
    """Direction of least obstruction around the stem.

    Minimises max_j |n·b_j| over n_dirs unit vectors perpendicular to v_e,
    where b_j are the unit chords of segments passing within radius of P_W
    (the grasped segment, exclude, left out). Ties prefer the most horizontal
    direction, then the smallest sample index. Returns (n*, objective).
    """
    if n_dirs < 8:
        raise ValueError("n_dirs must be at least 8")
    point = np.asarray(P_W, dtype=float)
    v_e = np.asarray(v_e, dtype=float)
    v_e = v_e / np.linalg.norm(v_e)

    u1, u2 = approach_basis(v_e)
    theta = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
    candidates = np.cos(theta)[:, None] * u1 + np.sin(theta)[:, None] * u2

    branches = _nearby_branches(point, skel, radius, exclude)
    if len(branches):
        objective = np.max(np.abs(candidates @ branches.T), axis=1)
    else:
        objective = np.zeros(n_dirs)
    tilt = np.abs(candidates @ DOWN)

    best = 0
    for k in range(1, n_dirs):
        if objective[k] < objective[best] - TIE_TOL:
            best = k
        elif abs(objective[k] - objective[best]) <= TIE_TOL and tilt[k] < tilt[best] - TIE_TOL:
            best = k

    logger.debug(f"Approach search: {len(branches)} nearby branches, objective {objective[best]:.4f}")
    return candidates[best], float(objective[best])


def build_pose(P_W, n_star, v_e, objective: float = 0.0, segment_id: int = -1) -> GraspPose:
    """Gripper frame x = approach, z = stem tangent, y = z × x."""
    n_star = np.asarray(n_star, dtype=float)
    v_e = np.asarray(v_e, dtype=float)
    x_axis = n_star / np.linalg.norm(n_star)
    stem = v_e / np.linalg.norm(v_e)
    if abs(float(x_axis @ stem)) > PERPENDICULAR_TOL:
        raise DegenerateFrame(
            f"Approach and stem directions are not perpendicular (dot {x_axis @ stem:.3g})"
        )

    z_axis = stem - (stem @ x_axis) * x_axis
    z_axis = z_axis / np.linalg.norm(z_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.column_stack([x_axis, y_axis, z_axis])
    return GraspPose(
        position=np.asarray(P_W, dtype=float),
        approach=x_axis,
        stem_dir=z_axis,
        quaternion=rotation_to_quaternion(rotation),
        objective=float(objective),
        segment_id=segment_id,
    )


def plan_grasp(
    skel: SimplifiedSkeleton, config: GraspConfig | None = None
) -> tuple[GraspPose, StemPath]:
    """Main stem -> core stem -> grasp point -> approach -> pose."""
    config = config or GraspConfig()
    params = ScoreParams(config.alpha, config.v_bias)

    stem = find_main_stem(skel, params)
    core = prune_stem(stem, skel, config.max_angle_deg)
    point, tangent, segment_id = select_grasp_point(core, skel)
    approach, objective = approach_vector(
        point, tangent, skel, config.obstruction_radius, config.n_dirs, exclude=segment_id
    )
    pose = build_pose(point, approach, tangent, objective, segment_id)
    logger.info(
        f"Grasp at {np.round(point, 4).tolist()} on segment {segment_id}, "
        f"objective {objective:.4f}"
    )
    return pose, core

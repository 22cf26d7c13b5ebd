"""
Exception hierarchy for pollinate.

Every error carries the process exit code the CLI maps it to, so library code
only ever raises and `cli.main` is the single place that turns failures into
exit statuses.
"""


class PollinateError(Exception):
    """Base class for all pollinate errors."""

    exit_code = 2


class InputFormatError(PollinateError):
    """A file could not be found or parsed."""

    exit_code = 2


class ConfigError(PollinateError):
    """Configuration document is invalid."""

    exit_code = 2


class ValidationFailed(PollinateError):
    """One or more acceptance checks failed."""

    exit_code = 1


# Vision pipeline


class EmptyCloud(PollinateError):
    """No valid point survived back-projection or fusion."""

    exit_code = 3


class NoClusters(PollinateError):
    """DBSCAN labelled every point as noise."""

    exit_code = 3


class GridTooLarge(PollinateError):
    """Voxelization would exceed the configured grid cap."""

    exit_code = 4

    def __init__(self, dims, cap: int):
        self.dims = tuple(int(d) for d in dims)
        self.cap = cap
        super().__init__(f"Voxel grid {self.dims} exceeds cap of {cap} per axis")


class NoConvergence(PollinateError):
    """ICP hit max_iter while still improving by more than tol."""

    exit_code = 2

    def __init__(self, message: str, best_transform=None, rmse: float = float("nan")):
        super().__init__(message)
        self.best_transform = best_transform
        self.rmse = rmse


# Skeleton / grasp planning


class EmptySkeleton(PollinateError):
    """Skeleton has no voxels or no segments."""

    exit_code = 3


class ZeroLengthSegment(PollinateError):
    """A skeleton segment has zero arc length."""

    exit_code = 2


class DegenerateFrame(PollinateError):
    """Approach and stem directions are not perpendicular."""

    exit_code = 2


# Rod dynamics


class DegenerateSegment(PollinateError):
    """A rest edge is shorter than the minimum admissible length."""

    exit_code = 2


class AntiparallelEdges(PollinateError):
    """Two adjacent edges fold back onto each other (180 degree turn)."""

    exit_code = 2


class NewtonDivergence(PollinateError):
    """Implicit step failed to reach the residual tolerance."""

    exit_code = 5

    def __init__(self, message: str, residuals=(), step_index: int | None = None):
        super().__init__(message)
        self.residuals = [float(r) for r in residuals]
        self.step_index = step_index


# Bench


class InsufficientWindow(PollinateError):
    """Time series too short for the requested settle time and periods."""

    exit_code = 2

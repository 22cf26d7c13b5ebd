"""
Material estimation, Euler-Bernoulli oracles and vibration sweeps.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft, stats

from .config import BenchConfig, PipelineConfig, SimConfig
from .dersim import BoundaryConditions, RodNetwork, resolve_nodes, run, static_solve
from .errors import InsufficientWindow, PollinateError
from .models import ActuationProfile, MaterialParams, SweepKind, SweepResult, TimeSeries

logger = logging.getLogger(__name__)

# first root of 1 + cos(x)cosh(x) = 0
BETA1_L = 1.8751040687119611
SMALL_DEFLECTION_LIMIT = 0.1


def _positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


# Material parameters


def estimate_density(mass: float, radius: float, length: float) -> float:
    """ρ = m / (π r² L) for a cylindrical stem sample."""
    _positive(mass=mass, radius=radius, length=length)
    return mass / (math.pi * radius**2 * length)


def estimate_density_batch(samples) -> tuple[float, float]:
    """Mean and sample standard deviation of ρ over (mass, radius, length) samples."""
    densities = np.array([estimate_density(*sample) for sample in samples])
    if len(densities) == 0:
        raise ValueError("At least one sample is required")
    spread = float(np.std(densities, ddof=1)) if len(densities) > 1 else 0.0
    return float(np.mean(densities)), spread


def cantilever_frequency(young_modulus: float, density: float, radius: float, length: float) -> float:
    """First bending frequency (Hz) of a clamped-free solid circular rod."""
    _positive(young_modulus=young_modulus, density=density, radius=radius, length=length)
    area = MaterialParams.area(radius)
    inertia = MaterialParams.second_moment(radius)
    return float(
        BETA1_L**2 / (2 * math.pi) * math.sqrt(young_modulus * inertia / (density * area * length**4))
    )


def estimate_young_modulus(frequency: float, density: float, radius: float, length: float) -> float:
    """Invert cantilever_frequency for E."""
    _positive(frequency=frequency, density=density, radius=radius, length=length)
    area = MaterialParams.area(radius)
    inertia = MaterialParams.second_moment(radius)
    omega_ratio = 2 * math.pi * frequency / BETA1_L**2
    return float(omega_ratio**2 * density * area * length**4 / inertia)


def cantilever_static_deflection(
    young_modulus: float, radius: float, length: float, tip_force: float
) -> float:
    """δ = F L³ / (3 E I)."""
    _positive(young_modulus=young_modulus, radius=radius, length=length)
    if tip_force < 0:
        raise ValueError("tip_force must be non-negative")
    inertia = float(MaterialParams.second_moment(radius))
    deflection = tip_force * length**3 / (3 * young_modulus * inertia)
    if deflection / length > SMALL_DEFLECTION_LIMIT:
        logger.warning(
            f"Deflection {deflection:.3g} m is {deflection / length:.1%} of the length; "
            f"linear beam theory is unreliable here"
        )
    return deflection


def tip_mass_deflection(
    young_modulus: float, radius: float, length: float, mass: float, gravity: float = 9.81
) -> float:
    """Static deflection under a hanging tip mass."""
    return cantilever_static_deflection(young_modulus, radius, length, mass * gravity)


def cantilever_mode_shape(z, length: float) -> np.ndarray:
    """First clamped-free mode shape, normalized to 1 at the free end."""
    _positive(length=length)
    beta = BETA1_L / length

    def phi(s):
        sigma = (math.cosh(BETA1_L) + math.cos(BETA1_L)) / (math.sinh(BETA1_L) + math.sin(BETA1_L))
        bs = beta * np.asarray(s, dtype=float)
        return np.cosh(bs) - np.cos(bs) - sigma * (np.sinh(bs) - np.sin(bs))

    return phi(z) / phi(length)


def amplitude_profile(network: RodNetwork, nodes=None) -> np.ndarray:
    """Predicted first-mode amplitude of nodes relative to the farthest node."""
    arc = network.arc_lengths()
    nodes = range(network.node_count) if nodes is None else list(nodes)
    return cantilever_mode_shape(arc[list(nodes)], float(np.max(arc)))


# DER oracles


def clamped_length(network: RodNetwork, tip: int | None = None) -> float:
    """Free length seen by a root-clamped rod: midpoint of the first edge to the tip."""
    tip = network.flower_node() if tip is None else tip
    clamp = network.root_clamp()
    base = network.rest_positions[list(clamp)].mean(axis=0)
    return float(np.linalg.norm(network.rest_positions[tip] - base))


def der_tip_deflection(network: RodNetwork, force, tip: int | None = None) -> float:
    """Static DER tip displacement of a root-clamped network under a point force."""
    tip = network.flower_node() if tip is None else tip
    rest = network.rest_state()
    settled = static_solve(
        network,
        rest,
        BoundaryConditions.hold(rest, network.root_clamp()),
        external_loads={tip: np.asarray(force, dtype=float)},
    )
    return float(np.linalg.norm(settled.positions[tip] - rest.positions[tip]))


def dominant_frequency(signal, dt: float) -> float:
    """Peak of the Hann-windowed spectrum with parabolic interpolation (Hz)."""
    x = np.asarray(signal, dtype=float)
    x = x - np.mean(x)
    if len(x) < 4 or not np.any(x):
        return 0.0
    n_fft = fft.next_fast_len(8 * len(x))
    spectrum = np.abs(fft.rfft(x * np.hanning(len(x)), n_fft))
    k = int(np.argmax(spectrum[1:])) + 1
    offset = 0.0
    if k + 1 < len(spectrum) and np.all(spectrum[k - 1 : k + 2] > 0):
        a, b, c = np.log(spectrum[k - 1 : k + 2])
        denominator = a - 2 * b + c
        if denominator != 0:
            offset = 0.5 * (a - c) / denominator
    return float((k + offset) / (n_fft * dt))


def ringdown_frequency(
    network: RodNetwork,
    dt: float,
    duration: float,
    force,
    tip: int | None = None,
) -> float:
    """Free-vibration frequency after releasing a static tip load, without damping or gravity."""
    tip = network.flower_node() if tip is None else tip
    force = np.asarray(force, dtype=float)
    undamped = replace(network, material=replace(network.material, damping=0.0))
    rest = undamped.rest_state()
    loaded = static_solve(
        undamped,
        rest,
        BoundaryConditions.hold(rest, undamped.root_clamp()),
        external_loads={tip: force},
    )
    config = SimConfig(
        dt_s=dt, duration_s=duration, gravity_on=False, presettle=False, record=(tip,)
    )
    series = run(undamped, None, config, state=loaded)
    signal = series.trajectory(tip) @ (force / np.linalg.norm(force))
    frequency = dominant_frequency(signal, dt)
    logger.info(f"Ringdown frequency {frequency:.4f} Hz over {len(signal)} samples")
    return frequency


# Amplitudes


def flower_amplitude(
    series: TimeSeries, node: int, settle: float, period: float | None = None
) -> float:
    """Half peak-to-peak motion along the first principal axis after settling."""
    trajectory = series.trajectory(node)
    window = series.times >= series.times[0] + settle - 1e-12
    needed = 3 * period if period else 0.0
    if series.duration < settle + needed or np.count_nonzero(window) < 3:
        raise InsufficientWindow(
            f"Series of {series.duration:g} s is too short for {settle:g} s settling"
            + (f" plus 3 periods of {period:g} s" if period else "")
        )

    points = trajectory[window]
    centered = points - points.mean(axis=0)
    if not np.any(centered):
        return 0.0
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    projection = centered @ vt[0]
    return float(0.5 * (projection.max() - projection.min()))


# Sweeps


@dataclass(frozen=True, eq=False)
class SweepSpec:
    """One vibration experiment repeated over amplitudes or grasp nodes."""

    network: RodNetwork
    actuation: ActuationProfile
    kind: SweepKind
    values: tuple
    flower_node: int = -1
    settle_time: float | None = None
    measure_time: float | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    monotone_tol: float = 0.02
    clamp: tuple[int, ...] | None = None

    def __post_init__(self):
        period = self.actuation.period
        if self.settle_time is None:
            object.__setattr__(self, "settle_time", 5 * period)
        if self.measure_time is None:
            object.__setattr__(self, "measure_time", 10 * period)
        if self.settle_time < period - 1e-12:
            raise ValueError("settle time must cover at least one actuation period")
        if self.measure_time < 3 * period - 1e-12:
            raise ValueError("measure window must cover at least three actuation periods")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "flower_node", resolve_nodes(self.network, [self.flower_node])[0])

    @classmethod
    def from_config(
        cls,
        network: RodNetwork,
        config: PipelineConfig,
        kind: SweepKind,
        grasp_node: int,
        values=None,
    ) -> "SweepSpec":
        act = config.sim.actuation
        bench: BenchConfig = config.bench
        actuation = ActuationProfile(
            grasp_node=grasp_node,
            direction=np.asarray(act.direction, dtype=float),
            amplitude=act.amplitude_m,
            frequency=act.frequency_hz,
            guess_hops=act.guess_hops,
            guess_decay=act.guess_decay,
        )
        if values is None:
            values = bench.amplitudes_m if kind is SweepKind.AMPLITUDE else bench.grasp_nodes
        return cls(
            network=network,
            actuation=actuation,
            kind=kind,
            values=tuple(values),
            flower_node=-1,
            settle_time=bench.settle_periods * actuation.period,
            measure_time=bench.measure_periods * actuation.period,
            sim=config.sim,
            monotone_tol=bench.monotone_tol,
        )


def simulate_point(spec: SweepSpec, value) -> float:
    """Flower amplitude for one swept value."""
    if spec.kind is SweepKind.AMPLITUDE:
        actuation = replace(spec.actuation, amplitude=float(value))
    else:
        actuation = replace(spec.actuation, grasp_node=int(value))
    config = replace(
        spec.sim,
        duration_s=spec.settle_time + spec.measure_time,
        record=(spec.flower_node,),
        actuated=True,
    )
    series = run(spec.network, actuation, config, clamp=spec.clamp)
    return flower_amplitude(series, spec.flower_node, spec.settle_time, actuation.period)


def _run_points(spec: SweepSpec, workers: int) -> np.ndarray:
    amplitudes = []
    if workers > 1 and len(spec.values) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(simulate_point, spec, value) for value in spec.values]
            for index, future in enumerate(futures):
                try:
                    amplitudes.append(future.result())
                except PollinateError as e:
                    e.add_note(f"sweep point {index} ({spec.kind.value}={spec.values[index]})")
                    raise
    else:
        for index, value in enumerate(spec.values):
            try:
                amplitudes.append(simulate_point(spec, value))
            except PollinateError as e:
                e.add_note(f"sweep point {index} ({spec.kind.value}={value})")
                raise
            logger.info(f"Sweep point {index}: {spec.kind.value}={value} -> {amplitudes[-1]:.6g} m")
    return np.asarray(amplitudes, dtype=float)


def _fit(inputs: np.ndarray, amplitudes: np.ndarray):
    """(r, slope, intercept, degenerate) of a least-squares line."""
    if np.ptp(inputs) == 0:
        logger.warning("All swept inputs are equal; the linear fit is undefined")
        return float("nan"), float("nan"), float("nan"), True
    if np.ptp(amplitudes) == 0:
        logger.warning("All flower amplitudes are equal; correlation is undefined")
        return float("nan"), 0.0, float(amplitudes[0]), True
    fit = stats.linregress(inputs, amplitudes)
    return float(fit.rvalue), float(fit.slope), float(fit.intercept), False


def _monotone_decreasing(amplitudes: np.ndarray, tol: float) -> bool:
    return bool(np.all(amplitudes[1:] <= amplitudes[:-1] * (1.0 + tol)))


def amplitude_sweep(spec: SweepSpec, workers: int = 1) -> SweepResult:
    """Flower amplitude against actuation amplitude, with a linear fit."""
    if spec.kind is not SweepKind.AMPLITUDE:
        raise ValueError("amplitude_sweep needs an amplitude SweepSpec")
    if len(spec.values) < 3:
        raise ValueError("An amplitude sweep needs at least three points")
    if any(v < 0 for v in spec.values):
        raise ValueError("Actuation amplitudes must be non-negative")

    inputs = np.asarray(spec.values, dtype=float)
    amplitudes = _run_points(spec, workers)
    r, slope, intercept, degenerate = _fit(inputs, amplitudes)
    logger.info(f"Amplitude sweep: r={r:.4f}, slope={slope:.4g}, intercept={intercept:.3g} m")
    return SweepResult(
        kind=SweepKind.AMPLITUDE,
        inputs=inputs,
        amplitudes=amplitudes,
        pearson_r=r,
        slope=slope,
        intercept=intercept,
        monotone_decreasing=_monotone_decreasing(amplitudes, spec.monotone_tol),
        degenerate=degenerate,
        flower_node=spec.flower_node,
        grasp_nodes=(spec.actuation.grasp_node,),
    )


def grasp_location_sweep(spec: SweepSpec, workers: int = 1) -> SweepResult:
    """Flower amplitude against grasp position (arc distance from the root)."""
    if spec.kind is not SweepKind.GRASP_LOCATION:
        raise ValueError("grasp_location_sweep needs a grasp-location SweepSpec")
    if len(spec.values) < 3:
        raise ValueError("A grasp-location sweep needs at least three grasp nodes")

    nodes = tuple(int(v) for v in spec.values)
    clamp = spec.clamp if spec.clamp is not None else spec.network.root_clamp()
    for node in nodes:
        if not 0 <= node < spec.network.node_count:
            raise ValueError(f"Grasp node {node} is not in the rod network")
        if node in clamp:
            raise ValueError(f"Grasp node {node} is clamped")
    arc = spec.network.arc_lengths()
    inputs = arc[list(nodes)]
    if np.any(np.diff(inputs) < 0):
        raise ValueError("Grasp nodes must be ordered by arc distance from the root")

    amplitudes = _run_points(spec, workers)
    r, slope, intercept, degenerate = _fit(inputs, amplitudes)
    monotone = _monotone_decreasing(amplitudes, spec.monotone_tol)
    logger.info(f"Grasp-location sweep: monotone decreasing={monotone}, r={r:.4f}")
    return SweepResult(
        kind=SweepKind.GRASP_LOCATION,
        inputs=inputs,
        amplitudes=amplitudes,
        pearson_r=r,
        slope=slope,
        intercept=intercept,
        monotone_decreasing=monotone,
        degenerate=degenerate,
        flower_node=spec.flower_node,
        grasp_nodes=nodes,
    )


def run_sweep(spec: SweepSpec, workers: int = 1) -> SweepResult:
    if spec.kind is SweepKind.AMPLITUDE:
        return amplitude_sweep(spec, workers)
    return grasp_location_sweep(spec, workers)

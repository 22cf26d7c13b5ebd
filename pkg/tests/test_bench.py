"""
Tests for material estimation, beam-theory oracles and vibration sweeps.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from pollinate import bench
from pollinate.bench import (
    SweepSpec,
    amplitude_profile,
    amplitude_sweep,
    cantilever_frequency,
    cantilever_mode_shape,
    cantilever_static_deflection,
    clamped_length,
    der_tip_deflection,
    dominant_frequency,
    estimate_density,
    estimate_density_batch,
    estimate_young_modulus,
    flower_amplitude,
    grasp_location_sweep,
    ringdown_frequency,
    run_sweep,
    tip_mass_deflection,
)
from pollinate.config import PipelineConfig, SimConfig
from pollinate.errors import InsufficientWindow
from pollinate.models import ActuationProfile, MaterialParams, SweepKind, TimeSeries


def _sine_series(amplitude=0.003, frequency=5.0, duration=2.0, dt=1e-3, direction=(1.0, 1.0, 0.0)):
    times = np.arange(int(round(duration / dt)) + 1) * dt
    direction = np.asarray(direction) / np.linalg.norm(direction)
    offsets = amplitude * np.sin(2 * math.pi * frequency * times)[:, None] * direction
    positions = (np.array([0.1, 0.0, 0.3]) + offsets)[:, None, :]
    return TimeSeries(times, (9,), positions)


def _spec(network, kind=SweepKind.AMPLITUDE, values=(0.001, 0.002, 0.003), **changes):
    actuation = ActuationProfile(5, [0.0, 0.0, 1.0], 0.002, 5.0)
    sim = SimConfig(gravity_on=False, presettle=False)
    return SweepSpec(network, actuation, kind, values, sim=sim, **changes)


class TestMaterialEstimation:
    """Density and Young's modulus from measurements."""

    def test_density_of_cylinder(self):
        mass = math.pi * 0.01**2 * 1.0 * 900.0
        assert estimate_density(mass, 0.01, 1.0) == pytest.approx(900.0)

    def test_density_batch(self):
        base = math.pi * 0.005**2 * 0.1
        mean, spread = estimate_density_batch([(base * 800, 0.005, 0.1), (base * 1000, 0.005, 0.1)])
        assert mean == pytest.approx(900.0)
        assert spread == pytest.approx(math.sqrt(2) * 100.0)

    def test_single_sample_has_no_spread(self):
        _, spread = estimate_density_batch([(0.01, 0.005, 0.1)])
        assert spread == 0.0

    def test_density_rejects_bad_input(self):
        with pytest.raises(ValueError):
            estimate_density(0.01, 0.0, 0.1)
        with pytest.raises(ValueError):
            estimate_density_batch([])

    def test_young_modulus_inverts_frequency(self):
        frequency = cantilever_frequency(3.2e9, 750.0, 0.003, 0.25)
        assert estimate_young_modulus(frequency, 750.0, 0.003, 0.25) == pytest.approx(3.2e9, rel=1e-12)

    def test_frequency_formula(self):
        radius, length = 0.004, 0.2
        area = math.pi * radius**2
        inertia = math.pi * radius**4 / 4
        expected = 1.8751040687119611**2 / (2 * math.pi) * math.sqrt(5e9 * inertia / (900 * area * length**4))
        assert cantilever_frequency(5e9, 900.0, radius, length) == pytest.approx(expected)


class TestBeamTheory:
    """Euler-Bernoulli cantilever results."""

    def test_static_deflection(self):
        inertia = math.pi * 0.004**4 / 4
        expected = 0.5 * 0.3**3 / (3 * 5e9 * inertia)
        assert cantilever_static_deflection(5e9, 0.004, 0.3, 0.5) == pytest.approx(expected)

    def test_tip_mass_uses_weight(self):
        assert tip_mass_deflection(5e9, 0.004, 0.3, 0.1) == pytest.approx(
            cantilever_static_deflection(5e9, 0.004, 0.3, 0.981)
        )

    def test_negative_force_rejected(self):
        with pytest.raises(ValueError):
            cantilever_static_deflection(5e9, 0.004, 0.3, -1.0)

    def test_large_deflection_warns(self, caplog):
        cantilever_static_deflection(1e6, 0.001, 0.5, 1.0)
        assert "unreliable" in caplog.text

    def test_mode_shape_ends(self):
        shape = cantilever_mode_shape(np.linspace(0.0, 0.3, 31), 0.3)
        assert shape[0] == pytest.approx(0.0, abs=1e-12)
        assert shape[-1] == pytest.approx(1.0)
        assert np.all(np.diff(shape) > 0)

    def test_amplitude_profile(self, short_rod):
        profile = amplitude_profile(short_rod)
        assert profile[0] == pytest.approx(0.0, abs=1e-12)
        assert profile[-1] == pytest.approx(1.0)
        np.testing.assert_allclose(amplitude_profile(short_rod, [9]), [1.0])

    def test_clamped_length(self, short_rod):
        assert clamped_length(short_rod) == pytest.approx(0.2 - 0.2 / 18)

    def test_der_deflection_close_to_beam(self, short_rod):
        radius = 0.004
        length = clamped_length(short_rod)
        inertia = MaterialParams.second_moment(radius)
        force = 0.01 * length * 3 * 5e9 * inertia / length**3
        expected = cantilever_static_deflection(5e9, radius, length, force)
        simulated = der_tip_deflection(short_rod, (0.0, 0.0, -force))
        assert simulated == pytest.approx(expected, rel=0.1)

    @pytest.mark.slow
    def test_ringdown_close_to_first_mode(self, short_rod):
        radius = 0.004
        length = clamped_length(short_rod)
        expected = cantilever_frequency(5e9, 900.0, radius, length)
        force = 0.01 * length * 3 * 5e9 * MaterialParams.second_moment(radius) / length**3
        simulated = ringdown_frequency(short_rod, 1.0 / (64 * expected), 8.0 / expected, (0.0, 0.0, -force))
        assert simulated == pytest.approx(expected, rel=0.1)


class TestSignals:
    """Frequency and amplitude extraction."""

    def test_dominant_frequency_of_sine(self):
        dt = 1e-3
        t = np.arange(2000) * dt
        signal = 0.4 + np.sin(2 * math.pi * 7.3 * t)
        assert dominant_frequency(signal, dt) == pytest.approx(7.3, abs=0.05)

    def test_dominant_frequency_of_flat_signal(self):
        assert dominant_frequency(np.ones(100), 1e-3) == 0.0

    def test_flower_amplitude_along_principal_axis(self):
        series = _sine_series()
        assert flower_amplitude(series, 9, settle=0.5, period=0.2) == pytest.approx(0.003, rel=1e-9)

    def test_still_flower(self):
        series = _sine_series(amplitude=0.0)
        assert flower_amplitude(series, 9, settle=0.5) == 0.0

    def test_window_too_short(self):
        series = _sine_series(duration=0.5)
        with pytest.raises(InsufficientWindow):
            flower_amplitude(series, 9, settle=0.4, period=0.2)

    def test_unknown_node(self):
        with pytest.raises(KeyError):
            flower_amplitude(_sine_series(), 3, settle=0.5)


class TestSweepSpec:
    """Sweep set-up validation."""

    def test_default_windows(self, short_rod):
        spec = _spec(short_rod)
        assert spec.settle_time == pytest.approx(1.0)
        assert spec.measure_time == pytest.approx(2.0)
        assert spec.flower_node == 9

    def test_settle_must_cover_a_period(self, short_rod):
        with pytest.raises(ValueError, match="settle"):
            _spec(short_rod, settle_time=0.1)

    def test_measure_must_cover_three_periods(self, short_rod):
        with pytest.raises(ValueError, match="three"):
            _spec(short_rod, measure_time=0.5)

    def test_from_config(self, short_rod):
        config = PipelineConfig()
        spec = SweepSpec.from_config(short_rod, config, SweepKind.AMPLITUDE, grasp_node=5)
        assert spec.values == config.bench.amplitudes_m
        assert spec.actuation.grasp_node == 5
        assert spec.settle_time == pytest.approx(config.bench.settle_periods / config.sim.actuation.frequency_hz)


class TestSweeps:
    """Sweep bookkeeping with a stand-in for the simulator."""

    def test_amplitude_sweep_fit(self, short_rod, monkeypatch):
        monkeypatch.setattr(bench, "simulate_point", lambda spec, value: 2.0 * value + 0.001)
        result = amplitude_sweep(_spec(short_rod))
        assert result.kind is SweepKind.AMPLITUDE
        assert result.pearson_r == pytest.approx(1.0)
        assert result.slope == pytest.approx(2.0)
        assert result.intercept == pytest.approx(0.001)
        assert not result.degenerate
        assert not result.monotone_decreasing
        assert result.grasp_nodes == (5,)

    def test_constant_amplitudes_are_degenerate(self, short_rod, monkeypatch):
        monkeypatch.setattr(bench, "simulate_point", lambda spec, value: 0.004)
        result = amplitude_sweep(_spec(short_rod))
        assert result.degenerate
        assert math.isnan(result.pearson_r)
        assert result.slope == 0.0
        assert result.monotone_decreasing

    def test_amplitude_sweep_needs_three_points(self, short_rod):
        with pytest.raises(ValueError):
            amplitude_sweep(_spec(short_rod, values=(0.001, 0.002)))

    def test_negative_amplitude(self, short_rod):
        with pytest.raises(ValueError):
            amplitude_sweep(_spec(short_rod, values=(0.001, -0.002, 0.003)))

    def test_grasp_sweep_uses_arc_lengths(self, short_rod, monkeypatch):
        monkeypatch.setattr(bench, "simulate_point", lambda spec, value: 1.0 / value)
        result = run_sweep(_spec(short_rod, SweepKind.GRASP_LOCATION, (3, 5, 7)))
        np.testing.assert_allclose(result.inputs, np.array([3, 5, 7]) * 0.2 / 9)
        assert result.monotone_decreasing
        assert result.slope < 0
        assert result.grasp_nodes == (3, 5, 7)

    def test_monotone_tolerance(self, short_rod, monkeypatch):
        amplitudes = {3: 1.0, 5: 1.01, 7: 0.5}
        monkeypatch.setattr(bench, "simulate_point", lambda spec, value: amplitudes[value])
        spec = _spec(short_rod, SweepKind.GRASP_LOCATION, (3, 5, 7))
        assert grasp_location_sweep(spec).monotone_decreasing
        assert not grasp_location_sweep(replace(spec, monotone_tol=0.0)).monotone_decreasing

    def test_grasp_sweep_rejects_clamped_node(self, short_rod):
        with pytest.raises(ValueError, match="clamped"):
            grasp_location_sweep(_spec(short_rod, SweepKind.GRASP_LOCATION, (1, 5, 7)))

    def test_grasp_sweep_needs_arc_order(self, short_rod):
        with pytest.raises(ValueError, match="ordered"):
            grasp_location_sweep(_spec(short_rod, SweepKind.GRASP_LOCATION, (7, 5, 3)))

    def test_wrong_kind(self, short_rod):
        with pytest.raises(ValueError):
            grasp_location_sweep(_spec(short_rod))

    def test_failing_point_is_annotated(self, short_rod, monkeypatch):
        def fail_second(spec, value):
            if value == 0.002:
                raise InsufficientWindow("too short")
            return value

        monkeypatch.setattr(bench, "simulate_point", fail_second)
        with pytest.raises(InsufficientWindow) as excinfo:
            amplitude_sweep(_spec(short_rod))
        assert any("sweep point 1" in note for note in excinfo.value.__notes__)

    @pytest.mark.slow
    def test_flower_tracks_actuation_amplitude(self, short_rod):
        spec = _spec(short_rod, settle_time=0.2, measure_time=0.6)
        result = amplitude_sweep(spec)
        assert np.all(result.amplitudes > 0)
        assert result.pearson_r > 0.99

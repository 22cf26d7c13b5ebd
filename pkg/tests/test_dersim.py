"""
Tests for the branched discrete elastic rod model and its integrator.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pollinate import dersim
from pollinate.config import NewtonConfig, SimConfig
from pollinate.dersim import (
    BoundaryConditions,
    ElasticState,
    RodNetwork,
    adapt_frames,
    axial_strain,
    bend_force,
    bend_jacobian,
    curvature_binormal,
    elastic_energy,
    frames_at,
    mechanical_energy,
    parallel_transport,
    resolve_nodes,
    run,
    static_solve,
    step,
    stretch_force,
    stretch_jacobian,
)
from pollinate.errors import AntiparallelEdges, DegenerateSegment, EmptySkeleton, NewtonDivergence
from pollinate.models import ActuationProfile
from pollinate.synthetic import random_rod_network


def _perturbed(seed: int, scale: float = 0.001):
    network = random_rod_network(seed)
    rest = network.rest_state()
    q = rest.q + scale * np.random.default_rng(100 + seed).normal(size=rest.q.shape)
    state = ElasticState(q, np.zeros_like(q), rest.m1, rest.m2, rest.tangents)
    return network, adapt_frames(network, state)


def _force(network, state, q):
    return stretch_force(network, q) + bend_force(network, q, frames_at(network, state, q))


def _quiet(duration: float = 0.02, **changes) -> SimConfig:
    """No gravity, no presettle: only what the test prescribes moves the rod."""
    return replace(
        SimConfig(duration_s=duration, gravity_on=False, presettle=False), **changes
    )


class TestNetwork:
    """Rest geometry, springs and masses."""

    def test_dof_count_has_no_twist(self, short_rod):
        state = short_rod.rest_state()
        assert short_rod.dof_count == 3 * short_rod.node_count
        assert state.q.shape == (30,)
        assert state.m1.shape == (9, 3)

    def test_directors_are_orthonormal(self, short_rod):
        state = short_rod.rest_state()
        np.testing.assert_allclose(np.einsum("ij,ij->i", state.m1, state.tangents), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.einsum("ij,ij->i", state.m1, state.m2), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(state.m2, axis=1), 1.0)

    def test_total_mass(self, short_rod):
        expected = 900.0 * math.pi * 0.004**2 * 0.2
        assert short_rod.total_mass == pytest.approx(expected, rel=1e-12)

    def test_rest_state_is_unstressed(self):
        network = random_rod_network(2)
        rest = network.rest_state()
        assert elastic_energy(network, rest) == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(_force(network, rest, rest.q), 0.0, atol=1e-12)

    def test_bend_spring_per_edge_pair(self, y_skeleton):
        network = RodNetwork.from_skeleton(y_skeleton)
        degrees = dict(network.graph.degree())
        expected = sum(d * (d - 1) // 2 for d in degrees.values())
        assert len(network.bend_nodes) == expected
        assert degrees[1] == 3

    def test_from_skeleton_resampling(self, y_skeleton):
        network = RodNetwork.from_skeleton(y_skeleton, max_edge_len=0.02)
        assert network.node_count == 4 + 12 + 7 + 5
        assert np.max(network.rest_lengths) <= 0.02 + 1e-12
        for node in y_skeleton.nodes:
            np.testing.assert_allclose(network.rest_positions[node.id], node.position)
        assert network.root == y_skeleton.root
        assert network.flower_node() == 2

    def test_root_clamp_and_neighbourhoods(self, short_rod):
        assert short_rod.root_clamp() == (0, 1)
        assert short_rod.leaves() == [9]
        assert short_rod.nodes_within(5, 2) == {3: 2, 4: 1, 6: 1, 7: 2}
        assert short_rod.nodes_within(5, 0) == {}
        assert short_rod.nearest_node([0.0, 0.0, 0.0], exclude=(0, 1)) == 2

    def test_arc_lengths(self, short_rod):
        np.testing.assert_allclose(short_rod.arc_lengths(), np.linspace(0.0, 0.2, 10), atol=1e-15)

    def test_resolve_nodes(self, short_rod):
        assert resolve_nodes(short_rod, [-1, 3, -1]) == (9, 3)
        with pytest.raises(ValueError):
            resolve_nodes(short_rod, [10])

    def test_zero_length_edge(self):
        with pytest.raises(DegenerateSegment):
            RodNetwork.from_edges([[0, 0, 0], [0, 0, 1e-8]], [(0, 1)], [0.001])

    def test_non_positive_radius(self):
        with pytest.raises(DegenerateSegment):
            RodNetwork.from_edges([[0, 0, 0], [0, 0, 1]], [(0, 1)], [0.0])

    def test_disconnected(self):
        with pytest.raises(ValueError, match="connected"):
            RodNetwork.from_edges([[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 0, 1]], [(0, 1), (2, 3)], [0.001, 0.001])

    def test_no_edges(self):
        with pytest.raises(EmptySkeleton):
            RodNetwork.from_edges([[0, 0, 0]], np.zeros((0, 2)), [])


class TestGeometry:
    """Curvature binormals and frame transport."""

    def test_curvature_binormal_right_angle(self):
        np.testing.assert_allclose(curvature_binormal([1, 0, 0], [0, 1, 0]), [0.0, 0.0, 2.0])

    def test_curvature_binormal_straight(self):
        np.testing.assert_allclose(curvature_binormal([0, 0, 2], [0, 0, 1]), 0.0)

    def test_antiparallel_edges(self):
        with pytest.raises(AntiparallelEdges):
            curvature_binormal([1, 0, 0], [-1, 0, 0])

    def test_axial_strain(self):
        assert axial_strain([0, 0, 1.1], [0, 0, 1.0]) == pytest.approx(0.1)
        with pytest.raises(DegenerateSegment):
            axial_strain([0, 0, 1], [0, 0, 0])

    def test_parallel_transport(self):
        t0 = np.array([[0.0, 0.0, 1.0]])
        t1 = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(parallel_transport(t0, t0, t1), t1, atol=1e-15)
        # the rotation axis is fixed
        np.testing.assert_allclose(parallel_transport([[0.0, 1.0, 0.0]], t0, t1), [[0.0, 1.0, 0.0]], atol=1e-15)

    def test_transport_is_identity_for_equal_tangents(self):
        t = np.array([[0.0, 0.6, 0.8]])
        d = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(parallel_transport(d, t, t), d)


class TestDerivatives:
    """Analytic forces and Jacobians against finite differences."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_force_is_negative_energy_gradient(self, seed):
        network, state = _perturbed(seed)
        force = _force(network, state, state.q)
        h = 1e-6
        numeric = np.empty_like(force)
        for i in range(network.dof_count):
            dq = np.zeros_like(state.q)
            dq[i] = h
            numeric[i] = -(
                elastic_energy(network, state, state.q + dq) - elastic_energy(network, state, state.q - dq)
            ) / (2 * h)
        assert np.max(np.abs(force - numeric)) / np.max(np.abs(numeric)) < 1e-6

    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("scale", [0.001, 0.01])
    def test_jacobian_matches_force_differences(self, seed, scale):
        network, state = _perturbed(seed, scale)
        frames = (state.m1, state.m2)
        jacobian = (stretch_jacobian(network, state.q) + bend_jacobian(network, state.q, frames)).toarray()
        h = 1e-7
        numeric = np.empty_like(jacobian)
        for i in range(network.dof_count):
            dq = np.zeros_like(state.q)
            dq[i] = h
            plus = stretch_force(network, state.q + dq) + bend_force(network, state.q + dq, frames)
            minus = stretch_force(network, state.q - dq) + bend_force(network, state.q - dq, frames)
            numeric[:, i] = (plus - minus) / (2 * h)
        assert np.max(np.abs(jacobian - numeric)) / np.max(np.abs(numeric)) < 1e-5

    def test_bend_jacobian_alone_matches_differences(self):
        network, state = _perturbed(0, 0.01)
        frames = (state.m1, state.m2)
        jacobian = bend_jacobian(network, state.q, frames).toarray()
        h = 1e-7
        numeric = np.empty_like(jacobian)
        for i in range(network.dof_count):
            dq = np.zeros_like(state.q)
            dq[i] = h
            numeric[:, i] = (
                bend_force(network, state.q + dq, frames) - bend_force(network, state.q - dq, frames)
            ) / (2 * h)
        assert np.max(np.abs(jacobian - numeric)) / np.max(np.abs(numeric)) < 1e-5

    def test_jacobian_is_symmetric(self):
        network, state = _perturbed(4)
        jacobian = (
            stretch_jacobian(network, state.q) + bend_jacobian(network, state.q, (state.m1, state.m2))
        ).toarray()
        np.testing.assert_allclose(jacobian, jacobian.T, atol=1e-9 * np.max(np.abs(jacobian)))

    def test_rigid_motion_invariance(self):
        network, state = _perturbed(3)
        rotation = Rotation.from_rotvec([0.4, -0.3, 1.1]).as_matrix()
        shift = np.array([0.1, -0.2, 0.3])
        moved_q = (state.positions @ rotation.T + shift).reshape(-1)
        moved = ElasticState(
            moved_q,
            np.zeros_like(moved_q),
            state.m1 @ rotation.T,
            state.m2 @ rotation.T,
            state.tangents @ rotation.T,
        )
        energy = elastic_energy(network, state)
        assert elastic_energy(network, moved) == pytest.approx(energy, rel=1e-9)
        force = _force(network, state, state.q).reshape(-1, 3)
        moved_force = _force(network, moved, moved.q).reshape(-1, 3)
        np.testing.assert_allclose(moved_force, force @ rotation.T, atol=1e-9 * np.max(np.abs(force)))


class TestStatics:
    """Static equilibrium."""

    def test_gravity_sag(self, short_rod):
        rest = short_rod.rest_state()
        settled = static_solve(
            short_rod, rest, BoundaryConditions.hold(rest, short_rod.root_clamp()), gravity=(0, 0, -9.81)
        )
        assert settled.positions[9, 2] < 0
        np.testing.assert_array_equal(settled.positions[:2], rest.positions[:2])
        np.testing.assert_array_equal(settled.v, 0.0)

    def test_load_ramp_reaches_same_equilibrium(self, short_rod):
        rest = short_rod.rest_state()
        bc = BoundaryConditions.hold(rest, short_rod.root_clamp())
        loads = {9: np.array([0.0, 0.0, -0.5])}
        direct = static_solve(short_rod, rest, bc, external_loads=loads)
        ramped = static_solve(short_rod, rest, bc, external_loads=loads, load_steps=4)
        np.testing.assert_allclose(direct.q, ramped.q, atol=1e-9)

    def test_tip_load_equilibrium_has_small_residual(self, short_rod):
        rest = short_rod.rest_state()
        load = np.array([0.0, 0.0, -5.0])
        settled = static_solve(
            short_rod, rest, BoundaryConditions.hold(rest, short_rod.root_clamp()), external_loads={9: load}
        )
        residual = _force(short_rod, settled, settled.q).reshape(-1, 3)
        residual[9] += load
        assert np.max(np.abs(residual[2:])) < 1e-7
        assert settled.positions[9, 2] < -1e-3

    def test_branched_gravity_equilibrium(self):
        network = random_rod_network(0)
        rest = network.rest_state()
        gravity = np.array([0.0, 0.0, -9.81])
        clamp = network.root_clamp()
        settled = static_solve(network, rest, BoundaryConditions.hold(rest, clamp), gravity=gravity)
        residual = _force(network, settled, settled.q) + network.mass_vector * np.tile(gravity, network.node_count)
        free = np.setdiff1d(np.arange(network.node_count), clamp)
        assert np.max(np.abs(residual.reshape(-1, 3)[free])) < 1e-6

    def test_stall_at_roundoff_is_divergence(self, short_rod, monkeypatch):
        monkeypatch.setattr(dersim, "STEP_TOL", 1.0)
        rest = short_rod.rest_state()
        with pytest.raises(NewtonDivergence, match="round-off"):
            static_solve(
                short_rod,
                rest,
                BoundaryConditions.hold(rest, short_rod.root_clamp()),
                external_loads={9: np.array([0.0, 0.0, -50.0])},
            )


class TestDynamics:
    """Backward-Euler stepping and runs."""

    def test_rest_stays_at_rest(self, short_rod):
        rest = short_rod.rest_state()
        bc = BoundaryConditions.hold(rest, short_rod.root_clamp())
        after = step(short_rod, rest, bc, 1e-3)
        np.testing.assert_array_equal(after.q, rest.q)
        assert after.time == pytest.approx(1e-3)

    def test_step_needs_positive_dt(self, short_rod):
        rest = short_rod.rest_state()
        with pytest.raises(ValueError):
            step(short_rod, rest, BoundaryConditions.hold(rest, (0, 1)), 0.0)

    def test_grasp_cannot_be_clamped(self, short_rod):
        rest = short_rod.rest_state()
        actuation = ActuationProfile(1, [1, 0, 0], 0.001, 5.0)
        with pytest.raises(ValueError):
            BoundaryConditions.hold(rest, (0, 1), actuation)

    def test_run_records_initial_row(self, short_rod):
        series = run(short_rod, None, _quiet(0.01))
        assert len(series.times) == 11
        assert series.positions.shape == (11, 1, 3)
        assert series.node_ids == (9,)
        np.testing.assert_allclose(series.times, np.linspace(0.0, 0.01, 11), atol=1e-15)
        assert series.stats["steps"] == 10

    def test_grasp_follows_prescribed_motion(self, short_rod):
        actuation = ActuationProfile(5, [0, 0, 1], 0.002, 5.0)
        series = run(short_rod, actuation, _quiet(0.05, record=(5, 0, 1)))
        expected = np.array([actuation.displacement(t) for t in series.times])
        np.testing.assert_allclose(
            series.trajectory(5) - short_rod.rest_positions[5], expected, atol=1e-12
        )
        np.testing.assert_array_equal(series.trajectory(0), np.tile(short_rod.rest_positions[0], (51, 1)))
        np.testing.assert_array_equal(series.trajectory(1), np.tile(short_rod.rest_positions[1], (51, 1)))

    def test_actuation_moves_the_tip(self, short_rod):
        actuation = ActuationProfile(5, [0, 0, 1], 0.002, 5.0)
        series = run(short_rod, actuation, _quiet(0.05))
        assert np.max(np.abs(series.trajectory(9)[:, 2])) > 1e-4

    def test_zero_amplitude_equals_holding_the_grasp(self, short_rod):
        config = SimConfig(duration_s=0.02)
        idle = ActuationProfile(5, [1, 0, 0], 0.0, 5.0)
        actuated = run(short_rod, idle, config)
        held = run(short_rod, None, config, held=(5,))
        np.testing.assert_array_equal(actuated.positions, held.positions)
        assert actuated.stats["presettled"]

    def test_gravity_presettle_sags_before_first_step(self, short_rod):
        series = run(short_rod, None, SimConfig(duration_s=0.002))
        assert series.positions[0, 0, 2] < 0

    def test_damped_motion_dissipates_energy(self):
        network = random_rod_network(5)
        rest = network.rest_state()
        clamp = network.root_clamp()
        free = np.setdiff1d(np.arange(network.node_count), clamp)
        q = rest.q.copy().reshape(-1, 3)
        q[free] += 0.002 * np.random.default_rng(5).normal(size=(len(free), 3))
        state = adapt_frames(network, ElasticState(q.reshape(-1), rest.v, rest.m1, rest.m2, rest.tangents))
        bc = BoundaryConditions.hold(state, clamp)

        energy = initial = mechanical_energy(network, state)
        for _ in range(100):
            state = step(network, state, bc, 1e-3)
            current = mechanical_energy(network, state)
            assert (current - energy) / initial < 1e-9
            energy = current
        assert energy < initial

    def test_newton_divergence_carries_history(self, short_rod):
        actuation = ActuationProfile(5, [0, 0, 1], 0.002, 5.0)
        config = _quiet(0.01, newton=NewtonConfig(max_iter=0))
        with pytest.raises(NewtonDivergence) as excinfo:
            run(short_rod, actuation, config)
        error = excinfo.value
        assert error.exit_code == 5
        assert error.step_index == 1
        assert len(error.residuals) >= 1
        assert error.residuals[-1] > config.newton.tol

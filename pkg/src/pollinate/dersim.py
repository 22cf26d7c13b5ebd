"""
Branched discrete elastic rods.

The plant is a network of rod edges joined at nodes. Elasticity comes from one
stretch spring per edge and one bend spring per pair of edges sharing a node
(so joints couple every branch pair). Twist is not modelled: each edge carries
a reference frame {m1, m2} that serves as its material frame. Frames are held
fixed during each Newton solve and parallel transported onto the new edge
directions afterwards.

Dynamics use backward Euler with a Newton solve on the free degrees of freedom
and an analytic sparse Jacobian.
"""

import logging
from dataclasses import dataclass, replace
from functools import cached_property

import networkx as nx
import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .config import NewtonConfig, SimConfig
from .errors import AntiparallelEdges, DegenerateSegment, EmptySkeleton, NewtonDivergence
from .models import ActuationProfile, MaterialParams, SimplifiedSkeleton, TimeSeries

logger = logging.getLogger(__name__)

MIN_EDGE_LENGTH = 1e-6
ANTIPARALLEL_TOL = 1e-10
TRANSPORT_EPS = np.finfo(float).eps
MAX_HALVINGS = 12
# relative Newton increment treated as round-off
STEP_TOL = 1e-14
# residual above ROUNDOFF_FACTOR * tol at round-off is a divergence
ROUNDOFF_FACTOR = 100.0
MAX_FRAME_SWEEPS = 20
FRAME_TOL = 1e-10

_I3 = np.eye(3)


def _norm_rows(v: np.ndarray) -> np.ndarray:
    return np.linalg.norm(v, axis=-1)


def _dot_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("bi,bj->bij", a, b)


def _skew(v: np.ndarray) -> np.ndarray:
    """Batch of cross-product matrices [v]x."""
    z = np.zeros(len(v))
    return np.stack(
        [
            np.stack([z, -v[:, 2], v[:, 1]], axis=-1),
            np.stack([v[:, 2], z, -v[:, 0]], axis=-1),
            np.stack([-v[:, 1], v[:, 0], z], axis=-1),
        ],
        axis=1,
    )


# Frames


def initial_directors(tangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Directors from the coordinate axis least aligned with each tangent."""
    axes = _I3[np.argmin(np.abs(tangents), axis=1)]
    m1 = np.cross(tangents, axes)
    m1 /= _norm_rows(m1)[:, None]
    m2 = np.cross(tangents, m1)
    return m1, m2


def parallel_transport(d: np.ndarray, t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
    """Rotate vectors d by the minimal rotation taking unit t0 onto unit t1."""
    b = np.cross(t0, t1)
    nb = _norm_rows(b)
    out = np.array(d, dtype=float, copy=True)
    moving = nb > TRANSPORT_EPS
    if not np.any(moving):
        return out
    bh = b[moving] / nb[moving, None]
    n0 = np.cross(t0[moving], bh)
    n1 = np.cross(t1[moving], bh)
    dm = out[moving]
    out[moving] = (
        _dot_rows(dm, n0)[:, None] * n1
        + _dot_rows(dm, bh)[:, None] * bh
        + _dot_rows(dm, t0[moving])[:, None] * t1[moving]
    )
    return out


def transport_frames(
    m1: np.ndarray, t0: np.ndarray, t1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Transport m1 from t0 to t1 and rebuild an orthonormal pair."""
    moved = parallel_transport(m1, t0, t1)
    moved -= _dot_rows(moved, t1)[:, None] * t1
    moved /= _norm_rows(moved)[:, None]
    return moved, np.cross(t1, moved)


# Network and state


@dataclass(eq=False)
class ElasticState:
    """Positions, velocities and per-edge reference frames.

    q and v are stacked node coordinates (3N); there are no twist variables.
    tangents are the unit edge directions the frames belong to.
    """

    q: np.ndarray
    v: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    tangents: np.ndarray
    time: float = 0.0

    @property
    def positions(self) -> np.ndarray:
        return self.q.reshape(-1, 3)

    def copy(self) -> "ElasticState":
        return ElasticState(
            self.q.copy(),
            self.v.copy(),
            self.m1.copy(),
            self.m2.copy(),
            self.tangents.copy(),
            self.time,
        )


@dataclass(frozen=True, eq=False)
class RodNetwork:
    """Rest geometry, springs and lumped masses of a branched rod."""

    rest_positions: np.ndarray
    edges: np.ndarray
    radii: np.ndarray
    material: MaterialParams
    bend_nodes: np.ndarray
    bend_edges: np.ndarray
    rest_curvatures: np.ndarray
    root: int = 0

    @classmethod
    def from_edges(
        cls,
        positions,
        edges,
        radii,
        material: MaterialParams | None = None,
        root: int = 0,
    ) -> "RodNetwork":
        """Build springs and rest curvatures for an arbitrary connected edge set."""
        material = material or MaterialParams()
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        edges = np.asarray(edges, dtype=int).reshape(-1, 2)
        radii = np.asarray(radii, dtype=float).reshape(-1)
        if len(edges) == 0:
            raise EmptySkeleton("Rod network needs at least one edge")
        if len(radii) != len(edges):
            raise ValueError("one radius per edge is required")
        if np.any(radii <= 0):
            raise DegenerateSegment("Every rod edge needs a positive radius")

        lengths = _norm_rows(positions[edges[:, 1]] - positions[edges[:, 0]])
        short = np.flatnonzero(lengths < MIN_EDGE_LENGTH)
        if len(short):
            raise DegenerateSegment(
                f"Edge {int(short[0])} has rest length {lengths[short[0]]:.3e} m "
                f"(minimum {MIN_EDGE_LENGTH} m)"
            )

        graph = nx.Graph()
        graph.add_nodes_from(range(len(positions)))
        graph.add_edges_from(map(tuple, edges))
        if not nx.is_connected(graph):
            raise ValueError("Rod network must be connected")

        incident: list[list[int]] = [[] for _ in range(len(positions))]
        for k, (a, b) in enumerate(edges):
            incident[a].append(k)
            incident[b].append(k)

        bend_nodes, bend_edges = [], []
        for node, around in enumerate(incident):
            for i in range(len(around)):
                for j in range(i + 1, len(around)):
                    ei, ej = around[i], around[j]
                    a = edges[ei, 0] if edges[ei, 1] == node else edges[ei, 1]
                    b = edges[ej, 0] if edges[ej, 1] == node else edges[ej, 1]
                    bend_nodes.append((a, node, b))
                    bend_edges.append((ei, ej))

        network = cls(
            rest_positions=positions,
            edges=edges,
            radii=radii,
            material=material,
            bend_nodes=np.asarray(bend_nodes, dtype=int).reshape(-1, 3),
            bend_edges=np.asarray(bend_edges, dtype=int).reshape(-1, 2),
            rest_curvatures=np.zeros((len(bend_nodes), 2)),
            root=root,
        )
        rest = network.rest_state()
        kappa = _bend_curvatures(network, rest.q, (rest.m1, rest.m2))
        return replace(network, rest_curvatures=kappa)

    @classmethod
    def from_skeleton(
        cls,
        skel: SimplifiedSkeleton,
        material: MaterialParams | None = None,
        max_edge_len: float = 0.02,
    ) -> "RodNetwork":
        """Resample every segment polyline into edges no longer than max_edge_len.

        Skeleton node i becomes rod node i; interior nodes follow in segment
        order. Each edge takes the mean radius of its segment.
        """
        if max_edge_len <= 0:
            raise ValueError("max_edge_len must be positive")
        if not skel.segments:
            raise EmptySkeleton("Skeleton has no segments to turn into rods")

        positions = [np.asarray(n.position, dtype=float) for n in skel.nodes]
        edges, radii = [], []
        for segment in skel.segments:
            polyline = segment.polyline
            steps = _norm_rows(np.diff(polyline, axis=0))
            cumulative = np.concatenate([[0.0], np.cumsum(steps)])
            total = cumulative[-1]
            n_edges = max(1, int(np.ceil(total / max_edge_len - 1e-9)))

            chain = [segment.a]
            for k in range(1, n_edges):
                s = total * k / n_edges
                positions.append(
                    np.array([np.interp(s, cumulative, polyline[:, c]) for c in range(3)])
                )
                chain.append(len(positions) - 1)
            chain.append(segment.b)

            for a, b in zip(chain[:-1], chain[1:]):
                edges.append((a, b))
                radii.append(segment.mean_radius)

        network = cls.from_edges(np.vstack(positions), edges, radii, material, root=skel.root)
        logger.info(
            f"Rod network: {network.node_count} nodes, {len(network.edges)} edges, "
            f"{len(network.bend_nodes)} bend springs, mass {network.total_mass:.4g} kg"
        )
        return network

    @property
    def node_count(self) -> int:
        return len(self.rest_positions)

    @property
    def dof_count(self) -> int:
        return 3 * self.node_count

    @cached_property
    def rest_lengths(self) -> np.ndarray:
        return _norm_rows(
            self.rest_positions[self.edges[:, 1]] - self.rest_positions[self.edges[:, 0]]
        )

    @cached_property
    def masses(self) -> np.ndarray:
        """Lumped node masses: half of every adjacent edge's ρA‖ē‖."""
        edge_mass = self.material.density * self.material.area(self.radii) * self.rest_lengths
        masses = np.zeros(self.node_count)
        np.add.at(masses, self.edges[:, 0], 0.5 * edge_mass)
        np.add.at(masses, self.edges[:, 1], 0.5 * edge_mass)
        return masses

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    @cached_property
    def mass_vector(self) -> np.ndarray:
        return np.repeat(self.masses, 3)

    @cached_property
    def axial_stiffness(self) -> np.ndarray:
        return self.material.axial_stiffness(self.radii)

    @cached_property
    def bend_stiffness(self) -> np.ndarray:
        """Mean EI of the two edges of each bend spring."""
        ei = self.material.bending_stiffness(self.radii)
        return 0.5 * (ei[self.bend_edges[:, 0]] + ei[self.bend_edges[:, 1]])

    @cached_property
    def voronoi_lengths(self) -> np.ndarray:
        return 0.5 * (
            self.rest_lengths[self.bend_edges[:, 0]] + self.rest_lengths[self.bend_edges[:, 1]]
        )

    @cached_property
    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.node_count))
        g.add_edges_from(map(tuple, self.edges))
        return g

    def arc_lengths(self) -> np.ndarray:
        """Rest arc length from the root to every node."""
        g = nx.Graph()
        g.add_weighted_edges_from(
            (int(a), int(b), float(length)) for (a, b), length in zip(self.edges, self.rest_lengths)
        )
        distances = nx.single_source_dijkstra_path_length(g, self.root)
        return np.array([distances[n] for n in range(self.node_count)])

    def leaves(self) -> list[int]:
        return [n for n in sorted(self.graph.nodes) if self.graph.degree(n) == 1 and n != self.root]

    def flower_node(self) -> int:
        """Highest leaf in the rest shape (smallest id on ties)."""
        leaves = self.leaves() or [self.root]
        return max(leaves, key=lambda n: (self.rest_positions[n, 2], -n))

    def root_clamp(self) -> tuple[int, ...]:
        """Root node and its neighbours, which clamps position and orientation."""
        return tuple(sorted([self.root, *self.graph.neighbors(self.root)]))

    def nearest_node(self, point, exclude=()) -> int:
        """Rest-shape node closest to point, skipping exclude (smallest id on ties)."""
        distances = _norm_rows(self.rest_positions - np.asarray(point, dtype=float))
        distances[list(exclude)] = np.inf
        return int(np.argmin(distances))

    def nodes_within(self, node: int, hops: int) -> dict[int, int]:
        """Nodes at 1..hops graph hops from node, mapped to their hop count."""
        if hops <= 0:
            return {}
        distances = nx.single_source_shortest_path_length(self.graph, node, cutoff=hops)
        return {n: d for n, d in sorted(distances.items()) if d > 0}

    def rest_state(self) -> ElasticState:
        q = self.rest_positions.reshape(-1).copy()
        tangents = self.tangents(q)
        m1, m2 = initial_directors(tangents)
        return ElasticState(q, np.zeros_like(q), m1, m2, tangents)

    def tangents(self, q: np.ndarray) -> np.ndarray:
        x = q.reshape(-1, 3)
        e = x[self.edges[:, 1]] - x[self.edges[:, 0]]
        return e / _norm_rows(e)[:, None]


def frames_at(network: RodNetwork, state: ElasticState, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference frames of state transported onto the edge tangents of q."""
    return transport_frames(state.m1, state.tangents, network.tangents(q))


def adapt_frames(network: RodNetwork, state: ElasticState) -> ElasticState:
    """Copy of state whose frames are transported onto its own tangents."""
    tangents = network.tangents(state.q)
    m1, m2 = transport_frames(state.m1, state.tangents, tangents)
    return ElasticState(state.q.copy(), state.v.copy(), m1, m2, tangents, state.time)


# Assembly


def _node_dofs(nodes: np.ndarray) -> np.ndarray:
    return (3 * nodes[:, :, None] + np.arange(3)).reshape(len(nodes), -1)


def _assemble_vector(n_dof: int, dofs: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    out = np.zeros(n_dof)
    np.add.at(out, dofs.ravel(), blocks.ravel())
    return out


def _assemble_matrix(n_dof: int, dofs: np.ndarray, blocks: np.ndarray) -> sparse.csr_matrix:
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    return sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n_dof, n_dof)).tocsr()


# Stretching


def axial_strain(e, e_bar) -> float:
    """ε = ‖e‖/‖ē‖ − 1."""
    rest = np.linalg.norm(e_bar)
    if rest <= 0:
        raise DegenerateSegment("Rest edge has zero length")
    return float(np.linalg.norm(e) / rest - 1.0)


def _stretch_terms(network: RodNetwork, q: np.ndarray, hessian: bool):
    x = q.reshape(-1, 3)
    e = x[network.edges[:, 1]] - x[network.edges[:, 0]]
    length = _norm_rows(e)
    t = e / length[:, None]
    rest = network.rest_lengths
    ea = network.axial_stiffness
    strain = length / rest - 1.0

    energy = 0.5 * ea * strain**2 * rest
    g = (ea * strain)[:, None] * t
    grad = np.concatenate([-g, g], axis=1)
    if not hessian:
        return energy, grad, None

    block = ea[:, None, None] * (
        (1.0 / rest - 1.0 / length)[:, None, None] * _I3 + (1.0 / length)[:, None, None] * _outer(t, t)
    )
    hess = np.zeros((len(e), 6, 6))
    hess[:, :3, :3] = block
    hess[:, 3:, 3:] = block
    hess[:, :3, 3:] = -block
    hess[:, 3:, :3] = -block
    return energy, grad, hess


def stretch_energy(network: RodNetwork, q: np.ndarray) -> float:
    energy, _, _ = _stretch_terms(network, q, hessian=False)
    return float(np.sum(energy))


def stretch_force(network: RodNetwork, q: np.ndarray) -> np.ndarray:
    _, grad, _ = _stretch_terms(network, q, hessian=False)
    return -_assemble_vector(network.dof_count, _node_dofs(network.edges), grad)


def stretch_jacobian(network: RodNetwork, q: np.ndarray) -> sparse.csr_matrix:
    """∂F_stretch/∂q (the negative energy Hessian)."""
    _, _, hess = _stretch_terms(network, q, hessian=True)
    return -_assemble_matrix(network.dof_count, _node_dofs(network.edges), hess)


# Bending


def curvature_binormal(e_i, e_j) -> np.ndarray:
    """(κb) = 2 eᵢ×eⱼ / (‖eᵢ‖‖eⱼ‖ + eᵢ·eⱼ)."""
    e_i = np.asarray(e_i, dtype=float)
    e_j = np.asarray(e_j, dtype=float)
    scale = np.linalg.norm(e_i) * np.linalg.norm(e_j)
    denominator = scale + e_i @ e_j
    if denominator <= ANTIPARALLEL_TOL * scale:
        raise AntiparallelEdges("Adjacent edges are antiparallel")
    return 2.0 * np.cross(e_i, e_j) / denominator


def material_curvatures(kb, m1_i, m2_i, m1_j, m2_j) -> tuple[float, float]:
    """Curvatures along the averaged material directors of both edges."""
    kb = np.asarray(kb, dtype=float)
    kappa1 = 0.5 * float(kb @ (np.asarray(m2_i) + np.asarray(m2_j)))
    kappa2 = -0.5 * float(kb @ (np.asarray(m1_i) + np.asarray(m1_j)))
    return kappa1, kappa2


def _bend_geometry(network: RodNetwork, q: np.ndarray, frames):
    x = q.reshape(-1, 3)
    n0, n1, n2 = network.bend_nodes.T
    e = x[n1] - x[n0]
    f = x[n2] - x[n1]
    ne = _norm_rows(e)
    nf = _norm_rows(f)
    denominator = ne * nf + _dot_rows(e, f)
    folded = np.flatnonzero(denominator <= ANTIPARALLEL_TOL * ne * nf)
    if len(folded):
        raise AntiparallelEdges(f"Bend spring {int(folded[0])} has antiparallel edges")
    kb = 2.0 * np.cross(e, f) / denominator[:, None]

    m1, m2 = frames
    ei, ej = network.bend_edges.T
    return e, f, ne, nf, kb, m1[ei], m2[ei], m1[ej], m2[ej]


def _bend_curvatures(network: RodNetwork, q: np.ndarray, frames) -> np.ndarray:
    if len(network.bend_nodes) == 0:
        return np.zeros((0, 2))
    _, _, _, _, kb, m1e, m2e, m1f, m2f = _bend_geometry(network, q, frames)
    kappa1 = 0.5 * _dot_rows(kb, m2e + m2f)
    kappa2 = -0.5 * _dot_rows(kb, m1e + m1f)
    return np.column_stack([kappa1, kappa2])


def _chain_gradient(d_de: np.ndarray, d_df: np.ndarray) -> np.ndarray:
    return np.concatenate([-d_de, d_de - d_df, d_df], axis=1)


def _chain_hessian(dde: np.ndarray, ddf: np.ndarray, dedf: np.ndarray) -> np.ndarray:
    dfde = np.transpose(dedf, (0, 2, 1))
    h = np.zeros((len(dde), 9, 9))
    h[:, 0:3, 0:3] = dde
    h[:, 0:3, 3:6] = -dde + dedf
    h[:, 0:3, 6:9] = -dedf
    h[:, 3:6, 0:3] = -dde + dfde
    h[:, 3:6, 3:6] = dde - dedf - dfde + ddf
    h[:, 3:6, 6:9] = dedf - ddf
    h[:, 6:9, 0:3] = -dfde
    h[:, 6:9, 3:6] = dfde - ddf
    h[:, 6:9, 6:9] = ddf
    return h


def _curvature_terms(e, f, ne, nf, director, hessian: bool):
    """κ = 2 (e×f)·D / (‖e‖‖f‖ + e·f) for a fixed director D.

    Returns κ, ∂κ/∂e, ∂κ/∂f and, when asked, the blocks ∂²κ/∂e², ∂²κ/∂f²
    and ∂²κ/∂e∂f.
    """
    denominator = ne * nf + _dot_rows(e, f)
    te = e / ne[:, None]
    tf = f / nf[:, None]
    kappa = 2.0 * _dot_rows(np.cross(e, f), director) / denominator
    # gradients of the denominator
    p_e = nf[:, None] * te + f
    p_f = ne[:, None] * tf + e
    g_e = (2.0 * np.cross(f, director) - kappa[:, None] * p_e) / denominator[:, None]
    g_f = (2.0 * np.cross(director, e) - kappa[:, None] * p_f) / denominator[:, None]
    if not hessian:
        return kappa, g_e, g_f, None

    inv = (1.0 / denominator)[:, None, None]
    k = kappa[:, None, None]
    h_ee = -inv * (
        _outer(p_e, g_e) + _outer(g_e, p_e) + k * (nf / ne)[:, None, None] * (_I3 - _outer(te, te))
    )
    h_ff = -inv * (
        _outer(p_f, g_f) + _outer(g_f, p_f) + k * (ne / nf)[:, None, None] * (_I3 - _outer(tf, tf))
    )
    h_ef = -inv * (
        2.0 * _skew(director) + _outer(p_e, g_f) + _outer(g_e, p_f) + k * (_I3 + _outer(te, tf))
    )
    return kappa, g_e, g_f, (h_ee, h_ff, h_ef)


def _bend_terms(network: RodNetwork, q: np.ndarray, frames, hessian: bool):
    """Bend energies, gradients and Hessians with the frames held fixed."""
    e, f, ne, nf, _, m1e, m2e, m1f, m2f = _bend_geometry(network, q, frames)
    kappa1, g1e, g1f, h1 = _curvature_terms(e, f, ne, nf, 0.5 * (m2e + m2f), hessian)
    kappa2, g2e, g2f, h2 = _curvature_terms(e, f, ne, nf, -0.5 * (m1e + m1f), hessian)
    grad1 = _chain_gradient(g1e, g1f)
    grad2 = _chain_gradient(g2e, g2f)

    stiffness = network.bend_stiffness / network.voronoi_lengths
    delta1 = kappa1 - network.rest_curvatures[:, 0]
    delta2 = kappa2 - network.rest_curvatures[:, 1]
    energy = 0.5 * stiffness * (delta1**2 + delta2**2)
    grad = stiffness[:, None] * (delta1[:, None] * grad1 + delta2[:, None] * grad2)
    if not hessian:
        return energy, grad, None

    hess = stiffness[:, None, None] * (
        _outer(grad1, grad1)
        + _outer(grad2, grad2)
        + delta1[:, None, None] * _chain_hessian(*h1)
        + delta2[:, None, None] * _chain_hessian(*h2)
    )
    return energy, grad, hess


def bend_energy(network: RodNetwork, q: np.ndarray, frames) -> float:
    if len(network.bend_nodes) == 0:
        return 0.0
    energy, _, _ = _bend_terms(network, q, frames, hessian=False)
    return float(np.sum(energy))


def bend_force(network: RodNetwork, q: np.ndarray, frames) -> np.ndarray:
    if len(network.bend_nodes) == 0:
        return np.zeros(network.dof_count)
    _, grad, _ = _bend_terms(network, q, frames, hessian=False)
    return -_assemble_vector(network.dof_count, _node_dofs(network.bend_nodes), grad)


def bend_jacobian(network: RodNetwork, q: np.ndarray, frames) -> sparse.csr_matrix:
    """∂F_bend/∂q with frames held at their transported values."""
    if len(network.bend_nodes) == 0:
        return sparse.csr_matrix((network.dof_count, network.dof_count))
    _, _, hess = _bend_terms(network, q, frames, hessian=True)
    return -_assemble_matrix(network.dof_count, _node_dofs(network.bend_nodes), hess)


def elastic_energy(network: RodNetwork, state: ElasticState, q: np.ndarray | None = None) -> float:
    """Stretch plus bend energy at q (default: the state's own positions)."""
    q = state.q if q is None else q
    return stretch_energy(network, q) + bend_energy(network, q, frames_at(network, state, q))


def mechanical_energy(network: RodNetwork, state: ElasticState) -> float:
    """Kinetic plus elastic energy."""
    kinetic = 0.5 * float(np.sum(network.mass_vector * state.v**2))
    return kinetic + elastic_energy(network, state)


def _elastic_system(network: RodNetwork, q: np.ndarray, frames):
    """Elastic force and its Jacobian in one pass."""
    n = network.dof_count
    _, s_grad, s_hess = _stretch_terms(network, q, hessian=True)
    edge_dofs = _node_dofs(network.edges)
    force = -_assemble_vector(n, edge_dofs, s_grad)
    hessian = _assemble_matrix(n, edge_dofs, s_hess)
    if len(network.bend_nodes):
        _, b_grad, b_hess = _bend_terms(network, q, frames, hessian=True)
        bend_dofs = _node_dofs(network.bend_nodes)
        force -= _assemble_vector(n, bend_dofs, b_grad)
        hessian = hessian + _assemble_matrix(n, bend_dofs, b_hess)
    return force, hessian


# Boundary conditions


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    """Clamped nodes held at fixed positions plus an optional actuated grasp node.

    The grasp node follows anchor + A·sin(2πf(t − start_time))·direction.
    """

    clamped: tuple[int, ...]
    clamp_positions: np.ndarray
    actuation: ActuationProfile | None = None
    anchor: np.ndarray | None = None
    start_time: float = 0.0

    def __post_init__(self):
        if self.actuation is not None:
            if self.actuation.grasp_node in self.clamped:
                raise ValueError(f"Grasp node {self.actuation.grasp_node} is also clamped")
            if self.anchor is None:
                raise ValueError("An actuated grasp node needs an anchor position")

    @classmethod
    def hold(
        cls,
        state: ElasticState,
        nodes,
        actuation: ActuationProfile | None = None,
    ) -> "BoundaryConditions":
        """Clamp nodes where they are now; anchor the grasp node at its current position."""
        nodes = tuple(sorted(set(int(n) for n in nodes)))
        positions = state.positions[list(nodes)].copy() if nodes else np.zeros((0, 3))
        anchor = None
        if actuation is not None:
            anchor = state.positions[actuation.grasp_node].copy()
        return cls(nodes, positions, actuation, anchor, state.time)

    @property
    def nodes(self) -> np.ndarray:
        nodes = list(self.clamped)
        if self.actuation is not None:
            nodes.append(self.actuation.grasp_node)
        return np.asarray(sorted(nodes), dtype=int)

    def targets(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Constrained nodes (sorted) and their prescribed positions at time t."""
        positions = dict(zip(self.clamped, self.clamp_positions))
        if self.actuation is not None:
            offset = self.actuation.displacement(t - self.start_time)
            positions[self.actuation.grasp_node] = self.anchor + offset
        nodes = self.nodes
        return nodes, np.asarray([positions[int(n)] for n in nodes]).reshape(-1, 3)


def _free_dofs(network: RodNetwork, constrained: np.ndarray) -> np.ndarray:
    mask = np.ones(network.dof_count, dtype=bool)
    if len(constrained):
        mask[_node_dofs(constrained[:, None]).ravel()] = False
    return np.flatnonzero(mask)


def _gravity_force(network: RodNetwork, gravity) -> np.ndarray:
    if gravity is None:
        return np.zeros(network.dof_count)
    return network.mass_vector * np.tile(np.asarray(gravity, dtype=float), network.node_count)


def _load_vector(network: RodNetwork, loads: dict[int, np.ndarray] | None) -> np.ndarray:
    out = np.zeros(network.dof_count)
    for node, force in (loads or {}).items():
        out[3 * node : 3 * node + 3] += np.asarray(force, dtype=float)
    return out


# Newton


def _newton(system, q: np.ndarray, free: np.ndarray, newton: NewtonConfig, step_index=None):
    """Solve residual(q)[free] = 0 with halving line search.

    system(q) returns (residual, jacobian) over all DOFs.
    """
    residual, jacobian = system(q)
    norm = float(np.max(np.abs(residual[free]))) if len(free) else 0.0
    history = [norm]
    iterations = 0

    while norm > newton.tol:
        if iterations >= newton.max_iter:
            raise NewtonDivergence(
                f"Newton did not reach {newton.tol:g} in {newton.max_iter} iterations "
                f"(residual {norm:.3e})",
                residuals=history,
                step_index=step_index,
            )
        iterations += 1
        reduced = jacobian[free][:, free].tocsc()
        dq = spsolve(reduced, residual[free])
        if not np.all(np.isfinite(dq)):
            raise NewtonDivergence(
                "Singular Newton system", residuals=history, step_index=step_index
            )

        scale = 1.0
        accepted = None
        for _ in range(MAX_HALVINGS):
            trial = q.copy()
            trial[free] -= scale * dq
            try:
                trial_residual, trial_jacobian = system(trial)
            except AntiparallelEdges:
                scale *= 0.5
                continue
            trial_norm = float(np.max(np.abs(trial_residual[free])))
            accepted = (trial, trial_residual, trial_jacobian, trial_norm)
            if trial_norm <= norm:
                break
            scale *= 0.5
        if accepted is None:
            raise NewtonDivergence(
                "Line search folded the rod onto itself", residuals=history, step_index=step_index
            )

        q, residual, jacobian, norm = accepted
        history.append(norm)
        if scale * np.max(np.abs(dq)) <= STEP_TOL * max(1.0, float(np.max(np.abs(q)))):
            if norm > ROUNDOFF_FACTOR * newton.tol:
                raise NewtonDivergence(
                    f"Newton stalled at round-off with residual {norm:.3e}",
                    residuals=history,
                    step_index=step_index,
                )
            logger.debug(f"Newton stopped at round-off with residual {norm:.3e}")
            break

    return q, iterations, history


def _finish(network, state, q, v, time) -> ElasticState:
    tangents = network.tangents(q)
    m1, m2 = transport_frames(state.m1, state.tangents, tangents)
    return ElasticState(q, v, m1, m2, tangents, time)


def static_solve(
    network: RodNetwork,
    state: ElasticState,
    bc: BoundaryConditions,
    gravity=None,
    external_loads: dict[int, np.ndarray] | None = None,
    newton: NewtonConfig | None = None,
    load_steps: int = 1,
) -> ElasticState:
    """Static equilibrium F_elastic + F_gravity + F_loads = 0 on the free DOFs.

    With load_steps > 1 the loads are ramped up in equal increments, each
    solve starting from the previous equilibrium.
    """
    newton = newton or NewtonConfig()
    nodes, targets = bc.targets(state.time)
    q = state.q.copy()
    if len(nodes):
        q[_node_dofs(nodes[:, None]).ravel()] = targets.ravel()
    free = _free_dofs(network, nodes)
    base_load = _gravity_force(network, gravity) + _load_vector(network, external_loads)

    current = _finish(network, state, q, np.zeros_like(q), state.time)
    iterations = 0
    for k in range(1, load_steps + 1):
        load = base_load * (k / load_steps)
        # frames are re-transported between solves until a solve starts converged
        for _ in range(MAX_FRAME_SWEEPS):
            frames = (current.m1, current.m2)

            def system(trial, load=load, frames=frames):
                force, hessian = _elastic_system(network, trial, frames)
                return -(force + load), hessian

            q, used, _ = _newton(system, current.q, free, newton)
            iterations += used
            previous = current.tangents
            current = _finish(network, current, q, np.zeros_like(q), state.time)
            if used == 0 or np.max(np.abs(current.tangents - previous)) <= FRAME_TOL:
                break
        else:
            raise NewtonDivergence(
                f"Frames still moving after {MAX_FRAME_SWEEPS} static solves",
                residuals=[],
            )

    logger.info(f"Static solve converged in {iterations} Newton iterations")
    return current


def _step(
    network: RodNetwork,
    state: ElasticState,
    bc: BoundaryConditions,
    dt: float,
    gravity=None,
    external_loads=None,
    newton: NewtonConfig | None = None,
    step_index: int | None = None,
):
    if dt <= 0:
        raise ValueError("dt must be positive")
    newton = newton or NewtonConfig()
    t_new = state.time + dt
    mass = network.mass_vector
    damping = network.material.damping
    q_old, v_old = state.q, state.v

    nodes, targets = bc.targets(t_new)
    constrained = _node_dofs(nodes[:, None]).ravel() if len(nodes) else np.zeros(0, dtype=int)
    free = _free_dofs(network, nodes)

    q = q_old + dt * v_old
    q[constrained] = targets.ravel()
    actuation = bc.actuation
    if actuation is not None and actuation.guess_hops > 0:
        g = actuation.grasp_node
        increment = q[3 * g : 3 * g + 3] - q_old[3 * g : 3 * g + 3]
        if np.any(increment):
            for node, hops in network.nodes_within(g, actuation.guess_hops).items():
                if node in nodes:
                    continue
                q[3 * node : 3 * node + 3] += actuation.guess_decay**hops * increment

    external = _gravity_force(network, gravity) + _load_vector(network, external_loads)
    inertia_diag = mass / dt**2 + damping * mass / dt
    inertia = sparse.diags(inertia_diag, format="csr")

    frames = frames_at(network, state, q)

    def system(trial):
        force, hessian = _elastic_system(network, trial, frames)
        residual = (
            mass / dt**2 * (trial - q_old - dt * v_old)
            + damping * mass * (trial - q_old) / dt
            - force
            - external
        )
        return residual, inertia + hessian

    q, iterations, history = _newton(system, q, free, newton, step_index)
    new_state = _finish(network, state, q, (q - q_old) / dt, t_new)
    return new_state, iterations, history[-1]


def step(
    network: RodNetwork,
    state: ElasticState,
    bc: BoundaryConditions,
    dt: float,
    gravity=None,
    external_loads: dict[int, np.ndarray] | None = None,
    newton: NewtonConfig | None = None,
) -> ElasticState:
    """One backward-Euler step with mass-proportional damping.

    Constrained nodes are placed at their prescribed positions and removed
    from the solve. Nodes near an actuated grasp node start Newton from a
    decayed copy of its displacement increment.
    """
    new_state, _, _ = _step(network, state, bc, dt, gravity, external_loads, newton)
    return new_state


@dataclass
class _RunStats:
    steps: int = 0
    newton_iterations: int = 0
    max_newton_iterations: int = 0
    max_residual: float = 0.0
    presettle: bool = False

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "newton_iterations": self.newton_iterations,
            "max_newton_iterations": self.max_newton_iterations,
            "max_final_residual": self.max_residual,
            "presettled": self.presettle,
        }


def resolve_nodes(network: RodNetwork, nodes) -> tuple[int, ...]:
    """Map -1 to the flower node and validate node ids."""
    resolved = []
    for node in nodes:
        node = network.flower_node() if int(node) == -1 else int(node)
        if not 0 <= node < network.node_count:
            raise ValueError(f"Node {node} is not in the rod network")
        if node not in resolved:
            resolved.append(node)
    return tuple(resolved)


def run(
    network: RodNetwork,
    actuation: ActuationProfile | None,
    config: SimConfig | None = None,
    state: ElasticState | None = None,
    clamp=None,
    held=(),
    external_loads: dict[int, np.ndarray] | None = None,
) -> TimeSeries:
    """Integrate for config.duration_s and record the requested nodes.

    The root clamp is used unless clamp is given; held nodes are fixed where
    they are when actuation starts. With gravity and presettle enabled the
    network is first brought to static equilibrium under the clamp alone.
    The series starts with the initial snapshot.
    """
    config = config or SimConfig()
    gravity = np.asarray(config.gravity, dtype=float) if config.gravity_on else None
    state = state.copy() if state is not None else network.rest_state()
    clamp = network.root_clamp() if clamp is None else tuple(clamp)
    stats = _RunStats()

    if config.presettle and (gravity is not None or external_loads):
        state = static_solve(
            network,
            state,
            BoundaryConditions.hold(state, clamp),
            gravity,
            external_loads,
            config.newton,
        )
        stats.presettle = True

    bc = BoundaryConditions.hold(state, (*clamp, *held), actuation)
    record = resolve_nodes(network, config.record)
    n_steps = int(round(config.duration_s / config.dt_s))

    times = np.empty(n_steps + 1)
    positions = np.empty((n_steps + 1, len(record), 3))
    times[0] = state.time
    positions[0] = state.positions[list(record)]

    for k in range(1, n_steps + 1):
        state, iterations, residual = _step(
            network, state, bc, config.dt_s, gravity, external_loads, config.newton, step_index=k
        )
        times[k] = state.time
        positions[k] = state.positions[list(record)]
        stats.steps = k
        stats.newton_iterations += iterations
        stats.max_newton_iterations = max(stats.max_newton_iterations, iterations)
        stats.max_residual = max(stats.max_residual, residual)

    logger.info(
        f"Simulated {n_steps} steps of {config.dt_s:g} s: "
        f"{stats.newton_iterations} Newton iterations (max {stats.max_newton_iterations}/step)"
    )
    return TimeSeries(times, record, positions, stats.as_dict())

"""
Topological skeletonization of the voxelized plant.

occupancy -> EDT -> Lee thinning -> KNN candidate graph -> MST -> junction /
endpoint tree with radius annotations.
"""

import logging

import networkx as nx
import numpy as np
from networkx.utils import UnionFind
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from .config import FusionConfig, SkeletonConfig
from .errors import EmptySkeleton
from .fusion import fill_volume, voxelize
from .models import (
    DistanceField,
    PointCloud,
    Segment,
    SimplifiedSkeleton,
    SkeletonGraph,
    SkeletonNode,
    VoxelGrid,
)

logger = logging.getLogger(__name__)


def edt(grid: VoxelGrid) -> DistanceField:
    """Exact Euclidean distance (voxels) from occupied voxels to free space."""
    values = ndimage.distance_transform_edt(grid.occupancy)
    return DistanceField(grid, np.asarray(values, dtype=float))


def thin(grid: VoxelGrid) -> VoxelGrid:
    """One-voxel-thick skeleton by Lee's 3-D medial-axis thinning.

    Simple points are peeled from the boundary while endpoints (voxels with a
    single 26-neighbour) are kept, so topology and branch tips survive.
    """
    if not grid.occupancy.any():
        return grid
    skeleton = skeletonize(grid.occupancy, method="lee") > 0
    return grid.with_occupancy(skeleton & grid.occupancy)


def edge_weight(distance, r_i, r_j, dz, epsilon=0.5, beta=1.0, gamma=1.0):
    """Candidate-edge cost favouring thick, vertical connections.

    w = d / [(min(r_i, r_j) + ε)^β · (1 + γ·|Δz|/d)], all lengths in voxels.
    """
    distance = np.asarray(distance, dtype=float)
    thickness = (np.minimum(r_i, r_j) + epsilon) ** beta
    verticality = 1.0 + gamma * np.abs(dz) / distance
    return distance / (thickness * verticality)


def build_graph(
    skel: VoxelGrid,
    dist: DistanceField,
    k: int = 6,
    epsilon: float = 0.5,
    beta: float = 1.0,
    gamma: float = 1.0,
) -> SkeletonGraph:
    """Union of k-nearest-neighbour edges over the skeleton voxels."""
    if k < 2:
        raise ValueError("k must be at least 2")
    indices = skel.occupied_indices()
    if len(indices) == 0:
        raise EmptySkeleton("Skeleton grid has no voxels")

    coords = indices.astype(float)
    positions = skel.centers(indices)
    edt_values = dist.at(indices)
    radii = edt_values * skel.resolution

    if len(indices) == 1:
        edges = np.zeros((0, 2), dtype=int)
    else:
        neighbours = min(k + 1, len(indices))
        _, nn = cKDTree(coords).query(coords, k=neighbours)
        rows = np.repeat(np.arange(len(indices)), neighbours - 1)
        cols = nn[:, 1:].reshape(-1)
        pairs = np.column_stack([np.minimum(rows, cols), np.maximum(rows, cols)])
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        edges = np.unique(pairs, axis=0)

    if len(edges):
        delta = coords[edges[:, 1]] - coords[edges[:, 0]]
        distance = np.linalg.norm(delta, axis=1)
        weights = edge_weight(
            distance,
            edt_values[edges[:, 0]],
            edt_values[edges[:, 1]],
            delta[:, 2],
            epsilon,
            beta,
            gamma,
        )
    else:
        weights = np.zeros(0)

    logger.info(f"Candidate graph: {len(indices)} vertices, {len(edges)} edges (k={k})")
    return SkeletonGraph(indices, positions, radii, edt_values, edges, weights, skel.resolution)


def _subgraph(graph: SkeletonGraph, keep: np.ndarray, edges: np.ndarray, weights, components=1):
    """Restrict graph to the sorted vertex ids in keep, remapping edge ends."""
    remap = -np.ones(graph.vertex_count, dtype=int)
    remap[keep] = np.arange(len(keep))
    new_edges = remap[edges] if len(edges) else np.zeros((0, 2), dtype=int)
    return SkeletonGraph(
        graph.voxel_indices[keep],
        graph.positions[keep],
        graph.radii[keep],
        graph.edt[keep],
        new_edges,
        weights,
        graph.resolution,
        components,
    )


def mst(graph: SkeletonGraph) -> SkeletonGraph:
    """Kruskal minimum spanning tree with (weight, min id, max id) tie-breaking.

    A disconnected graph yields the MST of its largest component; the
    component count is kept on the result and a warning is logged.
    """
    if graph.vertex_count == 0:
        raise EmptySkeleton("Cannot build a spanning tree of an empty graph")

    edges = np.sort(graph.edges, axis=1) if len(graph.edges) else graph.edges
    order = (
        np.lexsort((edges[:, 1], edges[:, 0], graph.weights)) if len(edges) else []
    )

    forest = UnionFind(range(graph.vertex_count))
    chosen = []
    for e in order:
        a, b = int(edges[e, 0]), int(edges[e, 1])
        if forest[a] != forest[b]:
            forest.union(a, b)
            chosen.append(e)

    chosen = np.asarray(chosen, dtype=int)
    tree_edges = edges[chosen] if len(chosen) else np.zeros((0, 2), dtype=int)
    tree_weights = graph.weights[chosen] if len(chosen) else np.zeros(0)

    groups = sorted((sorted(s) for s in forest.to_sets()), key=lambda s: (-len(s), s[0]))
    if len(groups) == 1:
        return SkeletonGraph(
            graph.voxel_indices,
            graph.positions,
            graph.radii,
            graph.edt,
            tree_edges,
            tree_weights,
            graph.resolution,
        )

    logger.warning(
        f"Candidate graph has {len(groups)} components; keeping the largest "
        f"({len(groups[0])} of {graph.vertex_count} vertices)"
    )
    keep = np.asarray(groups[0], dtype=int)
    in_keep = np.zeros(graph.vertex_count, dtype=bool)
    in_keep[keep] = True
    mask = in_keep[tree_edges[:, 0]] if len(tree_edges) else np.zeros(0, dtype=bool)
    return _subgraph(graph, keep, tree_edges[mask], tree_weights[mask], len(groups))


def _to_nx(tree: SkeletonGraph) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(range(tree.vertex_count))
    g.add_edges_from((int(a), int(b)) for a, b in tree.edges)
    return g


def root_vertex(tree: SkeletonGraph) -> int:
    """Lowest vertex in z; ties broken by x, then y."""
    if tree.vertex_count == 0:
        raise EmptySkeleton("Tree has no vertices")
    tol = 1e-6 * tree.resolution
    z = np.round(tree.positions[:, 2] / tol)
    order = np.lexsort((tree.positions[:, 1], tree.positions[:, 0], z))
    return int(order[0])


def _walk(g: nx.Graph, start: int, first: int, stop) -> list[int]:
    """Follow a degree-2 chain from start through first until stop(vertex)."""
    chain = [start, first]
    previous, current = start, first
    while not stop(current):
        following = [n for n in g.neighbors(current) if n != previous]
        if not following:
            break
        previous, current = current, following[0]
        chain.append(current)
    return chain


def _chain_length(positions: np.ndarray, chain: list[int]) -> float:
    pts = positions[chain]
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def _from_nx(tree: SkeletonGraph, g: nx.Graph) -> SkeletonGraph:
    keep = np.asarray(sorted(g.nodes), dtype=int)
    edges = np.asarray(sorted(tuple(sorted(e)) for e in g.edges), dtype=int).reshape(-1, 2)
    lengths = (
        np.linalg.norm(tree.positions[edges[:, 1]] - tree.positions[edges[:, 0]], axis=1)
        if len(edges)
        else np.zeros(0)
    )
    return _subgraph(tree, keep, edges, lengths, tree.components)


def prune_spurs(tree: SkeletonGraph, min_length: float) -> SkeletonGraph:
    """Drop terminal chains shorter than min_length (meters) that end at a junction.

    The chain holding the root is never removed. One pass only, so genuine
    short branches exposed by the pruning survive.
    """
    if min_length <= 0 or tree.vertex_count < 3:
        return tree
    g = _to_nx(tree)
    root = root_vertex(tree)
    removed = set()
    for leaf in sorted(v for v in g.nodes if g.degree(v) == 1 and v != root):
        chain = _walk(g, leaf, next(iter(g.neighbors(leaf))), lambda v: g.degree(v) != 2)
        end = chain[-1]
        if g.degree(end) < 3 or root in chain:
            continue
        if _chain_length(tree.positions, chain) < min_length:
            removed.update(chain[:-1])

    if not removed:
        return tree
    g.remove_nodes_from(removed)
    logger.info(f"Pruned {len(removed)} spur vertices shorter than {min_length} m")
    return _from_nx(tree, g)


def merge_junctions(tree: SkeletonGraph, merge_length: float) -> SkeletonGraph:
    """Contract junction-to-junction chains shorter than merge_length (meters).

    The junction nearer the root absorbs the other one together with the
    chain between them.
    """
    if merge_length <= 0 or tree.vertex_count < 4:
        return tree
    g = _to_nx(tree)
    root = root_vertex(tree)
    merged = 0

    while True:
        depth = nx.single_source_shortest_path_length(g, root)
        junctions = sorted(v for v in g.nodes if g.degree(v) >= 3)
        target = None
        for j in junctions:
            for first in sorted(g.neighbors(j)):
                chain = _walk(g, j, first, lambda v: g.degree(v) != 2)
                other = chain[-1]
                if other == j or g.degree(other) < 3 or depth[other] < depth[j]:
                    continue
                if _chain_length(tree.positions, chain) < merge_length:
                    target = (j, chain)
                    break
            if target:
                break
        if target is None:
            break

        keeper, chain = target
        absorbed = chain[-1]
        outer = [n for n in g.neighbors(absorbed) if n not in chain]
        g.remove_nodes_from(chain[1:])
        g.add_edges_from((keeper, n) for n in outer)
        merged += 1

    if merged:
        logger.info(f"Merged {merged} short junction chains")
        return _from_nx(tree, g)
    return tree


def simplify(tree: SkeletonGraph, resolution: float | None = None) -> SimplifiedSkeleton:
    """Collapse degree-2 chains of an acyclic tree into polyline segments.

    Segments are oriented away from the root (lowest vertex); node ids follow
    depth-first discovery order with neighbours visited by vertex id.
    """
    if resolution is not None and resolution != tree.resolution:
        tree = SkeletonGraph(
            tree.voxel_indices,
            tree.positions,
            tree.radii,
            tree.edt,
            tree.edges,
            tree.weights,
            resolution,
            tree.components,
        )
    g = _to_nx(tree)
    root_v = root_vertex(tree)
    is_key = {v: (g.degree(v) != 2 or v == root_v) for v in g.nodes}

    node_of: dict[int, int] = {}
    nodes: list[SkeletonNode] = []
    segments: list[Segment] = []

    def add_node(v: int) -> int:
        node_of[v] = len(nodes)
        nodes.append(
            SkeletonNode(
                len(nodes),
                tuple(float(c) for c in tree.positions[v]),
                float(tree.radii[v]),
            )
        )
        return node_of[v]

    add_node(root_v)
    stack = [(root_v, None)]
    visited_edges = set()
    while stack:
        v, came_from = stack.pop()
        branches = []
        for first in sorted(g.neighbors(v)):
            if first == came_from or (v, first) in visited_edges:
                continue
            chain = _walk(g, v, first, lambda u: is_key[u])
            for a, b in zip(chain[:-1], chain[1:]):
                visited_edges.add((a, b))
                visited_edges.add((b, a))
            end = chain[-1]
            a_id = node_of[v]
            b_id = add_node(end)
            polyline = tree.positions[chain]
            segments.append(
                Segment(
                    id=len(segments),
                    a=a_id,
                    b=b_id,
                    polyline=polyline,
                    length=_chain_length(tree.positions, chain),
                    mean_radius=float(np.mean(tree.radii[chain])),
                    dz=float(polyline[-1, 2] - polyline[0, 2]),
                )
            )
            branches.append((end, chain[-2]))
        # reversed so the lowest-id branch is expanded first
        stack.extend(reversed(branches))

    skeleton = SimplifiedSkeleton(tuple(nodes), tuple(segments), node_of[root_v])
    logger.info(f"Simplified skeleton: {len(nodes)} nodes, {len(segments)} segments")
    return skeleton


def skeletonize_cloud(
    cloud: PointCloud,
    fusion_config: FusionConfig | None = None,
    skeleton_config: SkeletonConfig | None = None,
) -> SimplifiedSkeleton:
    """Voxelize a cleaned cloud and reduce it to a junction/endpoint tree."""
    fusion_config = fusion_config or FusionConfig()
    cfg = skeleton_config or SkeletonConfig()

    grid = voxelize(cloud, fusion_config.voxel_resolution, fusion_config.max_grid_dim)
    if fusion_config.fill_volume:
        grid = fill_volume(grid)
    distances = edt(grid)
    skel = thin(grid)
    logger.info(f"Thinned {grid.occupied_count} voxels to {skel.occupied_count}")

    graph = build_graph(skel, distances, cfg.knn_k, cfg.epsilon, cfg.beta, cfg.gamma)
    tree = mst(graph)
    tree = prune_spurs(tree, cfg.min_branch_length)
    tree = merge_junctions(tree, cfg.junction_merge_length)
    return simplify(tree, grid.resolution)

"""
Tests for thinning, graph construction, MST and tree simplification.
"""

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial import cKDTree

from pollinate.errors import EmptySkeleton
from pollinate.graspplan import find_main_stem
from pollinate.models import ScoreParams, SkeletonGraph, VoxelGrid
from pollinate.skeleton import (
    build_graph,
    edge_weight,
    edt,
    merge_junctions,
    mst,
    prune_spurs,
    root_vertex,
    simplify,
    skeletonize_cloud,
    thin,
)
from pollinate.synthetic import sample_cloud


def _graph(positions, edges, weights=None, radii=None, resolution=1.0) -> SkeletonGraph:
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    if weights is None:
        weights = np.linalg.norm(positions[edges[:, 1]] - positions[edges[:, 0]], axis=1)
    return SkeletonGraph(
        voxel_indices=np.zeros((n, 3), dtype=int),
        positions=positions,
        radii=np.ones(n) if radii is None else np.asarray(radii, dtype=float),
        edt=np.ones(n),
        edges=edges,
        weights=np.asarray(weights, dtype=float),
        resolution=resolution,
    )


def _line_grid() -> VoxelGrid:
    occupancy = np.zeros((9, 5, 5), dtype=bool)
    occupancy[2:7, 2, 2] = True
    return VoxelGrid(np.zeros(3), 0.002, occupancy)


class TestDistanceAndThinning:
    """EDT and Lee thinning."""

    def test_edt_of_cube(self):
        occupancy = np.zeros((7, 7, 7), dtype=bool)
        occupancy[1:6, 1:6, 1:6] = True
        field = edt(VoxelGrid(np.zeros(3), 0.001, occupancy))
        assert field.at([[3, 3, 3]])[0] == pytest.approx(3.0)
        assert field.at([[1, 1, 1]])[0] == pytest.approx(1.0)
        assert field.at([[0, 0, 0]])[0] == 0.0

    def test_thin_bar_to_connected_line(self):
        occupancy = np.zeros((32, 7, 7), dtype=bool)
        occupancy[1:31, 2:5, 2:5] = True
        grid = VoxelGrid(np.zeros(3), 0.001, occupancy)
        skeleton = thin(grid).occupancy
        assert not np.any(skeleton & ~occupancy)
        assert 10 < skeleton.sum() < occupancy.sum()
        _, components = ndimage.label(skeleton, np.ones((3, 3, 3), dtype=bool))
        assert components == 1

    def test_edt_matches_nearest_background_search(self, rng):
        occupancy = rng.random((12, 12, 12)) > 0.35
        occupancy[[0, -1], :, :] = False
        occupancy[:, [0, -1], :] = False
        occupancy[:, :, [0, -1]] = False
        field = edt(VoxelGrid(np.zeros(3), 0.001, occupancy))
        inside = np.argwhere(occupancy)
        nearest, _ = cKDTree(np.argwhere(~occupancy)).query(inside)
        np.testing.assert_allclose(field.at(inside), nearest, atol=1e-12)
        assert np.all(field.values[~occupancy] == 0.0)

    def test_thin_leaves_a_line_unchanged(self):
        grid = _line_grid()
        np.testing.assert_array_equal(thin(grid).occupancy, grid.occupancy)

    def test_disjoint_blobs_thin_to_two_components(self):
        occupancy = np.zeros((30, 9, 9), dtype=bool)
        occupancy[1:12, 2:7, 2:7] = True
        occupancy[17:29, 2:7, 2:7] = True
        skeleton = thin(VoxelGrid(np.zeros(3), 0.001, occupancy)).occupancy
        assert not np.any(skeleton & ~occupancy)
        _, components = ndimage.label(skeleton, np.ones((3, 3, 3), dtype=bool))
        assert components == 2

    def test_thin_empty_grid(self):
        grid = VoxelGrid(np.zeros(3), 0.001, np.zeros((3, 3, 3), dtype=bool))
        assert thin(grid).occupied_count == 0


class TestCandidateGraph:
    """KNN graph and edge costs."""

    def test_edge_weight_formula(self):
        weight = edge_weight(2.0, 1.0, 3.0, 1.0, epsilon=0.5, beta=1.0, gamma=1.0)
        assert weight == pytest.approx(2.0 / (1.5 * 1.5))

    def test_vertical_edges_are_cheaper(self):
        flat = edge_weight(1.0, 2.0, 2.0, 0.0)
        vertical = edge_weight(1.0, 2.0, 2.0, 1.0)
        assert vertical < flat

    def test_thick_edges_are_cheaper(self):
        assert edge_weight(1.0, 3.0, 3.0, 0.0) < edge_weight(1.0, 1.0, 1.0, 0.0)

    def test_line_knn_edges(self):
        grid = _line_grid()
        graph = build_graph(grid, edt(grid), k=2)
        assert graph.vertex_count == 5
        edges = {tuple(e) for e in graph.edges.tolist()}
        assert edges == {(0, 1), (0, 2), (1, 2), (2, 3), (2, 4), (3, 4)}
        np.testing.assert_allclose(graph.radii, 0.002)

    def test_empty_skeleton(self):
        grid = VoxelGrid(np.zeros(3), 0.001, np.zeros((3, 3, 3), dtype=bool))
        with pytest.raises(EmptySkeleton):
            build_graph(grid, edt(grid))

    def test_k_must_be_at_least_two(self):
        grid = _line_grid()
        with pytest.raises(ValueError):
            build_graph(grid, edt(grid), k=1)


class TestSpanningTree:
    """Kruskal MST."""

    def test_triangle(self):
        graph = _graph(np.eye(3), [(0, 1), (1, 2), (0, 2)], weights=[1.0, 2.0, 3.0])
        tree = mst(graph)
        assert {tuple(e) for e in tree.edges.tolist()} == {(0, 1), (1, 2)}
        assert tree.total_weight == pytest.approx(3.0)

    def test_ties_break_by_vertex_ids(self):
        positions = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
        graph = _graph(positions, [(0, 1), (1, 2), (2, 3), (0, 3)], weights=[1.0, 1.0, 1.0, 1.0])
        tree = mst(graph)
        assert {tuple(e) for e in tree.edges.tolist()} == {(0, 1), (0, 3), (1, 2)}

    def test_line_graph(self):
        grid = _line_grid()
        tree = mst(build_graph(grid, edt(grid), k=2))
        assert len(tree.edges) == 4
        np.testing.assert_allclose(tree.edge_lengths, 0.002)

    def test_disconnected_keeps_largest_component(self):
        positions = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0], [11, 0, 0]]
        tree = mst(_graph(positions, [(0, 1), (1, 2), (3, 4)]))
        assert tree.vertex_count == 3
        assert tree.components == 2
        np.testing.assert_allclose(tree.positions[:, 0], [0.0, 1.0, 2.0])

    def test_single_vertex(self):
        tree = mst(_graph([[0.0, 0.0, 0.0]], np.zeros((0, 2))))
        assert tree.vertex_count == 1
        assert len(tree.edges) == 0

    def test_empty_graph(self):
        with pytest.raises(EmptySkeleton):
            mst(_graph(np.zeros((0, 3)), np.zeros((0, 2))))


class TestSimplify:
    """Junction/endpoint trees."""

    @pytest.fixture
    def y_tree(self):
        positions = [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3], [1, 0, 2]]
        return _graph(positions, [(0, 1), (1, 2), (2, 3), (2, 4)], radii=[4, 4, 3, 2, 1])

    def test_root_is_lowest_vertex(self, y_tree):
        assert root_vertex(y_tree) == 0

    def test_root_ties_break_by_x(self):
        tree = _graph([[1, 0, 0], [0, 0, 0], [0, 0, 1]], [(0, 1), (1, 2)])
        assert root_vertex(tree) == 1

    def test_segments_and_nodes(self, y_tree):
        skel = simplify(y_tree)
        assert len(skel.nodes) == 4
        assert len(skel.segments) == 3
        assert skel.root == 0

        trunk, top, side = skel.segments
        assert (trunk.a, trunk.b) == (0, 1)
        assert trunk.length == pytest.approx(2.0)
        assert trunk.dz == pytest.approx(2.0)
        assert trunk.mean_radius == pytest.approx((4 + 4 + 3) / 3)
        assert len(trunk.polyline) == 3

        assert (top.a, top.b) == (1, 2)
        assert top.dz == pytest.approx(1.0)
        assert (side.a, side.b) == (1, 3)
        assert side.dz == pytest.approx(0.0)

    def test_tree_queries(self, y_tree):
        skel = simplify(y_tree)
        assert skel.leaves() == [2, 3]
        assert skel.path_to(2) == [0, 1]
        assert skel.degree(1) == 3
        assert skel.parent_segment(3).id == 2
        assert skel.total_length == pytest.approx(4.0)

    def test_resolution_override(self, y_tree):
        assert simplify(y_tree, resolution=0.5).segments[0].length == pytest.approx(2.0)

    def test_prune_short_spur(self):
        trunk = [[0.0, 0.0, 0.01 * i] for i in range(11)]
        positions = [*trunk, [0.005, 0.0, 0.03]]
        edges = [(i, i + 1) for i in range(10)] + [(3, 11)]
        tree = prune_spurs(_graph(positions, edges, resolution=0.001), 0.02)
        assert tree.vertex_count == 11
        assert len(tree.edges) == 10
        assert len(simplify(tree).segments) == 1

    def test_long_branch_survives_pruning(self):
        trunk = [[0.0, 0.0, 0.01 * i] for i in range(11)]
        positions = [*trunk, [0.03, 0.0, 0.03]]
        edges = [(i, i + 1) for i in range(10)] + [(3, 11)]
        tree = prune_spurs(_graph(positions, edges, resolution=0.001), 0.02)
        assert tree.vertex_count == 12

    def test_merge_close_junctions(self):
        positions = [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.05],
            [0.0, 0.0, 0.055],
            [0.05, 0.0, 0.05],
            [0.0, 0.0, 0.1],
            [-0.05, 0.0, 0.06],
        ]
        edges = [(0, 1), (1, 2), (1, 3), (2, 4), (2, 5)]
        tree = merge_junctions(_graph(positions, edges, resolution=0.001), 0.01)
        assert tree.vertex_count == 5
        degrees = np.bincount(tree.edges.ravel(), minlength=tree.vertex_count)
        assert degrees.max() == 4
        skel = simplify(tree)
        assert len(skel.segments) == 4
        assert skel.degree(1) == 4


class TestSkeletonizeCloud:
    """End-to-end skeletonization of synthetic plants."""

    def test_straight_stem(self, config, stem_skeleton):
        cloud = sample_cloud(stem_skeleton, spacing=0.001)
        skel = skeletonize_cloud(cloud, config.fusion, config.skeleton)
        stem = find_main_stem(skel, ScoreParams())
        top = skel.node(skel.segment(stem.segment_ids[-1]).b)
        assert skel.node(skel.root).position[2] < 0.01
        assert top.position[2] > 0.39
        assert max(abs(top.position[0]), abs(top.position[1])) < 0.004

    def test_radii_match_stem(self, config, stem_skeleton):
        cloud = sample_cloud(stem_skeleton, spacing=0.001)
        skel = skeletonize_cloud(cloud, config.fusion, config.skeleton)
        longest = max(skel.segments, key=lambda s: s.length)
        assert abs(longest.mean_radius - 0.004) <= 2 * config.fusion.voxel_resolution

    @pytest.mark.slow
    def test_y_plant_has_a_junction(self, config, y_skeleton):
        cloud = sample_cloud(y_skeleton, spacing=0.001)
        skel = skeletonize_cloud(cloud, config.fusion, config.skeleton)
        assert len(skel.leaves()) == 2
        assert any(skel.degree(n.id) == 3 for n in skel.nodes)

import numpy as np
import pytest

from amrgnn.autodiff import Tensor
from amrgnn.graph import (FeatureScales, MissingField, TransferMap, build_transfer_maps,
                          directed_edges, extract_graph, level_node_ids, transfer_map)
from amrgnn.mesh import DomainSpec, build_base_mesh
from amrgnn.model import MapMismatch, downscale_features, upscale_features


def _fields(m, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, m.n_vertices), rng.normal(size=m.n_vertices), rng.normal(size=m.n_vertices)


def _three_node_map(direction="down"):
    # coarse nodes 0 and 2, fine-only midpoint 1 halfway between them
    return TransferMap(direction, 1, np.array([0, 1, 2]), np.array([0, 2]), np.array([0, 2]),
                       np.array([1, 1]), np.array([0, 1]), np.array([0.5, 0.5]))


def test_directed_edges_have_both_orientations_and_self_loops(small_mesh):
    s, r = directed_edges(small_mesh)
    pairs = set(zip(s.tolist(), r.tolist()))
    for a, b in small_mesh.edges:
        assert (a, b) in pairs and (b, a) in pairs
    assert all((i, i) in pairs for i in range(small_mesh.n_vertices))
    assert len(s) == 2 * len(small_mesh.edges) + small_mesh.n_vertices
    assert np.all(np.diff(r) >= 0)


def test_feature_normalization(small_mesh):
    phi, u, v = _fields(small_mesh)
    sc = FeatureScales(0.5, 2.0)
    g = extract_graph(small_mesh, phi, u, v, (1.0, -4.0), scales=sc)
    np.testing.assert_allclose(g.node_features[:, 0:2], small_mesh.positions / 0.5)
    np.testing.assert_allclose(g.node_features[:, 2], u / 2.0)
    np.testing.assert_allclose(g.node_features[:, 4], phi)
    np.testing.assert_allclose(g.node_features[:, 5:], np.tile([0.5, -2.0], (small_mesh.n_vertices, 1)))
    pos = small_mesh.positions / 0.5
    np.testing.assert_allclose(g.edge_features[:, 1:], pos[g.receivers] - pos[g.senders])
    assert np.all(g.edge_features[:, 0] == 1.0)


def test_missing_or_bad_fields(small_mesh):
    phi, u, v = _fields(small_mesh)
    with pytest.raises(MissingField):
        extract_graph(small_mesh, None, u, v, (0, 0))
    with pytest.raises(MissingField):
        extract_graph(small_mesh, phi[:-1], u, v, (0, 0))
    bad = u.copy()
    bad[3] = np.nan
    with pytest.raises(MissingField):
        extract_graph(small_mesh, phi, bad, v, (0, 0))


def test_level_graph_nodes_are_subset(small_mesh):
    phi, u, v = _fields(small_mesh)
    g0 = extract_graph(small_mesh, phi, u, v, (0, 0), k=0)
    assert g0.n_nodes == build_base_mesh(small_mesh.spec).n_vertices
    np.testing.assert_array_equal(g0.node_ids, level_node_ids(small_mesh, 0))


def test_down_map_hand_computed():
    e = np.array([[1.0, 2.0], [4.0, -2.0], [3.0, 0.0]])
    out = downscale_features(Tensor(e), _three_node_map())
    np.testing.assert_allclose(out.data, [[1 + 2.0, 2 - 1.0], [3 + 2.0, 0 - 1.0]])


def test_up_map_midpoint_average_and_copy():
    c = np.array([[2.0, 0.0], [4.0, 1.0]])
    out = upscale_features(Tensor(c), _three_node_map("up"))
    np.testing.assert_allclose(out.data, [[2.0, 0.0], [3.0, 0.5], [4.0, 1.0]])


def test_direction_and_size_checks():
    with pytest.raises(MapMismatch):
        downscale_features(Tensor(np.zeros((3, 2))), _three_node_map("up"))
    with pytest.raises(MapMismatch):
        upscale_features(Tensor(np.zeros((3, 2))), _three_node_map("up"))


def test_identity_without_fine_only_nodes():
    m = build_base_mesh(DomainSpec(0.5, 4, 1))
    tm = transfer_map(m, 1)
    assert len(tm.fine_only) == 0
    e = np.random.default_rng(1).normal(size=(m.n_vertices, 3))
    np.testing.assert_array_equal(downscale_features(Tensor(e), tm).data, e)


def test_round_trip_on_shared_nodes(small_mesh):
    rng = np.random.default_rng(2)
    for tm in build_transfer_maps(small_mesh)[: small_mesh.spec.max_level]:
        np.testing.assert_array_equal(tm.fine_ids[tm.shared], tm.coarse_ids)
        c = rng.normal(size=(tm.n_coarse, 4))
        up = upscale_features(Tensor(c), tm.as_direction("up")).data
        np.testing.assert_array_equal(up[tm.shared], c)


def test_maps_are_linear(small_mesh):
    rng = np.random.default_rng(3)
    tm = transfer_map(small_mesh, small_mesh.spec.max_level)
    a, b = rng.normal(size=(2, tm.n_fine, 5))
    f = lambda x: downscale_features(Tensor(x), tm).data
    np.testing.assert_allclose(f(2.5 * a - 0.5 * b), 2.5 * f(a) - 0.5 * f(b), atol=1e-12)
    np.testing.assert_array_equal(f(np.zeros_like(a)), 0.0)


def test_transfer_map_order(small_mesh):
    maps = build_transfer_maps(small_mesh)
    L = small_mesh.spec.max_level
    assert [m.direction for m in maps] == ["down"] * L + ["up"] * L
    assert [m.fine_level for m in maps] == list(range(L, 0, -1)) + list(range(1, L + 1))
    assert build_transfer_maps(build_base_mesh(small_mesh.spec)) == []

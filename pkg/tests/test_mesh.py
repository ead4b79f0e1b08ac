import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amrgnn.mesh import (DomainSpec, InvalidSpec, LevelOutOfRange, RefineCriterion, RefinedMesh,
                         build_base_mesh, is_balanced, mirror_mesh, regrid, restrict_to_levels,
                         vertex_parents)

from conftest import crack_phi, refined_mesh


def test_base_mesh_counts():
    m = build_base_mesh(DomainSpec(1.0, 2, 0))
    assert m.n_vertices == 9
    assert len(m.edges) == 12
    assert m.n_cells == 4
    assert np.all(m.vertex_level == 0)


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        DomainSpec(0.0, 16, 2)
    with pytest.raises(InvalidSpec):
        DomainSpec(0.5, 1, 2)
    with pytest.raises(InvalidSpec):
        DomainSpec(0.5, 16, -1)
    with pytest.raises(InvalidSpec):
        RefineCriterion(threshold=1.5)


def test_restrict_out_of_range(small_mesh):
    with pytest.raises(LevelOutOfRange):
        restrict_to_levels(small_mesh, small_mesh.spec.max_level + 1)
    with pytest.raises(LevelOutOfRange):
        vertex_parents(small_mesh, 0)


def test_uniform_phi_leaves_base_grid():
    spec = DomainSpec(0.5, 8, 3)
    m = build_base_mesh(spec)
    assert regrid(m, np.ones(m.n_vertices)) == m


def test_regrid_refines_crack_band_and_is_balanced(small_mesh):
    m = small_mesh
    assert m.cells[:, 0].max() == m.spec.max_level
    assert is_balanced(m)
    # the finest cells sit near the crack
    fine = m.cells[:, 0] == m.spec.max_level
    centres = (m.cell_origin_units[fine] + m.cell_size_units[fine, None] / 2) * m.spec.unit
    assert np.all(np.abs(centres[:, 1] - 0.25) < 0.2)


def test_regrid_idempotent(small_mesh):
    phi = crack_phi(small_mesh)
    crit = RefineCriterion(band_width=small_mesh.spec.side_length / 16)
    once = regrid(small_mesh, phi, crit)
    assert regrid(once, crack_phi(once), crit) == once


def test_level_zero_vertices_are_base_grid(small_mesh):
    m = small_mesh
    base = build_base_mesh(m.spec)
    lvl0 = m.vertices[m.vertex_level == 0]
    np.testing.assert_array_equal(lvl0, base.vertices)


def test_restriction_matches_vertex_levels(small_mesh):
    m = small_mesh
    prev = None
    for k in range(m.spec.max_level + 1):
        sub = restrict_to_levels(m, k)
        ids = m.lookup(sub.vertices)
        assert np.all(ids >= 0)
        np.testing.assert_array_equal(np.sort(ids), np.nonzero(m.vertex_level <= k)[0])
        if prev is not None:
            assert set(prev) <= set(ids)
        prev = ids


def test_hanging_nodes_split_coarse_edges(small_mesh):
    m = small_mesh
    assert m.hanging
    edges = {tuple(e) for e in m.edges}
    for h, (a, b) in m.hanging.items():
        assert (min(a, b), max(a, b)) not in edges
        assert (min(a, h), max(a, h)) in edges
        assert (min(h, b), max(h, b)) in edges
        mid = (m.vertices[a] + m.vertices[b]) / 2
        np.testing.assert_array_equal(m.vertices[h], mid)


def test_parent_weights_sum_to_one(small_mesh):
    for k in range(1, small_mesh.spec.max_level + 1):
        for vid, parents in vertex_parents(small_mesh, k).items():
            w = [p[1] for p in parents]
            assert abs(sum(w) - 1.0) < 1e-15
            assert all(x > 0 for x in w)
            assert all(small_mesh.vertex_level[p] <= k - 1 for p, _ in parents)


def test_interpolation_reproduces_bilinear_fields(small_mesh):
    m = small_mesh
    other = refined_mesh(y=0.3, x_end=0.35)
    f = lambda p: 2.0 + 3.0 * p[:, 0] - 1.5 * p[:, 1]
    got = m.transfer(f(m.positions), other)
    np.testing.assert_allclose(got, f(other.positions), rtol=0, atol=1e-13)
    # values at shared vertices are copied exactly
    vals = np.random.default_rng(0).normal(size=m.n_vertices)
    moved = m.transfer(vals, other)
    shared = m.lookup(other.vertices)
    hit = shared >= 0
    np.testing.assert_array_equal(moved[hit], vals[shared[hit]])


def test_mirror_is_involution(small_mesh):
    once, perm = mirror_mesh(small_mesh)
    twice, perm2 = mirror_mesh(once)
    assert twice == small_mesh
    np.testing.assert_array_equal(perm[perm2], np.arange(small_mesh.n_vertices))
    x = small_mesh.vertices[perm, 0]
    np.testing.assert_array_equal(once.vertices[:, 0], small_mesh.spec.finest - x)


@settings(max_examples=15, deadline=None)
@given(base=st.sampled_from([2, 4, 6]), L=st.integers(0, 3),
       y=st.floats(0.05, 0.45), x_end=st.floats(0.0, 0.5))
def test_random_meshes_are_balanced_and_nested(base, L, y, x_end):
    m = refined_mesh(base=base, max_level=L, y=y, x_end=x_end)
    assert is_balanced(m)
    counts = [restrict_to_levels(m, k).n_vertices for k in range(L + 1)]
    assert counts == sorted(counts)
    assert counts[-1] == m.n_vertices
    for k in range(L + 1):
        assert counts[k] == int((m.vertex_level <= k).sum())


def test_cells_are_sorted_and_equality_is_structural(small_mesh):
    shuffled = RefinedMesh(small_mesh.spec, small_mesh.cells[::-1].copy())
    assert shuffled == small_mesh
    assert hash(shuffled) == hash(small_mesh)

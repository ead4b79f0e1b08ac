import numpy as np
import pytest
import scipy.sparse as sp

from amrgnn.mesh import DomainSpec, build_base_mesh
from amrgnn.pf_oracle import (CrackOutsideDomain, Discretization, box_qp, init_state, reference_matrices,
                              run_simulation, solve_crack, solve_elastic, total_energy)
from amrgnn.records import mirror_record
from amrgnn.scenario import MaterialParams, ScenarioConfig

from conftest import refined_mesh

MAT = MaterialParams()


def homogeneous_energy(delta, side=0.5, mat=MAT):
    # uniaxial strain in y with free lateral contraction, plane strain
    eps = delta / side
    return 0.5 * mat.E / (1 - mat.nu ** 2) * eps ** 2 * side * side


def test_reference_element_is_rigid_body_free():
    K0, Kl = reference_matrices(MAT)
    assert np.allclose(K0, K0.T) and np.allclose(Kl, Kl.T)
    assert np.linalg.matrix_rank(K0) == 5  # 8 dofs minus 3 rigid modes
    np.testing.assert_allclose(Kl @ np.ones(4), 0, atol=1e-14)


def test_zero_load_gives_zero_displacement():
    disc = Discretization.build(refined_mesh(base=16))
    u = solve_elastic(disc, MAT, np.ones(disc.mesh.n_vertices), (0.0, 0.0))
    assert np.all(u == 0)


@pytest.mark.parametrize("mesh", [build_base_mesh(DomainSpec(0.5, 16, 2)), refined_mesh(base=16)])
def test_homogeneous_tension_energy(mesh):
    disc = Discretization.build(mesh)
    phi = np.ones(mesh.n_vertices)
    d = 1e-6
    u = solve_elastic(disc, MAT, phi, (0.0, d), bc="roller")
    # linear v profile and uniform Poisson contraction
    np.testing.assert_allclose(u[:, 1], d * mesh.positions[:, 1] / 0.5, rtol=1e-6, atol=1e-15)
    refs = reference_matrices(MAT)
    elastic = total_energy(disc, MAT, phi, u, refs) - total_energy(disc, MAT, phi, 0 * u, refs)
    assert abs(elastic / homogeneous_energy(d) - 1) < 0.02


def test_energy_quadratic_in_load():
    mesh = refined_mesh(base=16)
    disc = Discretization.build(mesh)
    phi = np.ones(mesh.n_vertices)
    refs = reference_matrices(MAT)
    e = [total_energy(disc, MAT, phi, solve_elastic(disc, MAT, phi, (0, d)), refs) for d in (1e-6, 2e-6)]
    assert e[1] / e[0] == pytest.approx(4.0, rel=1e-10)


def test_no_strain_no_crack_heals_nothing():
    mesh = refined_mesh(base=8)
    disc = Discretization.build(mesh)
    n = mesh.n_vertices
    phi = solve_crack(disc, MAT, np.zeros((n, 2)), np.ones(n))
    np.testing.assert_allclose(phi, 1.0, atol=1e-12)
    # an existing crack bound stays binding
    bound = np.ones(n)
    bound[:5] = 0.0
    phi = solve_crack(disc, MAT, np.zeros((n, 2)), bound)
    assert np.all(phi <= bound + 1e-15) and np.all(phi >= 0)
    assert np.all(phi[:5] == 0)


def test_box_qp_kkt():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(12, 12))
    A = sp.csr_matrix(M @ M.T + 12 * np.eye(12))
    b = rng.normal(size=12) * 10
    lo, hi = np.zeros(12), np.full(12, 0.5)
    x = box_qp(A, b, lo, hi, np.zeros(12))
    g = A @ x - b
    free = (x > lo) & (x < hi)
    np.testing.assert_allclose(g[free], 0, atol=1e-10)
    assert np.all(g[x == lo] >= -1e-10)
    assert np.all(g[x == hi] <= 1e-10)


def test_init_state_properties():
    spec = DomainSpec(0.5, 16, 2)
    empty = init_state(spec, ScenarioConfig(crack_length=0.0), MAT)
    assert np.all(empty.phi == 1.0)
    left = init_state(spec, ScenarioConfig(crack_length=0.2, crack_position=0.25), MAT)
    assert left.phi.min() == 0.0 and left.phi.max() <= 1.0
    # symmetric about the crack line y = 0.25, which is also the domain centre line
    v = left.mesh.vertices.copy()
    v[:, 1] = spec.finest - v[:, 1]
    img = left.mesh.lookup(v)
    assert np.all(img >= 0)
    np.testing.assert_allclose(left.phi[img], left.phi, atol=1e-12)
    with pytest.raises(CrackOutsideDomain):
        init_state(spec, ScenarioConfig(crack_length=0.3, crack_position=0.25, crack_angle=1.5), MAT)


def test_right_edge_is_mirror_of_left_edge():
    spec = DomainSpec(0.5, 16, 2)
    scen = ScenarioConfig(crack_length=0.2, steps=0)
    left = run_simulation(spec, scen, MAT)
    right = run_simulation(spec, scen.mirrored(), MAT)
    mirrored = mirror_record(left)
    assert right.frames[0].mesh == mirrored.frames[0].mesh
    np.testing.assert_allclose(right.frames[0].phi, mirrored.frames[0].phi, atol=1e-12)


def test_zero_steps_record():
    rec = run_simulation(DomainSpec(0.5, 8, 1), ScenarioConfig(crack_length=0.1, steps=0), MAT)
    assert rec.n_frames == 1


def test_short_simulation_is_irreversible_and_monotone():
    spec = DomainSpec(0.5, 8, 1)
    scen = ScenarioConfig(crack_length=0.2, load_increment=1e-6, steps=4)
    diag = []
    rec = run_simulation(spec, scen, MAT, diagnostics=diag)
    base = build_base_mesh(spec).vertices
    prev = None
    for f in rec.frames:
        assert f.phi.min() >= 0 and f.phi.max() <= 1
        on_base = f.phi[f.mesh.lookup(base)]
        if prev is not None:
            assert np.all(on_base <= prev + 1e-10)
        prev = on_base
    for info in diag:
        for energies in info["energies"]:
            e = np.array(energies)
            assert np.all(np.diff(e) <= 1e-12 * abs(e).max())

"""Desk-scale quasi-static phase-field fracture solver.

Discrete energy (per unit thickness) on bilinear quadrilateral leaves, with
``phi = 1`` in intact material and ``phi = 0`` inside the crack::

    Pi = sum_e g_e * W_e(u)
         + sum_e sum_corners (h_e^2 / 4) * Gc / (2 d) * (1 - phi_c)^2
         + sum_e Gc d / 2 * phi_e^T K_lap phi_e

``g_e`` is the corner average of ``phi^2 + eta`` and ``W_e`` the undegraded
element strain energy (plane strain).  Both half-steps of the staggered
scheme minimize this same functional exactly, so the energy never rises
within a load step.  Hanging vertices are slaved to the average of the two
ends of the coarse side they split.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import DomainSpec, RefineCriterion, RefinedMesh, build_base_mesh, regrid
from .records import Frame, SimulationRecord
from .scenario import MaterialParams, ScenarioConfig


class SolverDiverged(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class CrackOutsideDomain(ValueError):
    pass


TIP_PHI = 0.05
GAUSS = (-1 / math.sqrt(3), 1 / math.sqrt(3))
# corner order: lower-left, lower-right, upper-right, upper-left
_XI = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)


def _shape_grads(xi: float, eta: float) -> np.ndarray:
    # derivatives of the 4 bilinear shape functions on the unit square [0,1]^2
    return 0.25 * np.array([_XI[:, 0] * (1 + _XI[:, 1] * eta), _XI[:, 1] * (1 + _XI[:, 0] * xi)]) * 2.0


def elasticity_matrix(mat: MaterialParams) -> np.ndarray:
    E, nu = mat.E, mat.nu
    c = E / ((1 + nu) * (1 - 2 * nu))
    return c * np.array([[1 - nu, nu, 0.0], [nu, 1 - nu, 0.0], [0.0, 0.0, (1 - 2 * nu) / 2]])


def reference_matrices(mat: MaterialParams) -> tuple[np.ndarray, np.ndarray]:
    """Element stiffness (8x8, dofs interleaved u,v) and Laplacian (4x4) for a
    square element; both are independent of the element size in 2D."""
    D = elasticity_matrix(mat)
    K = np.zeros((8, 8))
    Kl = np.zeros((4, 4))
    for xi in GAUSS:
        for eta in GAUSS:
            dN = _shape_grads(xi, eta)  # gradients w.r.t. unit-square coordinates
            B = np.zeros((3, 8))
            B[0, 0::2] = dN[0]
            B[1, 1::2] = dN[1]
            B[2, 0::2] = dN[1]
            B[2, 1::2] = dN[0]
            K += 0.25 * B.T @ D @ B
            Kl += 0.25 * dN.T @ dN
    return K, Kl


@dataclass
class Discretization:
    """Assembly data for one mesh: element connectivity plus the hanging-node
    prolongation ``P`` from free (non-hanging) vertices to all vertices."""

    mesh: RefinedMesh
    corners: np.ndarray
    h: np.ndarray
    P: sp.csr_matrix
    free: np.ndarray

    @classmethod
    def build(cls, mesh: RefinedMesh) -> "Discretization":
        hanging = mesh.hanging
        n = mesh.n_vertices
        free = np.array([i for i in range(n) if i not in hanging], dtype=np.int64)
        col_of = {int(v): c for c, v in enumerate(free)}
        memo: dict[int, dict[int, float]] = {}

        def expand(v: int) -> dict[int, float]:
            if v in col_of:
                return {col_of[v]: 1.0}
            if v not in memo:
                a, b = hanging[v]
                out: dict[int, float] = {}
                for end in (a, b):
                    for c, w in expand(end).items():
                        out[c] = out.get(c, 0.0) + 0.5 * w
                memo[v] = out
            return memo[v]

        rows, cols, vals = [], [], []
        for v in range(n):
            for c, w in expand(v).items():
                rows.append(v)
                cols.append(c)
                vals.append(w)
        P = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(free)))
        return cls(mesh, mesh.cell_corners, mesh.cell_size_units * mesh.spec.unit, P, free)


def _assemble(conn: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _dofs(corners: np.ndarray) -> np.ndarray:
    return np.stack([2 * corners, 2 * corners + 1], axis=2).reshape(len(corners), 8)


def element_strain_energy(disc: Discretization, K0: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Undegraded strain energy of every element, ``u`` of shape ``(n, 2)``."""
    ue = u[disc.corners].reshape(len(disc.corners), 8)
    return 0.5 * np.einsum("ei,ij,ej->e", ue, K0, ue)


def degradation(disc: Discretization, phi: np.ndarray, eta: float) -> np.ndarray:
    return (phi[disc.corners] ** 2 + eta).mean(axis=1)


def total_energy(disc: Discretization, mat: MaterialParams, phi: np.ndarray, u: np.ndarray,
                 refs: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    K0, Kl = refs or reference_matrices(mat)
    We = element_strain_energy(disc, K0, u)
    g = degradation(disc, phi, mat.eta)
    pe = phi[disc.corners]
    bulk = (disc.h ** 2 / 4) * (mat.Gc / (2 * mat.d)) * ((1 - pe) ** 2).sum(axis=1)
    grad = 0.5 * mat.Gc * mat.d * np.einsum("ei,ij,ej->e", pe, Kl, pe)
    return float(np.sum(g * We) + np.sum(bulk) + np.sum(grad))


def boundary_conditions(mesh: RefinedMesh, applied: tuple[float, float], mode: str = "tension",
                        bc: str = "clamped") -> tuple[np.ndarray, np.ndarray]:
    """Constrained dof ids and their prescribed values.

    ``clamped``: bottom edge fixed, top edge moved rigidly by ``applied``.
    ``roller``: bottom ``v = 0``, top ``v`` prescribed, ``u`` free apart from
    the bottom-left corner (homogeneous tension).
    """
    N = mesh.spec.finest
    y = mesh.vertices[:, 1]
    bottom = np.nonzero(y == 0)[0]
    top = np.nonzero(y == N)[0]
    if bc == "clamped":
        dofs = np.concatenate([2 * bottom, 2 * bottom + 1, 2 * top, 2 * top + 1])
        vals = np.concatenate([np.zeros(2 * len(bottom)), np.full(len(top), applied[0]),
                               np.full(len(top), applied[1])])
    elif bc == "roller":
        corner = bottom[np.argmin(mesh.vertices[bottom, 0])]
        dofs = np.concatenate([[2 * corner], 2 * bottom + 1, 2 * top + 1])
        vals = np.concatenate([[0.0], np.zeros(len(bottom)), np.full(len(top), applied[1])])
    else:
        raise ValueError(f"unknown boundary condition {bc!r}")
    order = np.argsort(dofs)
    return dofs[order], vals[order]


def _check_residual(A, x, b, what: str, tol: float = 1e-8):
    r = np.linalg.norm(A @ x - b)
    scale = max(np.linalg.norm(b), 1e-300)
    if not np.all(np.isfinite(x)) or (np.linalg.norm(b) > 0 and r / scale > tol):
        raise SolverDiverged(f"{what} solve residual {r / scale:.3e} exceeds {tol:g}")


def solve_elastic(disc: Discretization, mat: MaterialParams, phi: np.ndarray, applied: tuple[float, float],
                  bc: str = "clamped", refs=None) -> np.ndarray:
    """Displacements ``(n, 2)`` minimizing the degraded elastic energy."""
    K0, _ = refs or reference_matrices(mat)
    mesh = disc.mesh
    n = mesh.n_vertices
    g = degradation(disc, phi, mat.eta)
    K = _assemble(_dofs(disc.corners), g[:, None, None] * K0[None], 2 * n)
    P2 = sp.kron(disc.P, sp.identity(2), format="csr")
    Kr = (P2.T @ K @ P2).tocsr()
    # constrained vertices are never hanging, so their reduced dof is direct
    fixed_full, vals = boundary_conditions(mesh, applied, bc=bc)
    col_of = np.full(n, -1, dtype=np.int64)
    col_of[disc.free] = np.arange(len(disc.free))
    fixed = 2 * col_of[fixed_full // 2] + fixed_full % 2
    nr = Kr.shape[0]
    x = np.zeros(nr)
    x[fixed] = vals
    mask = np.ones(nr, dtype=bool)
    mask[fixed] = False
    if np.any(vals != 0):
        Kff = Kr[mask][:, mask].tocsc()
        rhs = -(Kr[mask][:, fixed] @ vals)
        x[mask] = spla.spsolve(Kff, rhs)
        _check_residual(Kff, x[mask], rhs, "elastic")
    return (P2 @ x).reshape(n, 2)


def box_qp(A: sp.csr_matrix, b: np.ndarray, lo: np.ndarray, hi: np.ndarray, x0: np.ndarray,
           max_iter: int = 200, rtol: float = 1e-12) -> np.ndarray:
    """Minimize ``x'Ax/2 - b'x`` subject to ``lo <= x <= hi`` by primal-dual active sets.

    Stops once the iterate is feasible and the multipliers on the active
    bounds have the right sign, both up to ``rtol`` relative slack.
    """
    A = A.tocsr()
    diag = A.diagonal()
    x = np.clip(x0, lo, hi)
    lam = b - A @ x
    scale = max(float(np.abs(b).max(initial=0.0)), float(np.abs(A @ x).max(initial=0.0)), 1e-300)
    xtol = rtol * max(float(np.abs(hi).max(initial=0.0)), 1.0)
    for _ in range(max_iter):
        trial = x + lam / diag
        upper = trial > hi
        lower = (trial < lo) & ~upper
        free = ~(upper | lower)
        x = np.where(upper, hi, np.where(lower, lo, 0.0))
        if free.any():
            fixed = ~free
            rhs = b[free] - A[free][:, fixed] @ x[fixed]
            Aff = A[free][:, free].tocsc()
            x[free] = spla.spsolve(Aff, rhs)
            _check_residual(Aff, x[free], rhs, "crack")
        lam = b - A @ x
        lam[free] = 0.0
        feasible = np.all(x >= lo - xtol) and np.all(x <= hi + xtol)
        signs = np.all(lam[upper] >= -rtol * scale) and np.all(lam[lower] <= rtol * scale)
        if feasible and signs:
            break
    else:
        raise SolverDiverged("active-set iteration did not settle")
    # tiny excursions of the free set stay inside the box
    return np.clip(x, lo, hi)


def solve_crack(disc: Discretization, mat: MaterialParams, u: np.ndarray, phi_bound: np.ndarray,
                phi_start: np.ndarray | None = None, refs=None) -> np.ndarray:
    """Crack field minimizing the energy at fixed ``u`` with ``0 <= phi <= phi_bound``."""
    K0, Kl = refs or reference_matrices(mat)
    n = disc.mesh.n_vertices
    We = element_strain_energy(disc, K0, u)
    react = np.repeat((2 * We / 4 + disc.h ** 2 / 4 * mat.Gc / mat.d)[:, None], 4, axis=1)
    A = sp.csr_matrix((react.ravel(), (disc.corners.ravel(), disc.corners.ravel())), shape=(n, n))
    A = A + _assemble(disc.corners, np.broadcast_to(mat.Gc * mat.d * Kl, (len(disc.corners), 4, 4)), n)
    b = np.bincount(disc.corners.ravel(), weights=np.repeat(disc.h ** 2 / 4 * mat.Gc / mat.d, 4), minlength=n)
    Ar = (disc.P.T @ A @ disc.P).tocsr()
    br = disc.P.T @ b
    hi = phi_bound[disc.free]
    start = (phi_start if phi_start is not None else phi_bound)[disc.free]
    x = box_qp(Ar, br, np.zeros_like(hi), hi, start)
    return disc.P @ x


def _segment_distance(points: np.ndarray, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    L2 = float(ab @ ab)
    t = np.zeros(len(points)) if L2 == 0 else np.clip((points - a) @ ab / L2, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def initial_phi(points: np.ndarray, spec: DomainSpec, scen: ScenarioConfig, mat: MaterialParams) -> np.ndarray:
    """Zero within ``d/2`` of the initial crack, ramping to 1 as ``1 - exp(-dist/d)`` beyond."""
    if scen.crack_length == 0:
        return np.ones(len(points))
    a, b = scen.segment(spec.side_length)
    dist = _segment_distance(points, a, b)
    return np.where(dist <= mat.d / 2, 0.0, 1.0 - np.exp(-(dist - mat.d / 2) / mat.d))


@dataclass
class PFState:
    mesh: RefinedMesh
    phi: np.ndarray
    u: np.ndarray
    applied: tuple[float, float] = (0.0, 0.0)
    energy: float = float("nan")
    bc: str = "clamped"
    _disc: Discretization | None = field(default=None, repr=False)

    @property
    def disc(self) -> Discretization:
        if self._disc is None or self._disc.mesh is not self.mesh:
            self._disc = Discretization.build(self.mesh)
        return self._disc


def init_state(spec: DomainSpec, scen: ScenarioConfig, mat: MaterialParams,
               crit: RefineCriterion | None = None, max_passes: int = 10) -> PFState:
    crit = crit or RefineCriterion(band_width=2 * mat.d)
    if scen.crack_length > 0:
        for p in scen.segment(spec.side_length):
            if not (-1e-12 <= p[0] <= spec.side_length + 1e-12 and -1e-12 <= p[1] <= spec.side_length + 1e-12):
                raise CrackOutsideDomain(f"crack end point {p} lies outside the domain")
    mesh = build_base_mesh(spec)
    for _ in range(max_passes):
        phi = initial_phi(mesh.positions, spec, scen, mat)
        new = regrid(mesh, phi, crit)
        if new == mesh:
            break
        mesh = new
    phi = initial_phi(mesh.positions, spec, scen, mat)
    # hanging vertices take the value the solver's constraint gives them, otherwise
    # the first load step would lift them above the initial field
    disc = Discretization.build(mesh)
    phi = disc.P @ phi[disc.free]
    return PFState(mesh, phi, np.zeros((mesh.n_vertices, 2)))


def crack_extent(mesh: RefinedMesh, phi: np.ndarray, level: float = TIP_PHI) -> tuple[float, float] | None:
    """Smallest and largest x of vertices inside the crack, or None."""
    inside = phi < level
    if not inside.any():
        return None
    x = mesh.positions[inside, 0]
    return float(x.min()), float(x.max())


def crack_tip_x(mesh: RefinedMesh, phi: np.ndarray, kind: str) -> float:
    ext = crack_extent(mesh, phi)
    if ext is None:
        return float("nan")
    return ext[0] if kind == "right-edge" else ext[1]


def reached_far_boundary(mesh: RefinedMesh, phi: np.ndarray, kind: str) -> bool:
    x = mesh.vertices[:, 0]
    inside = phi < TIP_PHI
    left = bool(np.any(inside & (x == 0)))
    right = bool(np.any(inside & (x == mesh.spec.finest)))
    if kind == "left-edge":
        return right
    if kind == "right-edge":
        return left
    return left or right


def staggered_solve(state: PFState, mat: MaterialParams, bound: np.ndarray, tol: float = 1e-4,
                    max_iter: int = 5000, energies: list | None = None, refs=None) -> None:
    """Alternate elastic and crack solves at fixed load until ``max|dphi| < tol``."""
    disc = state.disc
    for _ in range(max_iter):
        state.u = solve_elastic(disc, mat, state.phi, state.applied, bc=state.bc, refs=refs)
        if energies is not None:
            energies.append(total_energy(disc, mat, state.phi, state.u, refs))
        phi = solve_crack(disc, mat, state.u, bound, state.phi, refs=refs)
        change = float(np.max(np.abs(phi - state.phi))) if len(phi) else 0.0
        state.phi = phi
        if energies is not None:
            energies.append(total_energy(disc, mat, state.phi, state.u, refs))
        if change < tol:
            break
    else:
        raise SolverDiverged(f"staggered iteration did not reach |dphi| < {tol:g} in {max_iter} sweeps")
    state.energy = total_energy(disc, mat, state.phi, state.u, refs)


def load_step(state: PFState, scen: ScenarioConfig, mat: MaterialParams, crit: RefineCriterion,
              tol: float = 1e-4, max_regrids: int = 5, diagnostics: dict | None = None, refs=None) -> None:
    du, dv = scen.load_vector()
    state.applied = (state.applied[0] + du, state.applied[1] + dv)
    bound = state.phi.copy()
    passes = []
    for _ in range(max_regrids + 1):
        energies: list[float] = []
        staggered_solve(state, mat, bound, tol, energies=energies, refs=refs)
        passes.append(energies)
        new = regrid(state.mesh, state.phi, crit)
        if new == state.mesh:
            break
        old = state.mesh
        state.phi = old.transfer(state.phi, new)
        state.u = old.transfer(state.u, new)
        bound = old.transfer(bound, new)
        state.mesh = new
    if diagnostics is not None:
        diagnostics["energies"] = passes


def _frame(state: PFState, scen: ScenarioConfig) -> Frame:
    return Frame(state.mesh, state.phi.copy(), state.u[:, 0].copy(), state.u[:, 1].copy(),
                 scen.load_vector(), state.applied, state.energy)


def run_simulation(spec: DomainSpec, scen: ScenarioConfig, mat: MaterialParams | None = None,
                   crit: RefineCriterion | None = None, tol: float = 1e-4, bc: str = "clamped",
                   diagnostics: list | None = None, stop_on_failure: bool = True) -> SimulationRecord:
    """Quasi-static loading history, one frame per load step plus the initial frame."""
    mat = mat or MaterialParams()
    crit = crit or RefineCriterion(band_width=2 * mat.d)
    refs = reference_matrices(mat)
    state = init_state(spec, scen, mat, crit)
    state.bc = bc
    state.energy = total_energy(state.disc, mat, state.phi, state.u, refs)
    frames = [_frame(state, scen)]
    for step in range(1, scen.steps + 1):
        info: dict = {}
        try:
            load_step(state, scen, mat, crit, tol, diagnostics=info, refs=refs)
        except SolverDiverged as exc:
            raise SolverDiverged(str(exc), step) from exc
        if diagnostics is not None:
            diagnostics.append(info)
        frames.append(_frame(state, scen))
        if stop_on_failure and reached_far_boundary(state.mesh, state.phi, scen.kind):
            break
    return SimulationRecord(spec, scen, mat, frames, crit, {"bc": bc, "tol": tol})


def frame_csv_rows(rec: SimulationRecord) -> list[tuple]:
    """``(step, energy, crack_tip_x, max_abs_u)`` per frame."""
    rows = []
    for n, f in enumerate(rec.frames):
        umax = float(np.max(np.hypot(f.u, f.v))) if f.mesh.n_vertices else 0.0
        rows.append((n, f.energy, crack_tip_x(f.mesh, f.phi, rec.scenario.kind), umax))
    return rows

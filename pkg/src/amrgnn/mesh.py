"""Block-structured quadtree meshes on a square domain.

All geometry is held in integer units of the finest cell size so that
balance checks, mirroring and level filtering are exact.  A cell is the
triple ``(level, i, j)``; at level ``l`` it spans ``2**(L - l)`` finest units
per side, where ``L`` is ``DomainSpec.max_level``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class InvalidSpec(ValueError):
    pass


class LevelOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    side_length: float = 0.5
    base_resolution: int = 16
    max_level: int = 4

    def __post_init__(self):
        if not self.side_length > 0:
            raise InvalidSpec(f"side_length must be positive, got {self.side_length}")
        if int(self.base_resolution) != self.base_resolution or self.base_resolution < 2:
            raise InvalidSpec(f"base_resolution must be an integer >= 2, got {self.base_resolution}")
        if int(self.max_level) != self.max_level or self.max_level < 0:
            raise InvalidSpec(f"max_level must be an integer >= 0, got {self.max_level}")

    @property
    def finest(self) -> int:
        """Number of finest-level cells per side."""
        return self.base_resolution << self.max_level

    @property
    def unit(self) -> float:
        """Edge length of a finest-level cell in meters."""
        return self.side_length / self.finest

    def cell_units(self, level: int) -> int:
        return 1 << (self.max_level - level)

    def to_dict(self) -> dict:
        return {"side_length": self.side_length, "base_resolution": self.base_resolution,
                "max_level": self.max_level}


@dataclass(frozen=True)
class RefineCriterion:
    threshold: float = 0.95
    band_width: float = 0.025

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise InvalidSpec(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.band_width > 0:
            raise InvalidSpec(f"band_width must be positive, got {self.band_width}")


def _vertex_birth_level(coords: np.ndarray, spec: DomainSpec) -> np.ndarray:
    # smallest level whose grid contains the coordinate
    L = spec.max_level
    level = np.full(coords.shape, L, dtype=np.int64)
    for lev in range(L - 1, -1, -1):
        on_grid = coords % (1 << (L - lev)) == 0
        level[on_grid] = lev
    return level.max(axis=1)


@dataclass(frozen=True, eq=False)
class RefinedMesh:
    """Immutable quadtree leaf set with derived vertices and edges.

    ``cells`` is an ``(n, 3)`` int array of ``(level, i, j)`` rows kept in
    lexicographic order.  Vertex ids index ``vertices`` which are sorted by
    ``(y, x)`` in finest integer units.
    """

    spec: DomainSpec
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        cells = cells[order]
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    def __eq__(self, other):
        if not isinstance(other, RefinedMesh):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash((self.spec, self.cells.tobytes()))

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def cell_size_units(self) -> np.ndarray:
        return (1 << (self.spec.max_level - self.cells[:, 0])).astype(np.int64)

    @cached_property
    def cell_origin_units(self) -> np.ndarray:
        s = self.cell_size_units
        return np.stack([self.cells[:, 1] * s, self.cells[:, 2] * s], axis=1)

    @cached_property
    def _corner_units(self) -> np.ndarray:
        # (n, 4, 2) corners ordered lower-left, lower-right, upper-right, upper-left
        o = self.cell_origin_units
        s = self.cell_size_units[:, None]
        offs = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.int64)
        return o[:, None, :] + offs[None, :, :] * s[:, :, None]

    @cached_property
    def vertices(self) -> np.ndarray:
        """Vertex coordinates in finest integer units, shape ``(nv, 2)``."""
        pts = self._corner_units.reshape(-1, 2)
        keys = np.unique(pts[:, 1] * (self.spec.finest + 1) + pts[:, 0])
        n1 = self.spec.finest + 1
        v = np.stack([keys % n1, keys // n1], axis=1)
        v.setflags(write=False)
        return v

    @cached_property
    def vertex_keys(self) -> np.ndarray:
        return self.vertices[:, 1] * (self.spec.finest + 1) + self.vertices[:, 0]

    def key_of(self, units: np.ndarray) -> np.ndarray:
        units = np.asarray(units, dtype=np.int64)
        return units[..., 1] * (self.spec.finest + 1) + units[..., 0]

    def lookup(self, units: np.ndarray) -> np.ndarray:
        """Vertex ids for integer coordinates; -1 where no vertex exists."""
        keys = self.key_of(units)
        idx = np.searchsorted(self.vertex_keys, keys)
        idx = np.clip(idx, 0, len(self.vertex_keys) - 1)
        return np.where(self.vertex_keys[idx] == keys, idx, -1)

    @cached_property
    def positions(self) -> np.ndarray:
        """Vertex coordinates in meters."""
        return self.vertices.astype(np.float64) * self.spec.unit

    @cached_property
    def vertex_level(self) -> np.ndarray:
        return _vertex_birth_level(self.vertices, self.spec)

    @cached_property
    def cell_corners(self) -> np.ndarray:
        """Vertex ids of each cell's corners, ``(n, 4)`` in ll, lr, ur, ul order."""
        return self.lookup(self._corner_units)

    @cached_property
    def hanging(self) -> dict[int, tuple[int, int]]:
        """Hanging vertex id -> the two endpoint ids of the coarse side it splits."""
        out: dict[int, tuple[int, int]] = {}
        corners = self._corner_units
        cids = self.cell_corners
        for a, b in ((0, 1), (1, 2), (2, 3), (3, 0)):
            mid = (corners[:, a] + corners[:, b]) // 2
            ok = self.cell_size_units > 1
            vid = np.where(ok, self.lookup(mid), -1)
            for c in np.nonzero(vid >= 0)[0]:
                out[int(vid[c])] = (int(cids[c, a]), int(cids[c, b]))
        return out

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected edges ``(ne, 2)`` with ``a < b``, sorted lexicographically."""
        corners = self._corner_units
        cids = self.cell_corners
        pairs = []
        for a, b in ((0, 1), (1, 2), (3, 2), (0, 3)):
            mid = (corners[:, a] + corners[:, b]) // 2
            vid = np.where(self.cell_size_units > 1, self.lookup(mid), -1)
            split = vid >= 0
            pairs.append(np.stack([cids[~split, a], cids[~split, b]], axis=1))
            pairs.append(np.stack([cids[split, a], vid[split]], axis=1))
            pairs.append(np.stack([vid[split], cids[split, b]], axis=1))
        e = np.concatenate(pairs, axis=0)
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def _leaf_index(self) -> dict[tuple[int, int, int], int]:
        return {tuple(map(int, c)): n for n, c in enumerate(self.cells)}

    def locate(self, units: np.ndarray) -> np.ndarray:
        """Index of the finest leaf containing each point (integer or float units)."""
        units = np.asarray(units, dtype=np.float64).reshape(-1, 2)
        L = self.spec.max_level
        N = self.spec.finest
        out = np.full(len(units), -1, dtype=np.int64)
        index = self._leaf_index
        levels = sorted(set(self.cells[:, 0].tolist()), reverse=True)
        for p, (x, y) in enumerate(units):
            for lev in levels:
                s = 1 << (L - lev)
                n = N // s
                i = min(int(x // s), n - 1)
                j = min(int(y // s), n - 1)
                hit = index.get((lev, i, j))
                if hit is not None:
                    out[p] = hit
                    break
        return out

    def interpolate(self, values: np.ndarray, units: np.ndarray) -> np.ndarray:
        """Evaluate a vertex field at points given in finest units.

        Points that coincide with a vertex take its value exactly; all others
        are bilinear in the corners of the finest leaf containing them.
        """
        values = np.asarray(values, dtype=np.float64)
        units = np.asarray(units).reshape(-1, 2)
        out_shape = (len(units),) + values.shape[1:]
        out = np.empty(out_shape, dtype=np.float64)
        exact = -np.ones(len(units), dtype=np.int64)
        is_int = np.all(np.asarray(units) == np.round(units), axis=1)
        if is_int.any():
            exact[is_int] = self.lookup(np.round(units[is_int]).astype(np.int64))
        hit = exact >= 0
        out[hit] = values[exact[hit]]
        rest = np.nonzero(~hit)[0]
        if len(rest):
            pts = units[rest].astype(np.float64)
            leaves = self.locate(pts)
            org = self.cell_origin_units[leaves].astype(np.float64)
            size = self.cell_size_units[leaves].astype(np.float64)
            xi = (pts[:, 0] - org[:, 0]) / size
            eta = (pts[:, 1] - org[:, 1]) / size
            w = np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=1)
            cv = values[self.cell_corners[leaves]]
            w = w.reshape(w.shape + (1,) * (values.ndim - 1))
            out[rest] = (w * cv).sum(axis=1)
        return out

    def transfer(self, values: np.ndarray, target: "RefinedMesh") -> np.ndarray:
        """Carry a vertex field over to another mesh on the same domain."""
        if target.spec != self.spec:
            raise InvalidSpec("meshes live on different domains")
        if target is self or target == self:
            return np.array(values, dtype=np.float64, copy=True)
        return self.interpolate(values, target.vertices)


def build_base_mesh(spec: DomainSpec) -> RefinedMesh:
    n = spec.base_resolution
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cells = np.stack([np.zeros(n * n, dtype=np.int64), i.ravel(), j.ravel()], axis=1)
    return RefinedMesh(spec, cells)


def _balance(leaves: set[tuple[int, int, int]], spec: DomainSpec) -> set[tuple[int, int, int]]:
    """Split leaves until edge-adjacent leaves differ by at most one level."""
    L = spec.max_level
    N = spec.finest
    leaves = set(leaves)

    def find(x: int, y: int):
        for lev in range(L, -1, -1):
            s = 1 << (L - lev)
            key = (lev, x // s, y // s)
            if key in leaves:
                return key
        return None

    queue = sorted(leaves, reverse=True)
    while queue:
        lev, i, j = queue.pop()
        if (lev, i, j) not in leaves or lev < 2:
            continue
        s = 1 << (L - lev)
        x0, y0 = i * s, j * s
        h = s // 2 if s > 1 else 0
        probes = ((x0 - 1, y0 + h), (x0 + s, y0 + h), (x0 + h, y0 - 1), (x0 + h, y0 + s))
        for px, py in probes:
            if not (0 <= px < N and 0 <= py < N):
                continue
            nb = find(px, py)
            while nb is not None and nb[0] < lev - 1:
                nl, ni, nj = nb
                leaves.remove(nb)
                kids = [(nl + 1, 2 * ni + a, 2 * nj + b) for a in (0, 1) for b in (0, 1)]
                leaves.update(kids)
                queue.extend(kids)
                nb = find(px, py)
    return leaves


def is_balanced(mesh: RefinedMesh) -> bool:
    """Exact 2:1 check: paint leaf levels onto the finest grid and compare each
    leaf with the strips of finest cells just outside its four edges."""
    N = mesh.spec.finest
    grid = np.empty((N, N), dtype=np.int64)
    o = mesh.cell_origin_units
    s = mesh.cell_size_units
    lev = mesh.cells[:, 0]
    for (x, y), w, lv in zip(o, s, lev):
        grid[x:x + w, y:y + w] = lv
    for (x, y), w, lv in zip(o, s, lev):
        strips = []
        if x > 0:
            strips.append(grid[x - 1, y:y + w])
        if x + w < N:
            strips.append(grid[x + w, y:y + w])
        if y > 0:
            strips.append(grid[x:x + w, y - 1])
        if y + w < N:
            strips.append(grid[x:x + w, y + w])
        for st in strips:
            if st.max() > lv + 1 or st.min() < lv - 1:
                return False
    return True


def _marked_boxes(mesh: RefinedMesh, phi: np.ndarray, threshold: float) -> np.ndarray:
    cmin = phi[mesh.cell_corners].min(axis=1)
    sel = cmin < threshold
    o = mesh.cell_origin_units[sel]
    s = mesh.cell_size_units[sel]
    return np.stack([o[:, 0], o[:, 1], o[:, 0] + s, o[:, 1] + s], axis=1)


def _refine_near(spec: DomainSpec, boxes: np.ndarray, band_units: float) -> set[tuple[int, int, int]]:
    """Leaves after splitting, level by level, every cell within the band of a box."""
    L = spec.max_level
    band2 = band_units * band_units
    n = spec.base_resolution
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    front = np.stack([i.ravel(), j.ravel()], axis=1).astype(np.int64)
    leaves: set[tuple[int, int, int]] = set()
    for lev in range(L + 1):
        near = np.zeros(len(front), dtype=bool)
        if lev < L and len(boxes):
            size = 1 << (L - lev)
            lo = front * size
            for start in range(0, len(front), 2048):
                c = lo[start:start + 2048, None, :]
                dx = np.maximum(0, np.maximum(boxes[None, :, 0] - (c[..., 0] + size), c[..., 0] - boxes[None, :, 2]))
                dy = np.maximum(0, np.maximum(boxes[None, :, 1] - (c[..., 1] + size), c[..., 1] - boxes[None, :, 3]))
                near[start:start + 2048] = np.any(dx * dx + dy * dy <= band2, axis=1)
        leaves.update((lev, int(a), int(b)) for a, b in front[~near])
        split = front[near]
        front = np.concatenate([2 * split + [a, b] for a in (0, 1) for b in (0, 1)]) if len(split) else split
    return leaves


def _regrid_once(mesh: RefinedMesh, phi: np.ndarray, crit: RefineCriterion) -> RefinedMesh:
    spec = mesh.spec
    boxes = _marked_boxes(mesh, phi, crit.threshold)
    leaves = _refine_near(spec, boxes, crit.band_width / spec.unit)
    leaves = _balance(leaves, spec)
    return RefinedMesh(spec, np.array(sorted(leaves), dtype=np.int64).reshape(-1, 3))


def regrid(mesh: RefinedMesh, phi: np.ndarray, crit: RefineCriterion | None = None,
           max_passes: int = 10) -> RefinedMesh:
    """Rebuild the leaf set around the crack described by ``phi``.

    Leaves whose smallest corner value falls below the threshold are marked;
    every cell within ``band_width`` of a marked leaf goes to ``max_level``
    and everything else stays as coarse as 2:1 balance allows.  Marking is
    repeated on the new mesh, with ``phi`` carried over from the input mesh,
    until the leaf set stops changing, which makes the operation idempotent.
    """
    crit = crit or RefineCriterion()
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (mesh.n_vertices,):
        raise ValueError(f"phi must have one value per vertex ({mesh.n_vertices}), got {phi.shape}")
    current, current_phi = mesh, phi
    for _ in range(max_passes):
        new = _regrid_once(current, current_phi, crit)
        if new == current:
            return current
        current = new
        current_phi = mesh.transfer(phi, new)
    return current


def restrict_to_levels(mesh: RefinedMesh, k: int) -> RefinedMesh:
    """Replace every leaf finer than ``k`` by its level-``k`` ancestor."""
    if not 0 <= k <= mesh.spec.max_level:
        raise LevelOutOfRange(f"level {k} outside 0..{mesh.spec.max_level}")
    if k == mesh.spec.max_level:
        return mesh
    c = mesh.cells
    shift = np.maximum(c[:, 0] - k, 0)
    out = np.stack([np.minimum(c[:, 0], k), c[:, 1] >> shift, c[:, 2] >> shift], axis=1)
    return RefinedMesh(mesh.spec, np.unique(out, axis=0))


def _bilinear_corners(spec: DomainSpec, units: np.ndarray, coarse_level: int) -> tuple[np.ndarray, np.ndarray]:
    """Corners ``(n, 4, 2)`` in integer units and weights ``(n, 4)`` of the containing
    coarse cell, corner order (0,0), (1,0), (1,1), (0,1)."""
    s = spec.cell_units(coarse_level)
    n = spec.finest // s
    u = np.asarray(units, dtype=np.int64).reshape(-1, 2)
    ij = np.minimum(u // s, n - 1)
    xi, eta = ((u - ij * s) / s).T
    offs = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=np.int64)
    corners = (ij[:, None, :] + offs[None]) * s
    w = np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=1)
    return corners, w


def bilinear_parents(spec: DomainSpec, units: np.ndarray, coarse_level: int) -> list[list[tuple[tuple[int, int], float]]]:
    """Corners (integer units) and bilinear weights of the containing coarse cell."""
    corners, w = _bilinear_corners(spec, units, coarse_level)
    return [[((int(c[0]), int(c[1])), float(wk)) for c, wk in zip(cs, ws) if wk > 0]
            for cs, ws in zip(corners, w)]


def vertex_parents(mesh: RefinedMesh, k: int) -> dict[int, list[tuple[int, float]]]:
    """Map each vertex born at level ``k`` to its level-``k-1`` parents.

    Ids on both sides are vertex ids of ``mesh``.  Weights are bilinear in
    the containing level-``k-1`` cell, so they are non-negative and sum to 1.
    """
    if not 1 <= k <= mesh.spec.max_level:
        raise LevelOutOfRange(f"level {k} outside 1..{mesh.spec.max_level}")
    fine = np.nonzero(mesh.vertex_level == k)[0]
    corners, w = _bilinear_corners(mesh.spec, mesh.vertices[fine], k - 1)
    ids = mesh.lookup(corners)
    used = w > 0
    if np.any(ids[used] < 0):
        bad = fine[np.nonzero((ids < 0) & used)[0][0]]
        raise AssertionError(f"vertex {bad} has a parent missing from the mesh")
    return {int(vid): [(int(i), float(wk)) for i, wk, u in zip(row_ids, row_w, row_used) if u]
            for vid, row_ids, row_w, row_used in zip(fine, ids, w, used)}


def mirror_mesh(mesh: RefinedMesh) -> tuple[RefinedMesh, np.ndarray]:
    """Reflect about ``x = side/2``.

    Returns the mirrored mesh and ``perm`` such that mirrored vertex ``i``
    is the image of original vertex ``perm[i]``.
    """
    c = mesh.cells
    n_at = mesh.spec.base_resolution << c[:, 0]
    cells = np.stack([c[:, 0], n_at - 1 - c[:, 1], c[:, 2]], axis=1)
    out = RefinedMesh(mesh.spec, cells)
    img = out.vertices.copy()
    img[:, 0] = mesh.spec.finest - img[:, 0]
    perm = mesh.lookup(img)
    return out, perm

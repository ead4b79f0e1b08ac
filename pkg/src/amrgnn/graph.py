"""Node/edge feature graphs on level-restricted meshes and cross-level maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import RefinedMesh, restrict_to_levels, vertex_parents

N_NODE_FEATURES = 7
N_EDGE_FEATURES = 3
FEATURE_NAMES = ("x", "y", "u", "v", "phi", "u0", "v0")


class MissingField(ValueError):
    pass


@dataclass(frozen=True)
class FeatureScales:
    """Normalization constants: positions by ``side_length``, displacements
    and loads by ``displacement``, crack field unscaled."""

    side_length: float = 0.5
    displacement: float = 1.0

    def to_dict(self) -> dict:
        return {"side_length": self.side_length, "displacement": self.displacement}


@dataclass(frozen=True, eq=False)
class LevelGraph:
    """Graph of the mesh restricted to levels ``0..level``.

    ``node_ids`` index vertices of the full mesh.  ``senders``/``receivers``
    index rows of this graph, are ordered by ``(receiver, sender)`` and
    include one self-loop per node.  Edge features are ``(b_sr, dx, dy)``
    with ``dx, dy`` the normalized receiver-minus-sender offset.
    """

    level: int
    node_ids: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    node_features: np.ndarray = field(repr=False)
    edge_features: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.senders)


def directed_edges(mesh: RefinedMesh) -> tuple[np.ndarray, np.ndarray]:
    """Both orientations of each mesh edge plus self-loops, sorted by receiver."""
    e = mesh.edges
    n = mesh.n_vertices
    loops = np.arange(n, dtype=np.int64)
    send = np.concatenate([e[:, 0], e[:, 1], loops])
    recv = np.concatenate([e[:, 1], e[:, 0], loops])
    order = np.lexsort((send, recv))
    return send[order], recv[order]


def node_features(mesh: RefinedMesh, phi, u, v, load, scales: FeatureScales) -> np.ndarray:
    n = mesh.n_vertices
    cols = []
    for name, arr in (("phi", phi), ("u", u), ("v", v)):
        if arr is None:
            raise MissingField(f"{name} is missing")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (n,):
            raise MissingField(f"{name} has shape {arr.shape}, mesh has {n} vertices")
        if not np.all(np.isfinite(arr)):
            raise MissingField(f"{name} has non-finite entries")
        cols.append(arr)
    phi, u, v = cols
    pos = mesh.positions / scales.side_length
    s = scales.displacement
    u0, v0 = load
    feats = np.empty((n, N_NODE_FEATURES))
    feats[:, 0:2] = pos
    feats[:, 2] = u / s
    feats[:, 3] = v / s
    feats[:, 4] = phi
    feats[:, 5] = u0 / s
    feats[:, 6] = v0 / s
    return feats


def extract_graph(mesh: RefinedMesh, phi, u, v, load, k: int | None = None,
                  scales: FeatureScales | None = None) -> LevelGraph:
    """Build the level-``k`` graph; fields are given on all vertices of ``mesh``."""
    scales = scales or FeatureScales(side_length=mesh.spec.side_length)
    k = mesh.spec.max_level if k is None else k
    feats = node_features(mesh, phi, u, v, load, scales)
    sub = restrict_to_levels(mesh, k)
    ids = mesh.lookup(sub.vertices) if sub is not mesh else np.arange(mesh.n_vertices)
    return _graph_on(sub, k, ids, feats[ids], scales)


def _graph_on(sub: RefinedMesh, k: int, ids: np.ndarray, feats: np.ndarray, scales: FeatureScales) -> LevelGraph:
    send, recv = directed_edges(sub)
    pos = sub.positions / scales.side_length
    ef = np.empty((len(send), N_EDGE_FEATURES))
    ef[:, 0] = 1.0
    ef[:, 1:] = pos[recv] - pos[send]
    return LevelGraph(k, ids, send, recv, feats, ef)


@dataclass(frozen=True, eq=False)
class TransferMap:
    """Single-level feature transfer between levels ``fine_level`` and ``fine_level - 1``.

    Node ids are full-mesh vertex ids.  ``shared`` gives, for each coarse
    node, its row among the fine nodes.  Fine-only nodes carry bilinear
    parent weights as ``(fine_row, coarse_row, weight)`` triplets.
    """

    direction: str
    fine_level: int
    fine_ids: np.ndarray
    coarse_ids: np.ndarray
    shared: np.ndarray
    fine_rows: np.ndarray
    coarse_rows: np.ndarray
    weights: np.ndarray

    @property
    def n_fine(self) -> int:
        return len(self.fine_ids)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_ids)

    @property
    def fine_only(self) -> np.ndarray:
        mask = np.ones(self.n_fine, dtype=bool)
        mask[self.shared] = False
        return np.nonzero(mask)[0]

    @cached_property
    def up_matrix(self) -> sp.csr_matrix:
        """``(n_fine, n_coarse)``: copy shared rows, interpolate the rest."""
        rows = np.concatenate([self.shared, self.fine_rows])
        cols = np.concatenate([np.arange(self.n_coarse), self.coarse_rows])
        vals = np.concatenate([np.ones(self.n_coarse), self.weights])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_fine, self.n_coarse))

    @cached_property
    def down_matrix(self) -> sp.csr_matrix:
        """``(n_coarse, n_fine)``: own row plus count-normalized weighted fine rows."""
        count = np.bincount(self.coarse_rows, minlength=self.n_coarse).astype(np.float64)
        scale = 1.0 / np.maximum(1.0, count)
        rows = np.concatenate([np.arange(self.n_coarse), self.coarse_rows])
        cols = np.concatenate([self.shared, self.fine_rows])
        vals = np.concatenate([np.ones(self.n_coarse), self.weights * scale[self.coarse_rows]])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_coarse, self.n_fine))

    def as_direction(self, direction: str) -> "TransferMap":
        if direction not in ("down", "up"):
            raise ValueError(direction)
        return TransferMap(direction, self.fine_level, self.fine_ids, self.coarse_ids, self.shared,
                           self.fine_rows, self.coarse_rows, self.weights)


def level_node_ids(mesh: RefinedMesh, k: int) -> np.ndarray:
    """Full-mesh ids of the vertices kept by ``restrict_to_levels(mesh, k)``, ascending."""
    return np.nonzero(mesh.vertex_level <= k)[0]


def transfer_map(mesh: RefinedMesh, k: int, direction: str = "down") -> TransferMap:
    fine_ids = level_node_ids(mesh, k)
    coarse_ids = level_node_ids(mesh, k - 1)
    row_of = np.full(mesh.n_vertices, -1, dtype=np.int64)
    row_of[fine_ids] = np.arange(len(fine_ids))
    crow_of = np.full(mesh.n_vertices, -1, dtype=np.int64)
    crow_of[coarse_ids] = np.arange(len(coarse_ids))
    parents = vertex_parents(mesh, k)
    fr, cr, w = [], [], []
    for vid in sorted(parents):
        for pid, weight in parents[vid]:
            fr.append(row_of[vid])
            cr.append(crow_of[pid])
            w.append(weight)
    return TransferMap(direction, k, fine_ids, coarse_ids, row_of[coarse_ids],
                       np.array(fr, dtype=np.int64), np.array(cr, dtype=np.int64),
                       np.array(w, dtype=np.float64))


def present_levels(mesh: RefinedMesh) -> int:
    """Finest level that actually contributes vertices."""
    return int(mesh.vertex_level.max()) if mesh.n_vertices else 0


def build_transfer_maps(mesh: RefinedMesh) -> list[TransferMap]:
    """Down maps for ``k = top..1`` followed by up maps for ``k = 1..top``,
    where ``top`` is the finest level present in the mesh."""
    top = present_levels(mesh)
    down = [transfer_map(mesh, k, "down") for k in range(top, 0, -1)]
    up = [m.as_direction("up") for m in reversed(down)]
    return down + up

"""Multiscale encode / down-MP / coarse-MP / up-MP / decode pipeline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, concat, sparse_matmul
from .graph import (N_EDGE_FEATURES, N_NODE_FEATURES, FeatureScales, LevelGraph, TransferMap,
                    _graph_on, level_node_ids, node_features, present_levels, transfer_map)
from .mesh import RefineCriterion, RefinedMesh, regrid, restrict_to_levels
from .nn import (GraphTransformerParams, MLPParams, graph_transformer_forward, mlp_forward,
                 skip_aggregate)

FAMILIES = ("FSR", "TSR", "SSR")


class HierarchyMismatch(ValueError):
    pass


class NonFiniteOutput(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"rollout step {step}: {message}")
        self.step = step


class IncompatibleArchitecture(ValueError):
    pass


class MapMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    """Which levels each downscale stage jumps between, plus layer sizes.

    FSR removes one level per stage, TSR two, SSR all of them at once; the
    upscale path visits the same stages in reverse.
    """

    family: str = "SSR"
    max_level: int = 4
    dm: int = 128
    heads: int = 4
    encoder_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (128, 128)
    residual: str = "plain"
    skip_agg: str = "sum"
    down_rule: str = "own+weighted-mean"

    def __post_init__(self):
        fam = self.family.upper()
        if fam not in FAMILIES:
            raise ValueError(f"unknown architecture family {self.family!r}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(self.decoder_hidden))
        if self.dm % self.heads:
            raise ValueError("dm must be divisible by heads")

    @property
    def stages(self) -> list[tuple[int, int]]:
        L = self.max_level
        step = {"FSR": 1, "TSR": 2, "SSR": max(L, 1)}[self.family]
        out, k = [], L
        while True:
            nxt = max(k - step, 0)
            out.append((k, nxt))
            if nxt == 0:
                return out
            k = nxt

    @property
    def n_mp_blocks(self) -> int:
        return 2 * len(self.stages) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


@dataclass
class MultiscaleModel:
    config: ArchitectureConfig
    mlp_in: MLPParams
    down: list[GraphTransformerParams]
    coarse: GraphTransformerParams
    up: list[GraphTransformerParams]
    mlp_out: MLPParams
    scales: FeatureScales = field(default_factory=FeatureScales)
    seed: int = 0
    mp_calls: int = 0

    @classmethod
    def init(cls, config: ArchitectureConfig, scales: FeatureScales | None = None, seed: int = 0) -> "MultiscaleModel":
        rng = np.random.default_rng(seed)
        dm, H = config.dm, config.heads
        n = len(config.stages)
        mlp_in = MLPParams.init(rng, [N_NODE_FEATURES, *config.encoder_hidden, dm])
        down = [GraphTransformerParams.init(rng, dm, H, N_EDGE_FEATURES) for _ in range(n)]
        coarse = GraphTransformerParams.init(rng, dm, H, N_EDGE_FEATURES)
        up = [GraphTransformerParams.init(rng, dm, H, N_EDGE_FEATURES) for _ in range(n)]
        mlp_out = MLPParams.init(rng, [dm, *config.decoder_hidden, 3])
        return cls(config, mlp_in, down, coarse, up, mlp_out, scales or FeatureScales(), seed)

    def named_parameters(self) -> dict[str, "Tensor"]:
        out = dict(self.mlp_in.named_parameters("mlp_in"))
        for i, blk in enumerate(self.down):
            out.update(blk.named_parameters(f"down.{i}"))
        out.update(self.coarse.named_parameters("coarse"))
        for i, blk in enumerate(self.up):
            out.update(blk.named_parameters(f"up.{i}"))
        out.update(self.mlp_out.named_parameters("mlp_out"))
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(arrays):
            missing = sorted(set(params) ^ set(arrays))
            raise IncompatibleArchitecture(f"parameter sets differ: {missing[:5]}")
        for k, p in params.items():
            if p.shape != arrays[k].shape:
                raise IncompatibleArchitecture(f"{k}: shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64, copy=True)


@dataclass(frozen=True, eq=False)
class GraphHierarchy:
    """Graphs for every level a stage touches and the single-level maps between them."""

    mesh: RefinedMesh
    graphs: dict[int, LevelGraph]
    maps: dict[int, TransferMap]
    up_maps: dict[int, TransferMap]
    top: int

    @property
    def full(self) -> LevelGraph:
        return self.graphs[max(self.graphs)]


def build_hierarchy(mesh: RefinedMesh, phi, u, v, load, config: ArchitectureConfig,
                    scales: FeatureScales) -> GraphHierarchy:
    if mesh.spec.max_level != config.max_level:
        raise HierarchyMismatch(f"mesh has {mesh.spec.max_level} levels above base, "
                                f"architecture expects {config.max_level}")
    feats = node_features(mesh, phi, u, v, load, scales)
    top = present_levels(mesh)
    levels = sorted({lv for st in config.stages for lv in st})
    graphs: dict[int, LevelGraph] = {}
    for k in levels:
        eff = min(k, top)
        sub = restrict_to_levels(mesh, eff)
        ids = level_node_ids(mesh, eff)
        graphs[k] = _graph_on(sub, k, ids, feats[ids], scales)
    maps = {k: transfer_map(mesh, k, "down") for k in range(1, top + 1)}
    up_maps = {k: m.as_direction("up") for k, m in maps.items()}
    return GraphHierarchy(mesh, graphs, maps, up_maps, top)


def downscale_features(emb: Tensor, tmap: TransferMap) -> Tensor:
    """Shared nodes keep their row; each coarse node adds the count-normalized,
    weight-scaled sum of the fine-only nodes that map to it."""
    if tmap.direction != "down":
        raise MapMismatch("expected a down map")
    if emb.shape[0] != tmap.n_fine:
        raise MapMismatch(f"embedding has {emb.shape[0]} rows, map expects {tmap.n_fine}")
    return sparse_matmul(tmap.down_matrix, emb)


def upscale_features(emb: Tensor, tmap: TransferMap) -> Tensor:
    """Shared nodes copy; recreated fine nodes interpolate their coarse parents."""
    if tmap.direction != "up":
        raise MapMismatch("expected an up map")
    if emb.shape[0] != tmap.n_coarse:
        raise MapMismatch(f"embedding has {emb.shape[0]} rows, map expects {tmap.n_coarse}")
    return sparse_matmul(tmap.up_matrix, emb)


def _move(emb: Tensor, h: GraphHierarchy, src: int, dst: int) -> Tensor:
    # multi-level jumps compose single-level maps; absent levels are identities
    if dst < src:
        for k in range(min(src, h.top), dst, -1):
            emb = downscale_features(emb, h.maps[k])
    else:
        for k in range(src + 1, min(dst, h.top) + 1):
            emb = upscale_features(emb, h.up_maps[k])
    return emb


def _mp(model: MultiscaleModel, block: GraphTransformerParams, emb: Tensor, g: LevelGraph) -> Tensor:
    model.mp_calls += 1
    return graph_transformer_forward(block, emb, g.senders, g.receivers, g.edge_features)


def forward(model: MultiscaleModel, h: GraphHierarchy, clamp: bool = True,
            skip_scale: float = 1.0) -> Tensor:
    """Predicted ``(phi, u, v)`` at the next step, one row per full-mesh vertex,
    displacements in normalized units.  ``skip_scale`` multiplies every skip
    tensor (1 for the real model; 0 only for sensitivity checks)."""
    cfg = model.config
    stages = cfg.stages
    if set(h.graphs) != {lv for st in stages for lv in st}:
        raise HierarchyMismatch("hierarchy levels do not match the architecture stages")
    top_level = stages[0][0]
    x = mlp_forward(model.mlp_in, Tensor(h.graphs[top_level].node_features))
    cache: dict[int, Tensor] = {}
    for blk, (a, b) in zip(model.down, stages):
        x = _mp(model, blk, x, h.graphs[a])
        cache[a] = x
        x = _move(x, h, a, b)
    x = skip_aggregate(x * skip_scale, _mp(model, model.coarse, x, h.graphs[0]))
    for blk, (a, b) in zip(model.up, reversed(stages)):
        x = _move(x, h, b, a)
        x = skip_aggregate(cache[a] * skip_scale, _mp(model, blk, x, h.graphs[a]))
    raw = mlp_forward(model.mlp_out, x)
    if not np.all(np.isfinite(raw.data)):
        raise NonFiniteOutput("model produced non-finite values")
    if clamp:
        raw = concat([raw[:, 0:1].clip(0.0, 1.0), raw[:, 1:3]], axis=1)
    return raw


def predict_fields(model: MultiscaleModel, mesh: RefinedMesh, phi, u, v, load) -> np.ndarray:
    """Physical-unit ``(n, 3)`` prediction of ``(phi, u, v)`` on ``mesh``."""
    h = build_hierarchy(mesh, phi, u, v, load, model.config, model.scales)
    out = forward(model, h).data.copy()
    out[:, 1:] *= model.scales.displacement
    return out


def rollout(model: MultiscaleModel, record, steps: int, loads: list[tuple[float, float]] | None = None):
    """Closed-loop prediction from ``record.frames[0]``.

    Predicted frame ``t+1`` lives on the mesh it was predicted on; before
    the next prediction that mesh is regridded from the predicted crack
    field and all fields are interpolated onto it.
    """
    from .records import Frame, SimulationRecord

    first = record.frames[0]
    crit = record.criterion or RefineCriterion()
    if loads is None:
        loads = [record.frames[min(t, record.n_frames - 1)].load for t in range(steps)]
    frames = [first]
    cur = first
    for t in range(steps):
        mesh = cur.mesh
        phi, u, v = cur.phi, cur.u, cur.v
        if t > 0:
            new = regrid(mesh, np.clip(phi, 0.0, 1.0), crit)
            if new != mesh:
                fields = mesh.transfer(np.stack([phi, u, v], axis=1), new)
                phi, u, v = fields[:, 0], fields[:, 1], fields[:, 2]
                mesh = new
        load = loads[t]
        try:
            out = predict_fields(model, mesh, phi, u, v, load)
        except NonFiniteOutput as exc:
            raise NonFiniteOutput("model produced non-finite values", t + 1) from exc
        applied = (cur.applied[0] + load[0], cur.applied[1] + load[1])
        nxt_load = loads[t + 1] if t + 1 < len(loads) else load
        cur = Frame(mesh, out[:, 0], out[:, 1], out[:, 2], nxt_load, applied)
        frames.append(cur)
    meta = dict(record.meta)
    meta["predicted_by"] = model.config.family
    return SimulationRecord(record.spec, record.scenario, record.material, frames, crit, meta)

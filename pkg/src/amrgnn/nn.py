"""Learned kernels on top of the autodiff tape: MLP, graph-transformer
message passing, skip aggregation and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ShapeMismatch, Tensor, gather_rows, parameter,
                       segment_softmax, segment_sum)


class EmptyNeighborhood(ValueError):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, din: int, dout: int, name: str = "") -> "Linear":
        return cls(parameter(glorot(rng, din, dout), f"{name}.weight"),
                   parameter(np.zeros(dout), f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeMismatch(f"input has {x.shape[-1]} columns, layer expects {self.weight.shape[0]}")
        return x @ self.weight + self.bias

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class MLPParams:
    """Affine layers with ReLU between them; the last layer is linear."""

    layers: list[Linear]
    activation: str = "relu"

    @classmethod
    def init(cls, rng: np.random.Generator, widths: list[int]) -> "MLPParams":
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        return cls([Linear.init(rng, a, b) for a, b in zip(widths[:-1], widths[1:])])

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for n, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{n}"))
        return out


def mlp_forward(p: MLPParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.widths[0]:
        raise ShapeMismatch(f"input has {x.shape[-1]} columns, MLP expects {p.widths[0]}")
    h = x
    for n, layer in enumerate(p.layers):
        h = layer(h)
        if n < len(p.layers) - 1:
            h = h.relu()
    return h


@dataclass
class GraphTransformerParams:
    """One multi-head attention message-passing block with a plain residual."""

    heads: int
    dm: int
    query: Linear
    key: Linear
    value: Linear
    edge_bias: Linear
    out: Linear
    residual: str = field(default="plain")

    @classmethod
    def init(cls, rng: np.random.Generator, dm: int = 128, heads: int = 4, edge_dim: int = 3) -> "GraphTransformerParams":
        if dm % heads:
            raise ValueError(f"model dim {dm} is not divisible by {heads} heads")
        return cls(heads, dm,
                   Linear.init(rng, dm, dm), Linear.init(rng, dm, dm), Linear.init(rng, dm, dm),
                   Linear.init(rng, edge_dim, heads), Linear.init(rng, dm, dm))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("query", "key", "value", "edge_bias", "out"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out


def attention_weights(p: GraphTransformerParams, node_emb: Tensor, senders: np.ndarray,
                      receivers: np.ndarray, edge_scalars: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-edge, per-head softmax weights and the projected values."""
    n = node_emb.shape[0]
    if node_emb.shape[1] != p.dm:
        raise ShapeMismatch(f"embedding width {node_emb.shape[1]} != model dim {p.dm}")
    if len(senders) and (senders.max() >= n or receivers.max() >= n):
        raise IndexError("adjacency references a node beyond the embedding rows")
    if np.bincount(receivers, minlength=n).min(initial=1) == 0:
        raise EmptyNeighborhood("every node needs at least its self-loop")
    H, dh = p.heads, p.dm // p.heads
    q = gather_rows(p.query(node_emb), receivers).reshape(-1, H, dh)
    k = gather_rows(p.key(node_emb), senders).reshape(-1, H, dh)
    scores = (q * k).sum(axis=2) + p.edge_bias(Tensor(edge_scalars))
    alpha = segment_softmax(scores * (1.0 / np.sqrt(dh)), receivers, n)
    v = gather_rows(p.value(node_emb), senders).reshape(-1, H, dh)
    return alpha, v


def graph_transformer_forward(p: GraphTransformerParams, node_emb: Tensor, senders: np.ndarray,
                              receivers: np.ndarray, edge_scalars: np.ndarray) -> Tensor:
    """Attention over in-neighbours (self-loop included), heads concatenated,
    output-projected and added back onto the input."""
    n = node_emb.shape[0]
    alpha, v = attention_weights(p, node_emb, senders, receivers, edge_scalars)
    msg = (v * alpha.reshape(-1, p.heads, 1)).reshape(-1, p.dm)
    agg = segment_sum(msg, receivers, n)
    return p.out(agg) + node_emb


def skip_aggregate(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"skip inputs differ: {a.shape} vs {b.shape}")
    return a + b


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update of ``params`` from ``grads``; returns the advanced state."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return state

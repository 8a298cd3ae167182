"""Shared hierarchical temporal backbone built from TDGC layers.

A TDGC layer updates node ``i`` as::

    out_i = W_r^T x_i + mean_{j in N(i)} s_ij * (w_ij * phi(W_n^T x_j + b_n)) + b_r

with ``s_ij = sign(pe_i - pe_j)`` and ``w_ij = gate(|pe_i - pe_j| / 2**stage)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import DimensionError, ValidationError
from .tgraph import PoolingMap, TemporalGraph, pool

LAYER_KEYS = ("W_n", "b_n", "W_r", "b_r", "gate_W1", "gate_b1", "gate_W2", "gate_b2")


@dataclass
class BackboneConfig:
    L: int = 3
    layers_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2])
    D: int = 128
    tau: float = 2.0
    pooling: str = "mean"
    gate_hidden: int = 16

    def __post_init__(self):
        if self.L < 1:
            raise ValidationError(f"backbone needs L >= 1, got {self.L}")
        if len(self.layers_per_stage) == 1 and self.L > 1:
            self.layers_per_stage = list(self.layers_per_stage) * self.L
        if len(self.layers_per_stage) != self.L or min(self.layers_per_stage) < 1:
            raise ValidationError(f"layers_per_stage {self.layers_per_stage} invalid for L={self.L}")
        if self.pooling not in ("mean", "max"):
            raise ValidationError(f"unknown pooling mode {self.pooling!r}")
        if self.D < 1 or self.gate_hidden < 1 or not self.tau > 0:
            raise ValidationError("D, gate_hidden and tau must be positive")


@dataclass
class GraphHierarchy:
    graphs: list[TemporalGraph]
    pooling: list[PoolingMap]

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]


def layer_prefix(stage: int, layer: int) -> str:
    return f"backbone.s{stage}.l{layer}."


def init_layer(store: dc.ParameterStore, prefix: str, D: int, H: int, rng: np.random.Generator):
    shapes = {
        "W_n": ((D, D), D), "b_n": ((D,), D),
        "W_r": ((D, D), D), "b_r": ((D,), D),
        "gate_W1": ((1, H), 1), "gate_b1": ((H,), 1),
        "gate_W2": ((H, D), H), "gate_b2": ((D,), H),
    }
    for key in LAYER_KEYS:
        shape, fan_in = shapes[key]
        store.add(prefix + key, dc.uniform_init(rng, fan_in, shape))


def init_backbone(store: dc.ParameterStore, cfg: BackboneConfig, rng: np.random.Generator):
    for s in range(cfg.L):
        for l in range(cfg.layers_per_stage[s]):
            init_layer(store, layer_prefix(s, l), cfg.D, cfg.gate_hidden, rng)


def layer_params(store, prefix: str) -> dict[str, dc.Tensor]:
    return {k: store[prefix + k] for k in LAYER_KEYS}


def gate_weights(dist: np.ndarray, params) -> dc.Tensor:
    """Per-edge gate vector from a column of (stage-normalised) distances."""
    h = dc.relu(dc.linear(dc.Tensor(dist.reshape(-1, 1)), params["gate_W1"], params["gate_b1"]))
    return dc.linear(h, params["gate_W2"], params["gate_b2"])


def tdgc_aggregate(g: TemporalGraph, params, activation=dc.relu) -> dc.Tensor:
    """The neighbour term of a TDGC layer (mean of signed, gated messages)."""
    x = g.x
    D = params["W_n"].shape[0]
    if x.data.ndim != 2 or x.shape[1] != D:
        raise DimensionError(f"TDGC layer of width {D} got features {x.shape}")
    msg = activation(dc.linear(x, params["W_n"], params["b_n"]))
    if g.src.size == 0:
        return dc.Tensor(np.zeros((g.num_nodes, D)))
    delta = g.pe[g.dst] - g.pe[g.src]
    s = dc.sign(delta.reshape(-1, 1))
    w = gate_weights(np.abs(delta) / 2.0 ** g.stage, params)
    m = dc.mul(dc.mul(w, dc.gather_rows(msg, g.src)), s)
    return dc.segment_mean(m, g.dst, g.num_nodes)


def tdgc_forward(g: TemporalGraph, params, activation=dc.relu) -> dc.Tensor:
    agg = tdgc_aggregate(g, params, activation)
    return dc.add(dc.add(dc.matmul(g.x, params["W_r"]), agg), params["b_r"])


def backbone_forward(g0: TemporalGraph, cfg: BackboneConfig, store, activation=dc.relu) -> GraphHierarchy:
    """Run all stages; returns the post-layer graph of every stage."""
    if g0.stage != 0:
        raise ValidationError(f"backbone input must be a stage-0 graph, got stage {g0.stage}")
    graphs, maps = [], []
    g = g0
    for s in range(cfg.L):
        if s > 0:
            g, pmap = pool(g, cfg.pooling)
            maps.append(pmap)
        for l in range(cfg.layers_per_stage[s]):
            g = g.with_features(tdgc_forward(g, layer_params(store, layer_prefix(s, l)), activation))
        graphs.append(g)
    return GraphHierarchy(graphs, maps)

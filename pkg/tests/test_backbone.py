import numpy as np
import pytest

from hierpack import diffcore as dc
from hierpack.backbone import (BackboneConfig, backbone_forward, init_backbone, init_layer,
                               layer_params, tdgc_aggregate, tdgc_forward)
from hierpack.errors import DimensionError, ValidationError
from hierpack.tgraph import TemporalGraph, build_graph


def identity_layer(D=1):
    """Root and neighbour maps are identities and the gate is constantly one."""
    store = dc.ParameterStore()
    init_layer(store, "t.", D, 2, np.random.default_rng(0))
    p = layer_params(store, "t.")
    p["W_r"].data[...] = np.eye(D)
    p["W_n"].data[...] = np.eye(D)
    for k in ("b_r", "b_n", "gate_W2"):
        p[k].data[...] = 0.0
    p["gate_b2"].data[...] = 1.0
    return p


def random_layer(D, H=4, seed=0):
    store = dc.ParameterStore()
    init_layer(store, "t.", D, H, np.random.default_rng(seed))
    return layer_params(store, "t.")


def loop_tdgc(x, pe, src, dst, stage, p, phi):
    """Per-node message passing written directly from the layer equation."""
    W = {k: v.data for k, v in p.items()}
    out = x @ W["W_r"] + W["b_r"]
    for i in range(len(pe)):
        msgs = []
        for s, d in zip(src, dst):
            if d != i:
                continue
            h = np.maximum(0, abs(pe[i] - pe[s]) / 2 ** stage * W["gate_W1"][0] + W["gate_b1"])
            w = h @ W["gate_W2"] + W["gate_b2"]
            msgs.append(np.sign(pe[i] - pe[s]) * w * phi(x[s] @ W["W_n"] + W["b_n"]))
        if msgs:
            out[i] += np.mean(msgs, axis=0)
    return out


def test_identity_weight_example():
    x = np.array([[2.0], [0.0], [4.0]])
    pe = np.array([1.0, 0.0, -1.0])
    # node 1 is the centre; only its two neighbours are connected to it
    g = TemporalGraph(dc.Tensor(x), pe, np.array([0, 2]), np.array([1, 1]), 1.0)
    out = tdgc_forward(g, identity_layer(), dc.identity)
    assert out.data[1, 0] == 1.0


def test_equal_timestamps_annihilate_messages():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3))
    g = TemporalGraph(dc.Tensor(x), np.array([1.0, 1.0]), np.array([0, 1]), np.array([1, 0]), 1.0)
    p = random_layer(3)
    agg = tdgc_aggregate(g, p)
    assert np.all(agg.data == 0.0)
    np.testing.assert_array_equal(tdgc_forward(g, p).data, x @ p["W_r"].data + p["b_r"].data)


@pytest.mark.parametrize("stage", [0, 1, 2])
def test_matches_loop_oracle(stage):
    rng = np.random.default_rng(stage)
    pe = np.cumsum(rng.uniform(0.3, 2.0, 12))
    x = rng.normal(size=(12, 5))
    g = build_graph(x, pe, 1.0, stage=stage)
    p = random_layer(5, seed=stage)
    ref = loop_tdgc(x, pe, g.src, g.dst, stage, p, lambda v: np.maximum(v, 0))
    assert np.max(np.abs(tdgc_forward(g, p).data - ref)) <= 1e-12


def test_time_reversal_negates_aggregate():
    rng = np.random.default_rng(2)
    pe = np.cumsum(rng.uniform(0.3, 2.0, 15))
    x = rng.normal(size=(15, 4))
    p = random_layer(4)
    fwd = tdgc_aggregate(build_graph(x, pe, 2.0), p).data
    rev = tdgc_aggregate(build_graph(x[::-1], -pe[::-1], 2.0), p).data[::-1]
    assert np.max(np.abs(fwd + rev)) <= 1e-12


def test_isolated_node_gets_root_term_only():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 2))
    g = build_graph(x, [0.5, 1.5, 9.5], tau=1.0)
    p = random_layer(2)
    out = tdgc_forward(g, p).data
    np.testing.assert_array_equal(out[2], x[2] @ p["W_r"].data + p["b_r"].data)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    n = 10
    pe = np.cumsum(rng.uniform(0.3, 1.5, n))
    x = rng.normal(size=(n, 3))
    p = random_layer(3)
    g = build_graph(x, pe, 1.5)
    base = tdgc_forward(g, p).data
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    h = TemporalGraph(dc.Tensor(x[perm]), pe[perm], inv[g.src], inv[g.dst], 1.5)
    np.testing.assert_allclose(tdgc_forward(h, p).data, base[perm], atol=1e-12)


def test_locality_of_gradients():
    n = 12
    cfg = BackboneConfig(L=1, layers_per_stage=[2], D=3, gate_hidden=4, tau=1.0)
    store = dc.ParameterStore()
    init_backbone(store, cfg, np.random.default_rng(5))
    x = dc.Tensor(np.random.default_rng(6).normal(size=(n, 3)), requires_grad=True)
    g = build_graph(x, np.arange(n) + 0.5, cfg.tau)
    out = backbone_forward(g, cfg, store, dc.softplus).graphs[0].x
    dc.sum_(dc.gather_rows(out, [0])).backward()
    # two layers at one-hop spacing reach nodes 0, 1, 2 only
    touched = np.flatnonzero(np.any(x.grad != 0, axis=1))
    assert set(touched.tolist()) <= {0, 1, 2}
    assert 2 in touched.tolist()


def test_width_mismatch():
    g = build_graph(np.zeros((2, 3)), [0.5, 1.5], 1.0)
    with pytest.raises(DimensionError):
        tdgc_forward(g, random_layer(4))


def test_hierarchy_node_counts():
    cfg = BackboneConfig(L=3, layers_per_stage=[1, 1, 1], D=2, gate_hidden=2)
    store = dc.ParameterStore()
    init_backbone(store, cfg, np.random.default_rng(0))
    g = build_graph(np.ones((64, 2)), np.arange(64) + 0.5, cfg.tau)
    hier = backbone_forward(g, cfg, store)
    assert [h.num_nodes for h in hier.graphs] == [64, 32, 16]
    assert [h.stage for h in hier.graphs] == [0, 1, 2]
    assert len(hier.pooling) == 2


def test_single_stage_has_no_pooling():
    cfg = BackboneConfig(L=1, layers_per_stage=[2], D=2, gate_hidden=2)
    store = dc.ParameterStore()
    init_backbone(store, cfg, np.random.default_rng(0))
    hier = backbone_forward(build_graph(np.ones((5, 2)), np.arange(5) + 0.5, 1.0), cfg, store)
    assert len(hier) == 1 and hier.pooling == []


def test_gradient_through_hierarchy_vs_finite_differences():
    from hierpack.gradcheck import check_case

    cfg = BackboneConfig(L=3, layers_per_stage=[1, 1, 1], D=2, gate_hidden=3, pooling="mean")
    store = dc.ParameterStore()
    init_backbone(store, cfg, np.random.default_rng(7))
    pe = np.arange(10) + 0.5

    def f(x):
        return dc.sum_(backbone_forward(build_graph(x, pe, cfg.tau), cfg, store, dc.softplus)[2].x)

    rng = np.random.default_rng(8)
    assert check_case(f, [rng.normal(size=(10, 2))], rng) <= 1e-5


def test_config_validation():
    assert BackboneConfig(L=3, layers_per_stage=[1]).layers_per_stage == [1, 1, 1]
    with pytest.raises(ValidationError):
        BackboneConfig(L=0)
    with pytest.raises(ValidationError):
        BackboneConfig(L=2, layers_per_stage=[1, 0])
    with pytest.raises(ValidationError):
        BackboneConfig(pooling="sum")

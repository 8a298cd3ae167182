import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierpack import diffcore as dc
from hierpack.backpack import (ActivationRecord, PrototypeSet, activation_rows, consensus,
                               consensus_matrix, fuse_features, fuse_logits,
                               group_mean_prototypes, init_interaction, interact, knn_query)
from hierpack.errors import DimensionError, UsageError, ValidationError

# ------------------------------------------------------------------ oracles


def loop_group_mean(feats, verbs, nouns):
    groups = {}
    for f, v, n in zip(feats, verbs, nouns):
        groups.setdefault((v, n), []).append(f)
    keys = sorted(groups)
    return np.array([np.mean(groups[k], axis=0) for k in keys]), np.array(keys)


def scan_knn(q, mat, k):
    """Exhaustive scan with explicit (distance, index) ordering."""
    d = [(float(np.sqrt(np.sum((q - row) ** 2))), i) for i, row in enumerate(mat)]
    return [i for _, i in sorted(d)[:k]]


def loop_interact(x, mat, W_r, W, k):
    idx = [scan_knn(q, mat, k) for q in x]
    for m in range(len(W_r)):
        out = np.zeros_like(x)
        for i in range(len(x)):
            out[i] = x[i] @ W_r[m] + np.mean([mat[j] for j in idx[i]], axis=0) @ W[m]
        x = out
    return x


def protos_from(mat, labels=None, task="t"):
    mat = np.asarray(mat, dtype=np.float64)
    if labels is None:
        labels = np.stack([np.arange(len(mat)), np.zeros(len(mat), dtype=int)], 1)
    return PrototypeSet(task, mat.copy(), np.asarray(labels, dtype=np.int64))


def sha(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


# --------------------------------------------------------------- prototypes


def test_two_sample_mean():
    p = group_mean_prototypes("ar", [[1.0, 2.0], [3.0, 4.0]], [3, 3], [7, 7])
    np.testing.assert_array_equal(p.matrix, [[2, 3]])
    assert p.label(0) == (3, 7)


def test_singleton_labels_keep_their_features():
    feats = np.array([[1.0, 0.0], [0.0, 5.0]])
    p = group_mean_prototypes("ar", feats, [0, 1], [2, 2])
    np.testing.assert_array_equal(p.matrix, feats)


def test_prototypes_match_group_by_oracle():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(300, 6))
    verbs, nouns = rng.integers(0, 5, 300), rng.integers(0, 4, 300)
    p = group_mean_prototypes("ar", feats, verbs, nouns)
    ref, keys = loop_group_mean(feats, verbs, nouns)
    np.testing.assert_array_equal(p.labels, keys)
    assert np.max(np.abs(p.matrix - ref)) <= 1e-12


def test_empty_prototype_source_rejected():
    with pytest.raises(ValidationError):
        group_mean_prototypes("ar", np.zeros((0, 2)), [], [])


def test_frozen_prototypes_are_read_only():
    p = protos_from([[1.0, 2.0]])
    with pytest.raises(ValueError):
        p.matrix[0, 0] = 9.0


# --------------------------------------------------------------------- k-NN


def test_knn_example():
    idx, dist = knn_query([[0.9, 0.9]], protos_from([[0, 0], [1, 1], [2, 2]]), 2)
    assert idx.tolist() == [[1, 0]]
    np.testing.assert_allclose(dist[0], [0.141421, 1.272792], atol=1e-6)


def test_knn_exact_match_first():
    p = protos_from([[0, 0], [1, 1], [2, 2]])
    idx, dist = knn_query([[2.0, 2.0]], p, 1)
    assert idx[0, 0] == 2 and dist[0, 0] == 0.0


def test_knn_ties_prefer_lower_index():
    idx, _ = knn_query([[0.0]], protos_from([[1.0], [-1.0], [1.0]]), 3)
    assert idx.tolist() == [[0, 1, 2]]


def test_knn_rejects_bad_k_and_width():
    p = protos_from([[0, 0], [1, 1]])
    with pytest.raises(ValidationError):
        knn_query([[0.0, 0.0]], p, 3)
    with pytest.raises(DimensionError):
        knn_query([[0.0]], p, 1)


def test_knn_matches_exhaustive_scan():
    rng = np.random.default_rng(1)
    mat = rng.normal(size=(40, 5))
    queries = rng.normal(size=(50, 5))
    idx, _ = knn_query(queries, protos_from(mat), 7)
    for q, row in zip(queries, idx):
        assert row.tolist() == scan_knn(q, mat, 7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_knn_label_multiset_is_permutation_stable(seed):
    rng = np.random.default_rng(seed)
    mat = rng.normal(size=(12, 3))
    labels = np.stack([rng.integers(0, 4, 12), rng.integers(0, 4, 12)], 1)
    perm = rng.permutation(12)
    q = rng.normal(size=(5, 3))
    a, _ = knn_query(q, protos_from(mat, labels), 4)
    b, _ = knn_query(q, protos_from(mat[perm], labels[perm]), 4)
    for ra, rb in zip(a, b):
        assert sorted(map(tuple, labels[ra])) == sorted(map(tuple, labels[perm][rb]))


# -------------------------------------------------------------- interaction


def identity_store(D, M):
    store = dc.ParameterStore()
    init_interaction(store, "i.", D, M, np.random.default_rng(0))
    for m in range(M):
        store[f"i.m{m}.W_r"].data[...] = np.eye(D)
        store[f"i.m{m}.W"].data[...] = np.eye(D)
    return store


def test_interact_identity_example():
    p = protos_from([[0.0, 2.0], [0.0, 4.0], [50.0, 50.0]])
    out = interact(dc.Tensor([[1.0, 0.0]]), p, identity_store(2, 1), "i.", 1, 2)
    np.testing.assert_array_equal(out.refined.data, [[1, 3]])
    assert out.rows.tolist() == [[0, 1]]


def test_zero_coupling_ignores_prototypes():
    rng = np.random.default_rng(2)
    store = dc.ParameterStore()
    init_interaction(store, "i.", 3, 2, rng)
    for m in range(2):
        store[f"i.m{m}.W"].data[...] = 0.0
    x = rng.normal(size=(4, 3))
    a = interact(x, protos_from(rng.normal(size=(5, 3))), store, "i.", 2, 2).refined.data
    b = interact(x, protos_from(rng.normal(size=(5, 3)) + 9), store, "i.", 2, 2).refined.data
    ref = x @ store["i.m0.W_r"].data @ store["i.m1.W_r"].data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, ref, atol=1e-12)


def test_interact_matches_loop_oracle():
    rng = np.random.default_rng(3)
    store = dc.ParameterStore()
    init_interaction(store, "i.", 4, 3, rng)
    mat = rng.normal(size=(20, 4))
    x = rng.normal(size=(15, 4))
    out = interact(x, protos_from(mat), store, "i.", 3, 5).refined.data
    ref = loop_interact(x, mat, [store[f"i.m{m}.W_r"].data for m in range(3)],
                        [store[f"i.m{m}.W"].data for m in range(3)], 5)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_interact_leaves_prototypes_untouched():
    rng = np.random.default_rng(4)
    p = protos_from(rng.normal(size=(6, 3)))
    before = (sha(p.matrix), sha(p.labels))
    store = dc.ParameterStore()
    init_interaction(store, "i.", 3, 2, rng)
    x = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    for _ in range(5):
        dc.sum_(interact(x, p, store, "i.", 2, 3, requery=True).refined).backward()
    assert (sha(p.matrix), sha(p.labels)) == before


def test_interact_errors():
    p = protos_from([[0.0, 1.0]])
    with pytest.raises(DimensionError):
        interact(np.zeros((2, 3)), p, identity_store(2, 1), "i.", 1, 1)
    loose = PrototypeSet("t", np.zeros((1, 2)), np.zeros((1, 2), dtype=np.int64), frozen=False)
    with pytest.raises(UsageError):
        interact(np.zeros((1, 2)), loose, identity_store(2, 1), "i.", 1, 1)


# ------------------------------------------------------------------- fusion


def test_fuse_features_examples():
    np.testing.assert_array_equal(fuse_features([[2.0]], [[[4.0]]]).data, [[3]])
    x = np.random.default_rng(5).normal(size=(3, 2))
    np.testing.assert_allclose(fuse_features(x, [x, x]).data, x, atol=1e-15)


def test_fuse_features_matches_loop_and_is_symmetric():
    rng = np.random.default_rng(6)
    novel = rng.normal(size=(4, 3))
    refined = [rng.normal(size=(4, 3)) for _ in range(3)]
    ref = np.zeros_like(novel)
    for t in [novel] + refined:
        ref += t
    ref /= 4
    np.testing.assert_allclose(fuse_features(novel, refined).data, ref, atol=1e-12)
    np.testing.assert_allclose(fuse_features(novel, refined[::-1]).data, ref, atol=1e-12)


def test_fuse_features_shape_mismatch():
    with pytest.raises(DimensionError):
        fuse_features(np.zeros((2, 2)), [np.zeros((2, 3))])


def test_fuse_logits_examples():
    np.testing.assert_array_equal(fuse_logits([[1.0, 0.0], [0.0, 1.0]]).data, [1, 1])
    np.testing.assert_array_equal(fuse_logits([[0.2, 0.7]]).data, [0.2, 0.7])
    votes = [[2.0, 0.0, 0.0], [0.0, 1.5, 0.0], [0.0, 1.5, 0.0]]
    assert int(np.argmax(fuse_logits(votes).data)) == 1
    out = fuse_logits([{"a": [1.0]}, {"a": [2.0]}])
    assert out["a"].data.tolist() == [3.0]
    with pytest.raises(DimensionError):
        fuse_logits([[1.0, 0.0], [1.0]])


# ---------------------------------------------------------------- consensus


def record(sample, **tasks):
    r = ActivationRecord(sample)
    for t, labs in tasks.items():
        labels = np.array([[v, 0] for v in range(10)])
        p = protos_from(np.zeros((10, 1)), labels, t)
        r.add(t, p, labs, np.zeros(len(labs)))
    return r


def test_consensus_examples():
    assert consensus([record("s", a=[1, 2], b=[2, 1])], "a", "b") == 100.0
    assert consensus([record("s", a=[1, 2], b=[3, 4])], "a", "b") == 0.0
    assert consensus([record("s", a=[1, 2, 3, 4], b=[2, 3, 4, 5])], "a", "b") == 75.0


def test_consensus_missing_task():
    with pytest.raises(ValidationError):
        consensus([record("s", a=[1])], "a", "b")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_consensus_matrix_symmetric_with_full_diagonal(seed):
    rng = np.random.default_rng(seed)
    recs = [record(f"s{i}", a=rng.choice(10, 3, replace=False), b=rng.choice(10, 3, replace=False),
                   c=rng.choice(10, 3, replace=False)) for i in range(4)]
    m = consensus_matrix(recs, ["a", "b", "c"])
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_array_equal(np.diag(m), [100.0] * 3)
    assert np.all((m >= 0) & (m <= 100))


def test_activation_rows_export():
    rows = list(activation_rows([record("s", a=[3, 1])]))
    assert rows == [("s", "a", 0, 3, 3, 0, 0.0), ("s", "a", 1, 1, 1, 0, 0.0)]

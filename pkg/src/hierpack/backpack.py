"""Frozen task prototypes and the prototype-guided refinement of task features.

Each support task contributes a prototype matrix (one row per verb-noun
action). A novel task queries every matrix with k-NN and refines the
support-task features by SAGE-style updates that read, but never write, the
prototypes.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import DimensionError, UsageError, ValidationError


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    task: str
    matrix: np.ndarray
    labels: np.ndarray  # P x 2 (verb, noun), one row per prototype
    frozen: bool = True

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.labels.shape != (self.matrix.shape[0], 2):
            raise DimensionError(f"prototype matrix {self.matrix.shape} vs labels {self.labels.shape}")
        if self.frozen:
            self.matrix.flags.writeable = False
            self.labels.flags.writeable = False

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.encode())
        h.update(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def label(self, row: int) -> tuple[int, int]:
        v, n = self.labels[row]
        return int(v), int(n)


def group_mean_prototypes(task: str, feats: np.ndarray, verbs, nouns) -> PrototypeSet:
    """Average feature rows per (verb, noun) label; rows sorted by label."""
    feats = np.asarray(feats, dtype=np.float64)
    pairs = np.stack([np.asarray(verbs, dtype=np.int64), np.asarray(nouns, dtype=np.int64)], 1)
    if feats.shape[0] == 0:
        raise ValidationError("cannot build prototypes from an empty dataset")
    if pairs.shape[0] != feats.shape[0]:
        raise DimensionError(f"{feats.shape[0]} feature rows for {pairs.shape[0]} labels")
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mat = dc.segment_mean(feats, inv, uniq.shape[0]).data.copy()
    return PrototypeSet(task, mat, uniq.astype(np.int64))


def knn_query(queries, protos: PrototypeSet, k: int):
    """Indices (Q x k) and Euclidean distances of the nearest prototype rows.

    Ties go to the lower row index; each row of the result is sorted by
    (distance, index).
    """
    q = np.asarray(queries.data if isinstance(queries, dc.Tensor) else queries, dtype=np.float64)
    if not 1 <= k <= protos.size:
        raise ValidationError(f"k must lie in [1, {protos.size}], got {k}")
    if q.ndim != 2 or q.shape[1] != protos.matrix.shape[1]:
        raise DimensionError(f"queries {q.shape} vs prototypes {protos.matrix.shape}")
    diff = q[:, None, :] - protos.matrix[None, :, :]
    d2 = np.einsum("qpd,qpd->qp", diff, diff)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx, np.sqrt(np.take_along_axis(d2, idx, axis=1))


def init_interaction(store, prefix: str, D: int, M: int, rng: np.random.Generator) -> None:
    for m in range(M):
        store.add(f"{prefix}m{m}.W_r", dc.uniform_init(rng, D, (D, D)))
        store.add(f"{prefix}m{m}.W", dc.uniform_init(rng, D, (D, D)))


def neighbor_mean(protos: PrototypeSet, idx: np.ndarray) -> dc.Tensor:
    q, k = idx.shape
    rows = dc.gather_rows(dc.Tensor(protos.matrix), idx.reshape(-1))
    return dc.segment_mean(rows, np.repeat(np.arange(q), k), q)


@dataclass
class Interaction:
    refined: dc.Tensor
    rows: np.ndarray
    distances: np.ndarray


def interact(xk, protos: PrototypeSet, store, prefix: str, M: int, k: int,
             requery: bool = False, coupling: str = "full") -> Interaction:
    """M refinement layers: ``X <- X W_r + mean(activated prototypes) W``.

    ``coupling="none"`` drops the prototype term entirely; ``"zero"`` keeps it
    with whatever (typically zero, frozen) ``W`` the store holds.
    """
    if not protos.frozen:
        raise UsageError(f"prototypes of {protos.task!r} must be frozen before interaction")
    if coupling not in ("full", "zero", "none"):
        raise UsageError(f"unknown coupling mode {coupling!r}")
    x = dc.as_tensor(xk)
    if x.data.ndim != 2 or x.shape[1] != protos.matrix.shape[1]:
        raise DimensionError(f"features {x.shape} vs prototypes {protos.matrix.shape}")
    idx, dist = knn_query(x.data, protos, k)
    first_idx, first_dist = idx, dist
    for m in range(M):
        if requery and m > 0:
            idx, _ = knn_query(x.data, protos, k)
        root = dc.matmul(x, store[f"{prefix}m{m}.W_r"])
        if coupling == "none":
            x = root
        else:
            x = dc.add(root, dc.matmul(neighbor_mean(protos, idx), store[f"{prefix}m{m}.W"]))
    return Interaction(x, first_idx, first_dist)


def fuse_features(novel, refined: Sequence) -> dc.Tensor:
    """Arithmetic mean of the novel-task features and every refined perspective."""
    terms = [dc.as_tensor(novel)] + [dc.as_tensor(r) for r in refined]
    for t in terms[1:]:
        if t.shape != terms[0].shape:
            raise DimensionError(f"cannot fuse features of shapes {terms[0].shape} and {t.shape}")
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.mul(total, 1.0 / len(terms))


def fuse_logits(votes: Sequence):
    """Elementwise sum of per-perspective outputs (tensors or dicts of tensors)."""
    if not votes:
        raise UsageError("fuse_logits needs at least one perspective")
    if isinstance(votes[0], dict):
        return {key: fuse_logits([v[key] for v in votes]) for key in votes[0]}
    terms = [dc.as_tensor(v) for v in votes]
    total = terms[0]
    for t in terms[1:]:
        if t.shape != total.shape:
            raise DimensionError(f"cannot sum votes of shapes {total.shape} and {t.shape}")
        total = dc.add(total, t)
    return total


# ----------------------------------------------------------------- consensus


@dataclass
class ActivationRecord:
    """Prototypes each support task retrieved for one novel-task sample."""

    sample: str
    rows: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    distances: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, task: str, protos: PrototypeSet, rows, distances) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        self.rows[task] = rows
        self.labels[task] = [protos.label(r) for r in rows]
        self.distances[task] = np.asarray(distances, dtype=np.float64)


def consensus(records: Sequence[ActivationRecord], task_a: str, task_b: str) -> float:
    """Mean over samples of |labels_a & labels_b| / k, in percent."""
    if not records:
        raise ValidationError("no activation records")
    vals = []
    for r in records:
        if task_a not in r.labels or task_b not in r.labels:
            missing = task_a if task_a not in r.labels else task_b
            raise ValidationError(f"task {missing!r} absent from activation record {r.sample}")
        k = len(r.labels[task_a])
        if len(r.labels[task_b]) != k:
            raise ValidationError(f"unequal k for {task_a!r} and {task_b!r} in {r.sample}")
        shared = set(r.labels[task_a]) & set(r.labels[task_b])
        vals.append(100.0 * len(shared) / k)
    return float(np.mean(vals))


def consensus_matrix(records: Sequence[ActivationRecord], tasks: Sequence[str]) -> np.ndarray:
    n = len(tasks)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = consensus(records, tasks[i], tasks[j])
    return out


def activation_rows(records: Sequence[ActivationRecord]):
    """Flat rows (sample, task, rank, row, verb, noun, distance) for export."""
    for r in records:
        for task in sorted(r.rows):
            for rank, (row, (v, n), d) in enumerate(zip(r.rows[task], r.labels[task], r.distances[task])):
                yield r.sample, task, rank, int(row), v, n, float(d)

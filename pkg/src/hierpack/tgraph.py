"""Temporal video graphs: threshold edges on timestamps and stride-2 pooling.

A graph may hold several videos at once (a disjoint union used for batching);
``ptr`` stores the node offsets of each video and edges never cross videos.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DimensionError, UsageError, ValidationError

STRIDE = 2


@dataclass(frozen=True, eq=False)
class TemporalGraph:
    x: dc.Tensor
    pe: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    tau: float
    stage: int = 0
    ptr: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return int(self.pe.shape[0])

    @property
    def num_videos(self) -> int:
        return len(self.offsets) - 1

    @property
    def offsets(self) -> np.ndarray:
        return self.ptr if self.ptr is not None else np.array([0, self.num_nodes])

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @property
    def threshold(self) -> float:
        return stage_edge_threshold(self.tau, self.stage)

    def video_of(self) -> np.ndarray:
        """Video index of every node."""
        return np.repeat(np.arange(self.num_videos), np.diff(self.offsets))

    def with_features(self, x: dc.Tensor) -> TemporalGraph:
        if x.shape[0] != self.num_nodes:
            raise DimensionError(f"{x.shape[0]} feature rows for {self.num_nodes} nodes")
        return TemporalGraph(x, self.pe, self.src, self.dst, self.tau, self.stage, self.ptr)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes)


@dataclass(frozen=True)
class PoolingMap:
    """``child_of[i]`` is the child node that parent node ``i`` pools into."""

    child_of: np.ndarray
    num_children: int
    mode: str

    def parents(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_children)]
        for p, c in enumerate(self.child_of.tolist()):
            out[c].append(p)
        return out


def stage_edge_threshold(tau: float, stage: int) -> float:
    """Distance threshold (seconds) used to connect nodes at a given stage."""
    if stage < 0:
        raise ValidationError(f"stage must be >= 0, got {stage}")
    return float(tau) * 2.0 ** stage


def threshold_edges(pe: np.ndarray, threshold: float, ptr: np.ndarray | None = None):
    """Symmetric edges between nodes of the same video with |dpe| <= threshold.

    Returned sorted by (dst, src) so downstream reductions have a fixed order.
    """
    n = pe.shape[0]
    ptr = np.array([0, n]) if ptr is None else ptr
    src, dst = [], []
    for lo, hi in zip(ptr[:-1], ptr[1:]):
        seg = pe[lo:hi]
        for k in range(1, hi - lo):
            close = np.flatnonzero(seg[k:] - seg[:-k] <= threshold)
            if close.size == 0:
                break
            a = close + lo
            src += [a, a + k]
            dst += [a + k, a]
    if not src:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty.copy()
    src = np.concatenate(src).astype(np.intp)
    dst = np.concatenate(dst).astype(np.intp)
    order = np.lexsort((src, dst))
    return src[order], dst[order]


def _check_timestamps(pe: np.ndarray, ptr: np.ndarray) -> None:
    for lo, hi in zip(ptr[:-1], ptr[1:]):
        if hi <= lo:
            raise ValidationError("every video needs at least one node")
        if np.any(np.diff(pe[lo:hi]) <= 0):
            raise ValidationError("timestamps must be strictly increasing within a video")


def build_graph(features, timestamps, tau: float, stage: int = 0, ptr=None) -> TemporalGraph:
    """Connect every pair of nodes whose timestamps are within ``tau * 2**stage``."""
    x = dc.as_tensor(features)
    pe = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    if pe.shape[0] == 0:
        raise ValidationError("a graph needs at least one node")
    if x.data.ndim != 2 or x.shape[0] != pe.shape[0]:
        raise DimensionError(f"features {x.shape} do not match {pe.shape[0]} timestamps")
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    ptr = None if ptr is None else np.asarray(ptr, dtype=np.intp)
    _check_timestamps(pe, ptr if ptr is not None else np.array([0, pe.shape[0]]))
    src, dst = threshold_edges(pe, stage_edge_threshold(tau, stage), ptr)
    return TemporalGraph(x, pe, src, dst, float(tau), stage, ptr)


def batch_graphs(videos: Sequence[tuple], tau: float) -> TemporalGraph:
    """Disjoint union of ``(features, timestamps)`` pairs as one stage-0 graph."""
    if not videos:
        raise ValidationError("cannot batch zero videos")
    sizes = [len(ts) for _, ts in videos]
    ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
    x = np.concatenate([np.asarray(f, dtype=np.float64) for f, _ in videos], axis=0)
    pe = np.concatenate([np.asarray(ts, dtype=np.float64) for _, ts in videos])
    return build_graph(x, pe, tau, 0, ptr)


def pool(g: TemporalGraph, mode: str = "mean", stride: int = STRIDE):
    """Reduce consecutive windows of ``stride`` nodes per video; rebuild edges one stage up."""
    if mode not in ("mean", "max"):
        raise UsageError(f"pooling mode must be 'mean' or 'max', got {mode!r}")
    if g.num_nodes < 2:
        return g, PoolingMap(np.zeros(g.num_nodes, dtype=np.intp), g.num_nodes, mode)
    child_of, ptr = [], [0]
    for lo, hi in zip(g.offsets[:-1], g.offsets[1:]):
        n = hi - lo
        child_of.append(ptr[-1] + np.arange(n) // stride)
        ptr.append(ptr[-1] + -(-n // stride))
    child_of = np.concatenate(child_of).astype(np.intp)
    m = ptr[-1]
    reduce = dc.segment_mean if mode == "mean" else dc.segment_max
    x = reduce(g.x, child_of, m)
    pe = np.bincount(child_of, weights=g.pe, minlength=m) / np.bincount(child_of, minlength=m)
    new_ptr = np.asarray(ptr, dtype=np.intp) if g.ptr is not None else None
    stage = g.stage + 1
    src, dst = threshold_edges(pe, stage_edge_threshold(g.tau, stage), new_ptr)
    child = TemporalGraph(x, pe, src, dst, g.tau, stage, new_ptr)
    return child, PoolingMap(child_of, m, mode)

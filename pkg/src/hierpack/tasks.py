"""Per-task necks, temporal alignment, heads, losses, decoding and metrics.

Five task archetypes share one interface:

=============  ==================  ==========================================
kind           example task        head output
=============  ==================  ==========================================
recognition    AR                  verb and noun scores per segment
state_change   OSCC                two scores per segment
keyframe       PNR                 one score per node inside the segment
anticipation   LTA                 Z (verb, noun) score pairs per segment
localization   MQ                  per-node class scores and two offsets
=============  ==================  ==========================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import DimensionError, UsageError, ValidationError

KINDS = ("recognition", "state_change", "keyframe", "anticipation", "localization")
TIOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    verbs: int = 0
    nouns: int = 0
    classes: int = 0
    horizon: int = 0
    stages: str = "first"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.kind in ("recognition", "anticipation") and (self.verbs < 1 or self.nouns < 1):
            raise ValidationError(f"{self.name}: verb and noun counts must be positive")
        if self.kind == "anticipation" and self.horizon < 1:
            raise ValidationError(f"{self.name}: anticipation horizon must be positive")
        if self.kind == "localization" and self.classes < 1:
            raise ValidationError(f"{self.name}: class count must be positive")
        if self.stages not in ("first", "all"):
            raise ValidationError(f"{self.name}: stages must be 'first' or 'all'")

    @property
    def aligned(self) -> bool:
        """Whether the head works on per-segment aligned features."""
        return self.kind in ("recognition", "state_change", "anticipation")

    @property
    def node_level(self) -> bool:
        return not self.aligned

    @property
    def label_width(self) -> int:
        return {"recognition": 2, "state_change": 1, "keyframe": 1,
                "anticipation": 2 * self.horizon, "localization": 1}[self.kind]


def default_tasks(verbs: int, nouns: int, classes: int, horizon: int) -> dict[str, TaskSpec]:
    return {
        "ar": TaskSpec("ar", "recognition", verbs=verbs, nouns=nouns),
        "oscc": TaskSpec("oscc", "state_change"),
        "pnr": TaskSpec("pnr", "keyframe"),
        "lta": TaskSpec("lta", "anticipation", verbs=verbs, nouns=nouns, horizon=horizon),
        "mq": TaskSpec("mq", "localization", classes=classes, stages="all"),
    }


@dataclass(frozen=True)
class SegmentAnnotation:
    s: float
    e: float
    label: tuple

    def validate(self, kind: str, horizon: int = 0) -> None:
        if not self.s < self.e:
            raise ValidationError(f"segment start {self.s} must precede end {self.e}")
        if kind == "keyframe" and not self.s <= self.label[0] <= self.e:
            raise ValidationError(f"keyframe {self.label[0]} outside [{self.s}, {self.e}]")
        if kind == "anticipation" and len(self.label) != 2 * horizon:
            raise ValidationError(f"anticipation label needs {horizon} verb and noun ids")


@dataclass
class TaskAnnotations:
    """Column store of one video's annotations for one task."""

    kind: str
    s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    e: np.ndarray = field(default_factory=lambda: np.zeros(0))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    def __len__(self):
        return int(self.s.shape[0])

    def records(self) -> list[SegmentAnnotation]:
        return [SegmentAnnotation(float(a), float(b), tuple(row.tolist()))
                for a, b, row in zip(self.s, self.e, self.labels)]

    @classmethod
    def from_records(cls, kind: str, records, width: int) -> TaskAnnotations:
        if not records:
            return cls(kind, np.zeros(0), np.zeros(0), np.zeros((0, width)))
        return cls(kind,
                   np.array([r.s for r in records], dtype=np.float64),
                   np.array([r.e for r in records], dtype=np.float64),
                   np.array([r.label for r in records], dtype=np.float64).reshape(len(records), width))


# --------------------------------------------------------------------- necks


def init_neck(store: dc.ParameterStore, prefix: str, D: int, rng: np.random.Generator) -> None:
    store.add(prefix + "W1", dc.uniform_init(rng, D, (D, D)))
    store.add(prefix + "b1", dc.uniform_init(rng, D, (D,)))
    store.add(prefix + "W2", dc.uniform_init(rng, D, (D, D)))
    store.add(prefix + "b2", dc.uniform_init(rng, D, (D,)))


def neck_forward(x, store, prefix: str, activation=dc.relu) -> dc.Tensor:
    """Two affine maps D -> D with a rectifier in between, applied per node."""
    W1 = store[prefix + "W1"]
    if x.shape[-1] != W1.shape[0]:
        raise DimensionError(f"neck of width {W1.shape[0]} got features {x.shape}")
    h = activation(dc.linear(x, W1, store[prefix + "b1"]))
    return dc.linear(h, store[prefix + "W2"], store[prefix + "b2"])


# --------------------------------------------------------------------- align


@dataclass
class Windows:
    """Node membership of a batch of annotation windows.

    ``nodes[k]`` belongs to window ``seg[k]``; ``fallback[w]`` marks windows
    with no node strictly inside that fell back to the node nearest their
    midpoint.
    """

    nodes: np.ndarray
    seg: np.ndarray
    fallback: np.ndarray
    count: int


def window_members(pe, offsets, video, s, e) -> Windows:
    pe = np.asarray(pe, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.intp)
    video = np.asarray(video, dtype=np.intp)
    s = np.asarray(s, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if np.any(s >= e):
        raise ValidationError("align window needs s < e")
    nw = s.shape[0]
    lo = np.empty(nw, dtype=np.intp)
    hi = np.empty(nw, dtype=np.intp)
    near = np.empty(nw, dtype=np.intp)
    for v in np.unique(video):
        a, b = offsets[v], offsets[v + 1]
        seg = pe[a:b]
        sel = video == v
        lo[sel] = a + np.searchsorted(seg, s[sel], side="right")
        hi[sel] = a + np.searchsorted(seg, e[sel], side="left")
        mid = 0.5 * (s[sel] + e[sel])
        j = np.searchsorted(seg, mid)
        right = np.minimum(j, b - a - 1)
        left = np.maximum(j - 1, 0)
        pick = np.where(np.abs(seg[left] - mid) <= np.abs(seg[right] - mid), left, right)
        near[sel] = a + pick
    counts = np.maximum(hi - lo, 0)
    fallback = counts == 0
    lo = np.where(fallback, near, lo)
    counts = np.where(fallback, 1, counts)
    seg_ids = np.repeat(np.arange(nw), counts)
    starts = np.repeat(lo - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    nodes = starts + np.arange(seg_ids.shape[0])
    return Windows(nodes.astype(np.intp), seg_ids.astype(np.intp), fallback, nw)


def align_windows(x, windows: Windows) -> dc.Tensor:
    return dc.segment_mean(dc.gather_rows(x, windows.nodes), windows.seg, windows.count)


def align(xk, pe, s: float, e: float):
    """Mean of the rows whose timestamp lies strictly inside (s, e).

    Returns ``(vector, used_fallback)``.
    """
    pe = np.asarray(pe, dtype=np.float64)
    if not s < e:
        raise ValidationError(f"align window needs s < e, got ({s}, {e})")
    w = window_members(pe, [0, pe.shape[0]], [0], [s], [e])
    out = align_windows(xk, w)
    return dc.reshape(out, (out.shape[1],)), bool(w.fallback[0])


# --------------------------------------------------------------------- heads


def head_shapes(spec: TaskSpec, D: int) -> dict[str, tuple[int, int]]:
    if spec.kind == "recognition":
        return {"verb": (D, spec.verbs), "noun": (D, spec.nouns)}
    if spec.kind == "state_change":
        return {"state": (D, 2)}
    if spec.kind == "keyframe":
        return {"node": (D, 1)}
    if spec.kind == "anticipation":
        return {"verb": (D, spec.horizon * spec.verbs), "noun": (D, spec.horizon * spec.nouns)}
    return {"loc": (D, spec.classes + 2)}


def init_head(store, prefix: str, spec: TaskSpec, D: int, rng: np.random.Generator) -> None:
    for key, (din, dout) in head_shapes(spec, D).items():
        store.add(f"{prefix}{key}.W", dc.uniform_init(rng, din, (din, dout)))
        store.add(f"{prefix}{key}.b", dc.uniform_init(rng, din, (dout,)))


def head_raw(spec: TaskSpec, store, prefix: str, feats) -> dict[str, dc.Tensor]:
    """Unactivated head outputs; these are what logits-level fusion sums."""
    out = {}
    for key in head_shapes(spec, feats.shape[1]):
        W = store[f"{prefix}{key}.W"]
        if W.shape[0] != feats.shape[1]:
            raise DimensionError(f"{spec.name} head expects width {W.shape[0]}, got {feats.shape}")
        out[key] = dc.linear(feats, W, store[f"{prefix}{key}.b"])
    return out


def finalize(spec: TaskSpec, raw: dict[str, dc.Tensor], scale=1.0) -> dict[str, np.ndarray]:
    """Turn raw head outputs into task outputs (plain arrays, no tape)."""
    if spec.kind == "localization":
        z = raw["loc"].data
        k = spec.classes
        scale = np.asarray(scale, dtype=np.float64).reshape(-1, 1) if np.ndim(scale) else scale
        return {"scores": 1.0 / (1.0 + np.exp(-z[:, :k])),
                "offsets": np.logaddexp(0.0, z[:, k:]) * scale}
    if spec.kind == "anticipation":
        b = raw["verb"].shape[0]
        return {"verb": raw["verb"].data.reshape(b, spec.horizon, spec.verbs),
                "noun": raw["noun"].data.reshape(b, spec.horizon, spec.nouns)}
    if spec.kind == "keyframe":
        return {"node": raw["node"].data[:, 0]}
    return {k: v.data for k, v in raw.items()}


def head_forward(spec: TaskSpec, store, prefix: str, feats, scale=1.0,
                 stage: int | None = None) -> dict[str, np.ndarray]:
    """Decoded head outputs; ``stage`` names the backbone stage ``feats`` came from."""
    if stage is not None and stage > 0 and spec.stages != "all":
        raise UsageError(f"task {spec.name!r} reads only the first stage, got stage {stage}")
    return finalize(spec, head_raw(spec, store, prefix, feats), scale)


def keyframe_predict(scores, pe) -> float:
    """Time of the highest-scoring node (first one on ties)."""
    return float(np.asarray(pe)[int(np.argmax(scores))])


def padded_groups(seg: np.ndarray, count: int):
    """Index matrix (count x width) and mask laying out ragged groups row-wise."""
    sizes = np.bincount(seg, minlength=count)
    width = max(int(sizes.max()) if sizes.size else 1, 1)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    pos = np.arange(seg.shape[0]) - starts[seg]
    idx = np.zeros((count, width), dtype=np.intp)
    mask = np.zeros((count, width), dtype=bool)
    idx[seg, pos] = np.arange(seg.shape[0])
    mask[seg, pos] = True
    return idx, mask


def keyframe_targets(pe_members, seg, count, keyframes) -> np.ndarray:
    """Position within each window of the member node nearest the keyframe."""
    idx, mask = padded_groups(seg, count)
    dist = np.where(mask, np.abs(pe_members[idx] - np.asarray(keyframes)[:, None]), np.inf)
    return np.argmin(dist, axis=1)


# -------------------------------------------------------------------- losses


def task_loss(spec: TaskSpec, raw: dict[str, dc.Tensor], target: dict) -> dc.Tensor:
    """Scalar training loss of one task given raw head outputs.

    ``target`` keys: recognition ``verb``/``noun``; state_change ``state``;
    keyframe ``seg``, ``count``, ``pos``; anticipation ``verb``/``noun``
    (B x Z); localization ``onehot`` (N x K), ``positive`` (bool N),
    ``offsets`` (N x 2, already divided by the stage scale).
    """
    if spec.kind == "recognition":
        return dc.add(dc.cross_entropy(raw["verb"], target["verb"]),
                      dc.cross_entropy(raw["noun"], target["noun"]))
    if spec.kind == "state_change":
        return dc.cross_entropy(raw["state"], target["state"])
    if spec.kind == "keyframe":
        idx, mask = padded_groups(target["seg"], target["count"])
        flat = dc.reshape(raw["node"], (raw["node"].shape[0],))
        grid = dc.reshape(dc.gather_rows(dc.reshape(flat, (-1, 1)), idx.reshape(-1)), idx.shape)
        return dc.cross_entropy(grid, target["pos"], mask=mask)
    if spec.kind == "anticipation":
        v = dc.reshape(raw["verb"], (-1, spec.verbs))
        n = dc.reshape(raw["noun"], (-1, spec.nouns))
        return dc.add(dc.cross_entropy(v, np.asarray(target["verb"]).reshape(-1)),
                      dc.cross_entropy(n, np.asarray(target["noun"]).reshape(-1)))
    k = spec.classes
    loc = raw["loc"]
    cls = dc.columns(loc, 0, k)
    loss = dc.binary_ce(cls, target["onehot"])
    pos = np.flatnonzero(target["positive"])
    if pos.size:
        off = dc.softplus(dc.columns(dc.gather_rows(loc, pos), k, k + 2))
        loss = dc.add(loss, dc.mean(dc.abs_(dc.sub(off, target["offsets"][pos]))))
    return loss


# ---------------------------------------------------------- localization io


def tiou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def nms(cands, iou: float):
    """Greedy hard NMS per class over (t_s, t_e, class, score) tuples.

    Order is by descending score, ties broken by input position.
    """
    order = sorted(range(len(cands)), key=lambda i: (-cands[i][3], i))
    kept = []
    for i in order:
        c = cands[i]
        if all(k[2] != c[2] or tiou(k, c) <= iou for k in kept):
            kept.append(c)
    return kept


def decode_localization(scores, offsets, pe, score_threshold: float = 0.1,
                        nms_iou: float = 0.5, max_candidates: int = 2000):
    """Candidate intervals ``(pe - left, pe + right)`` above threshold, then NMS.

    ``scores`` is N x K probabilities, ``offsets`` N x 2 seconds.
    """
    scores = np.asarray(scores, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    pe = np.asarray(pe, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    node, cls = np.nonzero(scores > score_threshold)
    if node.size > max_candidates:
        top = np.argsort(-scores[node, cls], kind="stable")[:max_candidates]
        top.sort()
        node, cls = node[top], cls[top]
    cands = [(float(pe[i] - offsets[i, 0]), float(pe[i] + offsets[i, 1]), int(c), float(scores[i, c]))
             for i, c in zip(node.tolist(), cls.tolist())]
    return nms(cands, nms_iou)


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope for a ranked list of hits."""
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, tp.size + 1)
    rec = ctp / n_gt
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    for i in range(mprec.size - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def match_detections(dets, gts, threshold: float) -> np.ndarray:
    """Greedy matching in score order; each ground truth is used once.

    ``dets``: (video, t_s, t_e, score); ``gts``: (video, t_s, t_e).
    Returns hit flags in descending-score order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][3], i))
    used = [False] * len(gts)
    tp = np.zeros(len(dets))
    for r, i in enumerate(order):
        v, a, b, _ = dets[i]
        best, best_j = 0.0, -1
        for j, (gv, ga, gb) in enumerate(gts):
            if gv != v or used[j]:
                continue
            o = tiou((a, b), (ga, gb))
            if o >= threshold and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[best_j] = True
            tp[r] = 1.0
    return tp


def average_precision(dets, gts, threshold: float) -> float:
    return interpolated_ap(match_detections(dets, gts, threshold), len(gts))


def mean_ap(detections, ground_truth, thresholds=TIOU_THRESHOLDS) -> dict[str, float]:
    """mAP (%) per tIoU threshold and averaged.

    ``detections``: (video, t_s, t_e, class, score);
    ``ground_truth``: (video, t_s, t_e, class).
    Classes without ground truth are skipped.
    """
    classes = sorted({g[3] for g in ground_truth})
    out = {}
    for th in thresholds:
        aps = []
        for c in classes:
            d = [(v, a, b, s) for v, a, b, k, s in detections if k == c]
            g = [(v, a, b) for v, a, b, k in ground_truth if k == c]
            aps.append(average_precision(d, g, th))
        out[f"mAP@{th:.1f}"] = 100.0 * float(np.mean(aps)) if aps else 0.0
    out["mAP"] = float(np.mean([out[f"mAP@{th:.1f}"] for th in thresholds]))
    return out


# ------------------------------------------------------------------- metrics


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def top1(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.intp)
    if scores.shape[0] != labels.shape[0]:
        raise ValidationError(f"{scores.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size == 0:
        raise ValidationError("no samples to score")
    return 100.0 * float(np.mean(np.argmax(scores, axis=1) == labels))


def metric(spec: TaskSpec, predictions, ground_truth) -> dict[str, float]:
    """Flat metric record for one task.

    recognition: predictions ``{"verb", "noun"}`` score matrices, ground truth
    ``{"verb", "noun"}`` ids. state_change: ``{"state"}`` scores vs ``{"state"}``.
    keyframe: predicted times vs true times. anticipation: predicted id arrays
    (B x Z) per ``verb``/``noun`` vs true arrays. localization: detection and
    ground-truth tuples as in :func:`mean_ap`.
    """
    if spec.kind == "recognition":
        return {"verb_top1": top1(predictions["verb"], ground_truth["verb"]),
                "noun_top1": top1(predictions["noun"], ground_truth["noun"])}
    if spec.kind == "state_change":
        return {"accuracy": top1(predictions["state"], ground_truth["state"])}
    if spec.kind == "keyframe":
        p = np.asarray(predictions, dtype=np.float64)
        t = np.asarray(ground_truth, dtype=np.float64)
        if p.shape != t.shape:
            raise ValidationError(f"{p.shape} keyframe predictions for {t.shape} truths")
        if p.size == 0:
            raise ValidationError("no samples to score")
        return {"keyframe_error": float(np.mean(np.abs(p - t)))}
    if spec.kind == "anticipation":
        out = {}
        for part in ("verb", "noun"):
            p = np.asarray(predictions[part])
            t = np.asarray(ground_truth[part])
            if p.shape != t.shape:
                raise ValidationError(f"{p.shape} {part} sequences for {t.shape} truths")
            if p.size == 0:
                raise ValidationError("no samples to score")
            z = p.shape[1]
            out[f"{part}_ed"] = float(np.mean([edit_distance(a, b) / z for a, b in zip(p, t)]))
        return out
    if spec.kind == "localization":
        if not ground_truth:
            raise ValidationError("no ground-truth intervals to score")
        return mean_ap(predictions, ground_truth)
    raise UsageError(f"no metric for kind {spec.kind!r}")


# headline number per kind and whether larger is better
HEADLINE = {
    "recognition": ("verb_top1", True),
    "state_change": ("accuracy", True),
    "keyframe": ("keyframe_error", False),
    "anticipation": ("verb_ed", False),
    "localization": ("mAP", True),
}

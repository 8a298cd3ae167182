"""Backbone, necks and heads wired together, plus the backpack path for a novel task.

Parameter names::

    backbone.s<stage>.l<layer>.*     shared TDGC layers
    neck.<task>.*                    projection neck per task
    head.<task>.*                    head per task
    head.<novel>.via.<support>.*     extra heads for logits-level fusion
    interact.<support>.m<layer>.*    refinement maps per support task
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, GraphHierarchy, backbone_forward, init_backbone
from .backpack import (ActivationRecord, PrototypeSet, fuse_features, fuse_logits,
                       group_mean_prototypes, init_interaction, interact)
from .errors import UsageError, ValidationError
from .tasks import (TaskSpec, Windows, finalize, head_raw, init_head, init_neck,
                    keyframe_targets, neck_forward, task_loss, window_members)
from .tgraph import TemporalGraph, batch_graphs


@dataclass
class BackpackConfig:
    k: int = 16
    M: int = 2
    fusion: str = "features"
    requery: bool = False
    coupling: str = "full"

    def __post_init__(self):
        if self.fusion not in ("features", "logits"):
            raise ValidationError(f"fusion must be 'features' or 'logits', got {self.fusion!r}")
        if self.coupling not in ("full", "zero", "none"):
            raise ValidationError(f"coupling must be full, zero or none, got {self.coupling!r}")
        if self.k < 1 or self.M < 1:
            raise ValidationError("backpack k and M must be positive")


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    graph: TemporalGraph
    vids: list[str]
    # per task: video index, start, end and label rows of every annotation
    video: dict[str, np.ndarray] = field(default_factory=dict)
    s: dict[str, np.ndarray] = field(default_factory=dict)
    e: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    windows: dict[str, Windows] = field(default_factory=dict)

    def size(self, task: str) -> int:
        return int(self.s[task].shape[0])


def make_batch(videos: Sequence, tasks: Sequence[str], tau: float) -> Batch:
    g = batch_graphs([(v.features, v.timestamps) for v in videos], tau)
    b = Batch(g, [v.vid for v in videos])
    for t in tasks:
        anns = [v.annotations[t] for v in videos]
        b.video[t] = np.concatenate([np.full(len(a), i, dtype=np.intp) for i, a in enumerate(anns)])
        b.s[t] = np.concatenate([a.s for a in anns])
        b.e[t] = np.concatenate([a.e for a in anns])
        b.labels[t] = np.concatenate([a.labels for a in anns], axis=0)
        if anns[0].kind != "localization":
            b.windows[t] = window_members(g.pe, g.offsets, b.video[t], b.s[t], b.e[t])
    return b


def localization_targets(spec: TaskSpec, g: TemporalGraph, batch: Batch, task: str):
    """Per-node class one-hots and stage-scaled offsets to the covering interval."""
    n = g.num_nodes
    onehot = np.zeros((n, spec.classes))
    offsets = np.zeros((n, 2))
    positive = np.zeros(n, dtype=bool)
    vid = g.video_of()
    s, e, lab, v = batch.s[task], batch.e[task], batch.labels[task], batch.video[task]
    scale = 2.0 ** g.stage
    for j in range(len(s)):
        inside = np.flatnonzero((vid == v[j]) & (g.pe >= s[j]) & (g.pe <= e[j]) & ~positive)
        positive[inside] = True
        onehot[inside, int(lab[j, 0])] = 1.0
        offsets[inside, 0] = (g.pe[inside] - s[j]) / scale
        offsets[inside, 1] = (e[j] - g.pe[inside]) / scale
    return {"onehot": onehot, "positive": positive, "offsets": offsets}


def task_targets(spec: TaskSpec, batch: Batch, task: str, g: TemporalGraph | None = None) -> dict:
    lab = batch.labels[task]
    if spec.kind == "recognition":
        return {"verb": lab[:, 0].astype(np.intp), "noun": lab[:, 1].astype(np.intp)}
    if spec.kind == "state_change":
        return {"state": lab[:, 0].astype(np.intp)}
    if spec.kind == "keyframe":
        w = batch.windows[task]
        pos = keyframe_targets(batch.graph.pe[w.nodes], w.seg, w.count, lab[:, 0])
        return {"seg": w.seg, "count": w.count, "pos": pos}
    if spec.kind == "anticipation":
        z = spec.horizon
        return {"verb": lab[:, :z].astype(np.intp), "noun": lab[:, z:].astype(np.intp)}
    return localization_targets(spec, g, batch, task)


# -------------------------------------------------------------------- model


class HierModel:
    """All parameters of one run in a single :class:`ParameterStore`."""

    def __init__(self, backbone: BackboneConfig, specs: dict[str, TaskSpec],
                 tasks: Sequence[str], seed: int, activation=dc.relu):
        self.cfg = backbone
        self.specs = dict(specs)
        self.tasks = list(tasks)
        self.activation = activation
        self.store = dc.ParameterStore()
        self.prototypes: dict[str, PrototypeSet] = {}
        self.novel: str | None = None
        self.backpack: BackpackConfig | None = None
        self.support: list[str] = []
        rng = np.random.default_rng(seed)
        init_backbone(self.store, backbone, rng)
        for t in self.tasks:
            self._add_task(t, rng)

    def _add_task(self, t: str, rng) -> None:
        init_neck(self.store, f"neck.{t}.", self.cfg.D, rng)
        init_head(self.store, f"head.{t}.", self.specs[t], self.cfg.D, rng)

    def config(self) -> dict:
        return {
            "backbone": asdict(self.cfg),
            "specs": {k: asdict(v) for k, v in sorted(self.specs.items())},
            "tasks": self.tasks,
            "support": self.support,
            "novel": self.novel,
            "backpack": asdict(self.backpack) if self.backpack else None,
        }

    # ---------------------------------------------------------- forward

    def hierarchy(self, batch: Batch) -> GraphHierarchy:
        return backbone_forward(batch.graph, self.cfg, self.store, self.activation)

    def stages(self, spec: TaskSpec, hier: GraphHierarchy) -> list[TemporalGraph]:
        return list(hier.graphs) if spec.stages == "all" else [hier.graphs[0]]

    def task_units(self, hier, batch: Batch, task: str, neck: str) -> list[dc.Tensor]:
        """Neck-projected features per unit: aligned segments, window nodes or stage nodes."""
        spec = self.specs[task]
        if spec.kind == "localization":
            return [neck_forward(g.x, self.store, f"neck.{neck}.", self.activation)
                    for g in self.stages(spec, hier)]
        xk = neck_forward(hier.graphs[0].x, self.store, f"neck.{neck}.", self.activation)
        w = batch.windows[task]
        if spec.kind == "keyframe":
            return [dc.gather_rows(xk, w.nodes)]
        return [dc.segment_mean(dc.gather_rows(xk, w.nodes), w.seg, w.count)]

    def task_raw(self, hier, batch: Batch, task: str) -> list[dict]:
        return [head_raw(self.specs[task], self.store, f"head.{task}.", u)
                for u in self.task_units(hier, batch, task, task)]

    def unit_loss(self, task: str, raws: list[dict], hier, batch: Batch) -> dc.Tensor:
        spec = self.specs[task]
        if spec.kind == "localization":
            total = None
            for g, raw in zip(self.stages(spec, hier), raws):
                l = task_loss(spec, raw, task_targets(spec, batch, task, g))
                total = l if total is None else dc.add(total, l)
            return dc.mul(total, 1.0 / len(raws))
        return task_loss(spec, raws[0], task_targets(spec, batch, task))

    def losses(self, batch: Batch, tasks: Sequence[str] | None = None) -> dict[str, dc.Tensor]:
        """One backbone pass, then every task's loss (tasks without samples skipped)."""
        hier = self.hierarchy(batch)
        out = {}
        for t in tasks or self.tasks:
            if batch.size(t) == 0:
                continue
            out[t] = self.unit_loss(t, self.task_raw(hier, batch, t), hier, batch)
        return out

    # --------------------------------------------------------- backpack

    def attach_novel(self, novel: str, spec: TaskSpec, bp: BackpackConfig, seed: int) -> None:
        if not self.prototypes:
            raise UsageError("no prototypes in the model; run build-backpack first")
        if novel in self.tasks:
            raise ValidationError(f"novel task {novel!r} is already a support task")
        self.support = sorted(self.prototypes)
        self.novel = novel
        self.backpack = bp
        self.specs[novel] = spec
        rng = np.random.default_rng(seed)
        self._add_task(novel, rng)
        for k in self.support:
            init_interaction(self.store, f"interact.{k}.", self.cfg.D, bp.M, rng)
            if bp.fusion == "logits":
                init_head(self.store, f"head.{novel}.via.{k}.", spec, self.cfg.D, rng)
        if bp.coupling == "zero":
            for name in self.store.names("interact."):
                if name.endswith(".W"):
                    self.store[name].data[...] = 0.0

    def novel_raw(self, hier, batch: Batch, records: list | None = None) -> list[dict]:
        """Raw head outputs of the novel task, fused with every support perspective."""
        task, bp = self.novel, self.backpack
        spec = self.specs[task]
        own = self.task_units(hier, batch, task, task)
        refined = {}
        for k in self.support:
            units = self.task_units(hier, batch, task, k)
            res = [interact(u, self.prototypes[k], self.store, f"interact.{k}.", bp.M,
                            min(bp.k, self.prototypes[k].size), bp.requery, bp.coupling)
                   for u in units]
            refined[k] = [r.refined for r in res]
            if records is not None:
                _record(records, batch, task, spec, k, self.prototypes[k], res,
                        self.stages(spec, hier))
        out = []
        for i, u in enumerate(own):
            if bp.fusion == "features":
                fused = fuse_features(u, [refined[k][i] for k in self.support])
                out.append(head_raw(spec, self.store, f"head.{task}.", fused))
            else:
                votes = [head_raw(spec, self.store, f"head.{task}.", u)]
                votes += [head_raw(spec, self.store, f"head.{task}.via.{k}.", refined[k][i])
                          for k in self.support]
                out.append(fuse_logits(votes))
        return out

    def novel_loss(self, batch: Batch) -> dc.Tensor:
        hier = self.hierarchy(batch)
        return self.unit_loss(self.novel, self.novel_raw(hier, batch), hier, batch)

    def trainable(self, policy: str = "finetune") -> list[str]:
        """Stage-2 trainables: backbone (unless frozen), novel neck/heads, interaction."""
        names = [] if policy == "freeze" else self.store.names("backbone.")
        names += self.store.names(f"neck.{self.novel}.")
        names += self.store.names(f"head.{self.novel}.")
        for n in self.store.names("interact."):
            if self.backpack.coupling == "full" or not n.endswith(".W"):
                names.append(n)
        return sorted(names)

    # ------------------------------------------------------- prediction

    def predict(self, batch: Batch, task: str, records: list | None = None) -> dict:
        """Decoded outputs of one task on one batch, without recording a tape."""
        spec = self.specs[task]
        with dc.no_grad():
            hier = self.hierarchy(batch)
            if task == self.novel:
                raws = self.novel_raw(hier, batch, records)
            elif task in self.tasks:
                raws = self.task_raw(hier, batch, task)
            else:
                raise UsageError(f"model has no head for task {task!r}")
        if spec.kind == "localization":
            stages = self.stages(spec, hier)
            return {"stages": [(g, finalize(spec, r, 2.0 ** g.stage)) for g, r in zip(stages, raws)]}
        return finalize(spec, raws[0])

    # ------------------------------------------------------- prototypes

    def aligned_support_features(self, batch: Batch, ar_task: str = "ar") -> dict[str, np.ndarray]:
        """Stage-1 features aligned on recognition windows, projected by each support neck."""
        with dc.no_grad():
            hier = self.hierarchy(batch)
            x = hier.graphs[0].x
            w = batch.windows[ar_task]
            out = {}
            for t in self.tasks:
                xk = neck_forward(x, self.store, f"neck.{t}.", self.activation)
                out[t] = dc.segment_mean(dc.gather_rows(xk, w.nodes), w.seg, w.count).data
        return out


def build_prototypes(model: HierModel, videos: Sequence, tau: float, batch_size: int = 8,
                     ar_task: str = "ar") -> dict[str, PrototypeSet]:
    """Frozen per-task prototypes: support-neck features averaged per verb-noun label."""
    if not videos:
        raise ValidationError("cannot build prototypes from an empty dataset")
    feats = {t: [] for t in model.tasks}
    labels = []
    for i in range(0, len(videos), batch_size):
        b = make_batch(videos[i:i + batch_size], [ar_task], tau)
        if b.size(ar_task) == 0:
            continue
        for t, f in model.aligned_support_features(b, ar_task).items():
            feats[t].append(f)
        labels.append(b.labels[ar_task])
    if not labels:
        raise ValidationError("no recognition annotations to build prototypes from")
    lab = np.concatenate(labels, axis=0).astype(np.int64)
    return {t: group_mean_prototypes(t, np.concatenate(f, axis=0), lab[:, 0], lab[:, 1])
            for t, f in feats.items()}


def _record(records, batch, task, spec, support, protos, results, stages) -> None:
    """Append activation rows; one record per aligned sample or per node."""
    if spec.aligned:
        names = [f"{batch.vids[v]}:{j}" for j, v in enumerate(batch.video[task])]
    elif spec.kind == "keyframe":
        nodes = batch.windows[task].nodes
        vid = batch.graph.video_of()[nodes]
        names = [f"{batch.vids[v]}:w{w}:n{n}" for w, (v, n) in
                 enumerate(zip(vid, nodes - batch.graph.offsets[vid]))]
    else:
        names = []
        for g in stages:
            vid = g.video_of()
            local = np.arange(g.num_nodes) - g.offsets[vid]
            names += [f"{batch.vids[v]}:s{g.stage}:n{n}" for v, n in zip(vid, local)]
    rows = np.concatenate([r.rows for r in results], axis=0)
    dist = np.concatenate([r.distances for r in results], axis=0)
    by_name = {r.sample: r for r in records}
    for name, rr, dd in zip(names, rows, dist):
        rec = by_name.get(name)
        if rec is None:
            rec = ActivationRecord(name)
            records.append(rec)
            by_name[name] = rec
        rec.add(support, protos, rr, dd)

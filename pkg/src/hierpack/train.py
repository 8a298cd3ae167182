"""Stage-1 multi-task pretraining, Stage-2 novel-task learning, evaluation, checkpoints.

Checkpoint layout (all integers little-endian u32)::

    b"HEPK" | version | header length | header (UTF-8 JSON: stage tag, config)
    | entry count | entries | 32-byte SHA-256 fingerprint of the config JSON

    entry := name length | name (UTF-8) | ndim | dims... | fp64 payload

Prototype sets are stored as ``proto.<task>.matrix`` and ``proto.<task>.labels``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig
from .backpack import PrototypeSet
from .data import atomic_write_bytes
from .errors import FormatError, NumericError, UsageError, ValidationError
from .model import BackpackConfig, HierModel, build_prototypes, make_batch
from .tasks import TaskSpec, decode_localization, keyframe_predict, metric

CKPT_MAGIC = b"HEPK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    tasks: list[str] = field(default_factory=lambda: ["ar", "oscc", "pnr", "lta", "mq"])
    novel: str | None = None
    novel_steps: int = 500
    fusion: str = "features"
    freeze_policy: str = "finetune"

    def __post_init__(self):
        if self.steps < 1 or self.novel_steps < 1 or self.batch_size < 1:
            raise ValidationError("steps, novel_steps and batch_size must be positive")
        if self.freeze_policy not in ("finetune", "freeze"):
            raise ValidationError(f"freeze_policy must be finetune or freeze, got {self.freeze_policy!r}")
        if self.novel is not None and self.novel in self.tasks:
            raise ValidationError(f"novel task {self.novel!r} is also a support task")


# --------------------------------------------------------------- checkpoints


def fingerprint(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    prototypes: dict[str, PrototypeSet] = field(default_factory=dict)
    stage: str = "stage1"

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def to_bytes(self) -> bytes:
        u32 = struct.Struct("<I").pack
        header = canonical_json({"stage": self.stage, "config": self.config}).encode()
        entries = dict(self.params)
        for t, p in sorted(self.prototypes.items()):
            entries[f"proto.{t}.matrix"] = p.matrix
            entries[f"proto.{t}.labels"] = p.labels.astype(np.float64)
        out = [CKPT_MAGIC, u32(CKPT_VERSION), u32(len(header)), header, u32(len(entries))]
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype="<f8")
            bname = name.encode()
            out += [u32(len(bname)), bname, u32(arr.ndim)]
            out += [u32(d) for d in arr.shape]
            out.append(arr.tobytes())
        out.append(bytes.fromhex(self.fingerprint))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> Checkpoint:
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(raw):
                raise FormatError(f"{source}: truncated at offset {pos} (need {n} more bytes)")
            chunk = raw[pos:pos + n]
            pos += n
            return chunk

        def u32():
            return struct.unpack("<I", take(4))[0]

        if take(4) != CKPT_MAGIC:
            raise FormatError(f"{source}: not a checkpoint (bad magic at offset 0)")
        version = u32()
        if version != CKPT_VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        header = json.loads(take(u32()).decode())
        params, protos = {}, {}
        for _ in range(u32()):
            name = take(u32()).decode()
            dims = [u32() for _ in range(u32())]
            n = int(np.prod(dims)) if dims else 1
            params[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        stored = take(32).hex()
        if pos != len(raw):
            raise FormatError(f"{source}: {len(raw) - pos} trailing bytes after offset {pos}")
        for name in [n for n in params if n.startswith("proto.") and n.endswith(".matrix")]:
            task = name[len("proto."):-len(".matrix")]
            labels = params.pop(f"proto.{task}.labels").astype(np.int64)
            protos[task] = PrototypeSet(task, params.pop(name), labels)
        ck = cls(params, header["config"], protos, header["stage"])
        if ck.fingerprint != stored:
            raise FormatError(f"{source}: config fingerprint mismatch (file corrupted)")
        return ck


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Atomically write ``ckpt``; returns the SHA-256 of the written bytes."""
    payload = ckpt.to_bytes()
    atomic_write_bytes(Path(path), payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path, expect_fingerprint: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ck = Checkpoint.from_bytes(path.read_bytes(), str(path))
    if expect_fingerprint is not None and ck.fingerprint != expect_fingerprint:
        raise ValidationError(f"{path}: configuration drift (fingerprint {ck.fingerprint[:12]} "
                              f"!= expected {expect_fingerprint[:12]})")
    return ck


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def model_config(model: HierModel, train: TrainConfig) -> dict:
    return {"model": model.config(), "train": asdict(train)}


def to_checkpoint(model: HierModel, train: TrainConfig, stage: str) -> Checkpoint:
    return Checkpoint(model.store.snapshot(), model_config(model, train), dict(model.prototypes), stage)


def model_from_checkpoint(ck: Checkpoint) -> HierModel:
    cfg = ck.config["model"]
    backbone = BackboneConfig(**cfg["backbone"])
    specs = {k: TaskSpec(**v) for k, v in cfg["specs"].items()}
    model = HierModel.__new__(HierModel)
    model.cfg = backbone
    model.specs = specs
    model.tasks = list(cfg["tasks"])
    model.activation = dc.relu
    model.store = dc.ParameterStore()
    model.store.load(ck.params)
    model.prototypes = dict(ck.prototypes)
    model.support = list(cfg["support"])
    model.novel = cfg["novel"]
    model.backpack = BackpackConfig(**cfg["backpack"]) if cfg["backpack"] else None
    return model


# ------------------------------------------------------------------- logging


class TrainLog:
    """Append-only TSV of (step, task, loss, wall-clock seconds)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[tuple[int, str, float]] = []
        self.t0 = time.perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step\ttask\tloss\twall_clock\n")

    def __call__(self, step: int, task: str, loss: float) -> None:
        self.rows.append((step, task, loss))
        if self.path:
            with self.path.open("a") as fh:
                fh.write(f"{step}\t{task}\t{loss!r}\t{time.perf_counter() - self.t0:.3f}\n")

    def curve(self, task: str) -> list[float]:
        return [l for _, t, l in self.rows if t == task]


# ------------------------------------------------------------------ training


def batches(videos: Sequence, batch_size: int, seed: int, stream: int):
    """Endless shuffled batches; each epoch is a fresh seeded permutation."""
    rng = np.random.default_rng([seed, stream])
    n = len(videos)
    bs = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - bs + 1, bs):
            yield [videos[j] for j in perm[i:i + bs]]


def _check_finite(value: float, step: int, task: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {task} loss at step {step}", step=step)


def _require_annotations(videos, tasks) -> None:
    if not videos:
        raise ValidationError("training split is empty")
    for t in tasks:
        if sum(len(v.annotations.get(t, ())) for v in videos) == 0:
            raise ValidationError(f"task {t!r} has no annotations in the training split")


def train_steps(model: HierModel, videos, tasks, cfg: TrainConfig, steps: int,
                loss_fn: Callable, trainable: Sequence[str], log: Callable | None = None,
                stream: int = 1, every: int = 1) -> None:
    opt = dc.Adam(model.store, trainable, lr=cfg.lr)
    source = batches(videos, cfg.batch_size, cfg.seed, stream)
    for step in range(steps):
        batch = make_batch(next(source), tasks, model.cfg.tau)
        per_task = loss_fn(batch)
        total = None
        for t, l in per_task.items():
            _check_finite(float(l.data), step, t)
            total = l if total is None else dc.add(total, l)
        if total is None:
            continue
        total.backward()
        opt.step()
        model.store.zero_grad()
        if log is not None and step % every == 0:
            for t, l in per_task.items():
                log(step, t, float(l.data))


def stage1_mtl(cfg: TrainConfig, backbone: BackboneConfig, specs: dict[str, TaskSpec],
               train_videos, log: Callable | None = None, steps: int | None = None) -> HierModel:
    """Joint training of all support tasks on one shared backbone (uniform loss weights)."""
    _require_annotations(train_videos, cfg.tasks)
    model = HierModel(backbone, specs, cfg.tasks, cfg.seed)
    train_steps(model, train_videos, cfg.tasks, cfg, steps or cfg.steps,
                lambda b: model.losses(b, cfg.tasks), model.store.names(), log)
    return model


def attach_prototypes(model: HierModel, videos, batch_size: int = 8) -> dict[str, PrototypeSet]:
    model.prototypes = build_prototypes(model, videos, model.cfg.tau, batch_size)
    return model.prototypes


def stage2_novel(cfg: TrainConfig, ckpt: Checkpoint, novel_videos, spec: TaskSpec,
                 bp: BackpackConfig, log: Callable | None = None) -> HierModel:
    """Learn the novel task on top of a Stage-1 model carrying prototypes.

    Only the novel task's annotations are read. Support necks and prototypes
    stay frozen; the backbone follows ``cfg.freeze_policy``.
    """
    if not ckpt.prototypes:
        raise UsageError("checkpoint has no prototypes; run build-backpack first")
    novel = cfg.novel
    if novel is None:
        raise ValidationError("no novel task configured")
    _require_annotations(novel_videos, [novel])
    model = model_from_checkpoint(ckpt)
    model.attach_novel(novel, spec, bp, cfg.seed)
    trainable = model.trainable(cfg.freeze_policy)
    keep = set(trainable)
    for name, t in model.store.items():
        if name not in keep:
            t.requires_grad = False
            t.grad = None
    train_steps(model, novel_videos, [novel], cfg, cfg.novel_steps,
                lambda b: {novel: model.novel_loss(b)}, trainable, log, stream=2)
    return model


def single_task(cfg: TrainConfig, backbone: BackboneConfig, spec: TaskSpec, videos,
                log: Callable | None = None, stream: int = 2) -> HierModel:
    """Baseline: the same architecture trained from scratch on one task only.

    ``stream`` picks the batch order; the default matches Stage 2 so the
    baseline and the backpack see batches in the same sequence.
    """
    solo = TrainConfig(**{**asdict(cfg), "tasks": [spec.name], "novel": None})
    _require_annotations(videos, [spec.name])
    model = HierModel(backbone, {spec.name: spec}, [spec.name], cfg.seed)
    train_steps(model, videos, [spec.name], solo, cfg.novel_steps,
                lambda b: model.losses(b, [spec.name]), model.store.names(), log, stream=stream)
    return model


# ---------------------------------------------------------------- evaluation


def collect_predictions(model: HierModel, videos, task: str, batch_size: int = 8,
                        records: list | None = None, score_threshold: float = 0.1,
                        nms_iou: float = 0.5):
    """Predictions and ground truth of ``task`` over ``videos`` in metric format."""
    spec = model.specs[task]
    preds, truth = [], []
    for i in range(0, len(videos), batch_size):
        chunk = videos[i:i + batch_size]
        b = make_batch(chunk, [task], model.cfg.tau)
        if b.size(task) == 0:
            continue
        out = model.predict(b, task, records)
        lab = b.labels[task]
        if spec.kind == "localization":
            for v in range(len(chunk)):
                sc, off, pe = [], [], []
                for g, o in out["stages"]:
                    sel = g.video_of() == v
                    sc.append(o["scores"][sel])
                    off.append(o["offsets"][sel])
                    pe.append(g.pe[sel])
                dets = decode_localization(np.concatenate(sc), np.concatenate(off),
                                           np.concatenate(pe), score_threshold, nms_iou)
                preds += [(b.vids[v], a, c, k, s) for a, c, k, s in dets]
            truth += [(b.vids[v], float(s), float(e), int(l[0]))
                      for v, s, e, l in zip(b.video[task], b.s[task], b.e[task], lab)]
        elif spec.kind == "keyframe":
            w = b.windows[task]
            pe = b.graph.pe[w.nodes]
            for j in range(w.count):
                sel = w.seg == j
                preds.append(keyframe_predict(out["node"][sel], pe[sel]))
            truth += lab[:, 0].tolist()
        elif spec.kind == "anticipation":
            z = spec.horizon
            preds.append({"verb": out["verb"].argmax(-1), "noun": out["noun"].argmax(-1)})
            truth.append({"verb": lab[:, :z].astype(np.intp), "noun": lab[:, z:].astype(np.intp)})
        elif spec.kind == "recognition":
            preds.append(out)
            truth.append({"verb": lab[:, 0].astype(np.intp), "noun": lab[:, 1].astype(np.intp)})
        else:
            preds.append(out)
            truth.append({"state": lab[:, 0].astype(np.intp)})
    if spec.kind in ("recognition", "state_change", "anticipation"):
        if not preds:
            return {}, {}
        preds = {k: np.concatenate([p[k] for p in preds]) for k in preds[0]}
        truth = {k: np.concatenate([t[k] for t in truth]) for k in truth[0]}
    return preds, truth


def evaluate(model: HierModel, videos, task: str, **kw) -> dict[str, float]:
    """Deterministic metric record of one task; parameters are not touched."""
    if not videos:
        raise ValidationError("evaluation split is empty")
    if task != model.novel and task not in model.tasks:
        raise UsageError(f"checkpoint has no head for task {task!r}")
    preds, truth = collect_predictions(model, videos, task, **kw)
    if (isinstance(truth, dict) and not truth) or (isinstance(truth, list) and not truth):
        raise ValidationError(f"no {task} annotations in the evaluation split")
    return metric(model.specs[task], preds, truth)

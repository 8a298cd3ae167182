"""Deterministic synthetic multi-task videos and the on-disk dataset format.

Every random draw comes from a splitmix64 hash of ``(seed, stream, keys...)``
so a value never depends on how many other values were drawn before it.

Layout written by :func:`generate`::

    <root>/manifest.txt
    <root>/features/<video>.hepf
    <root>/labels/<task>.tsv

Manifest grammar (one record per line, ``#`` starts a comment)::

    hierpack-manifest <version>
    seed <int>
    verbs <int>
    nouns <int>
    classes <int>
    dim <int>
    horizon <int>
    segment <seconds>
    task <name> <kind> <label file>
    video <id> <N> <split> <feature file>
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .tasks import TaskAnnotations, TaskSpec, default_tasks

FEATURE_MAGIC = b"HEPF"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1
SEGMENT_SECONDS = 1.0
KEYFRAME_FRACTION = 0.6

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream ids keep unrelated draws apart
_VOCAB, _EMBED, _STATE, _TRANS, _START, _LEN, _ACT, _DUR, _NOISE = range(1, 10)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_bits(seed: int, stream: int, *keys) -> np.ndarray:
    """64-bit hash of (seed, stream, keys); keys broadcast like numpy arrays."""
    with np.errstate(over="ignore"):
        z = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * np.uint64(stream + 1))
        for k in keys:
            z = _mix(z ^ (np.asarray(k, dtype=np.uint64) * _GOLDEN + _GOLDEN))
    return np.asarray(z, dtype=np.uint64)


def counter_uniform(seed: int, stream: int, *keys) -> np.ndarray:
    bits = counter_bits(seed, stream, *keys)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def counter_normal(seed: int, stream: int, *keys) -> np.ndarray:
    """Standard normals by Box-Muller on two hashed uniforms."""
    u1 = counter_uniform(seed, stream, *keys, 0)
    u2 = counter_uniform(seed, stream, *keys, 1)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


@dataclass
class GenConfig:
    videos: int = 200
    verbs: int = 12
    nouns: int = 16
    actions: int = 24
    dim: int = 128
    sigma: float = 0.3
    temperature: float = 0.5
    min_segments: int = 96
    max_segments: int = 128
    min_duration: int = 1
    max_duration: int = 4
    horizon: int = 4
    val_fraction: float = 0.2

    def validate(self) -> None:
        if self.verbs < 2 or self.nouns < 2:
            raise ValidationError("need at least two verbs and two nouns")
        if self.actions < max(self.verbs, self.nouns) or self.actions > self.verbs * self.nouns:
            raise ValidationError(f"actions must lie in [max(V, C), V*C], got {self.actions}")
        if self.sigma < 0 or self.temperature <= 0:
            raise ValidationError("sigma must be >= 0 and temperature > 0")
        if self.videos < 1 or self.dim < 1 or self.horizon < 1:
            raise ValidationError("videos, dim and horizon must be positive")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ValidationError("need 1 <= min_segments <= max_segments")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValidationError("need 1 <= min_duration <= max_duration")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in [0, 1)")


@dataclass
class Vocabulary:
    """The latent world shared by every video of one dataset."""

    verb: np.ndarray          # action -> verb id
    noun: np.ndarray          # action -> noun id
    changes_state: np.ndarray  # verb -> bool
    embedding: np.ndarray     # action -> unit vector (A x D)
    transition: np.ndarray    # A x A row-stochastic, zero diagonal


def vocabulary(cfg: GenConfig, seed: int) -> Vocabulary:
    cfg.validate()
    base = max(cfg.verbs, cfg.nouns)
    pairs = [(a % cfg.verbs, a % cfg.nouns) for a in range(base)]
    seen, draw = set(pairs), 0
    while len(pairs) < cfg.actions:
        v = int(counter_uniform(seed, _VOCAB, draw, 0) * cfg.verbs)
        n = int(counter_uniform(seed, _VOCAB, draw, 1) * cfg.nouns)
        draw += 1
        if (v, n) not in seen:
            seen.add((v, n))
            pairs.append((v, n))
    verb = np.array([p[0] for p in pairs], dtype=np.int64)
    noun = np.array([p[1] for p in pairs], dtype=np.int64)
    flags = counter_uniform(seed, _STATE, np.arange(cfg.verbs)) < 0.5
    flags[0], flags[1] = True, False
    a = np.arange(cfg.actions)
    emb = counter_normal(seed, _EMBED, a[:, None], np.arange(cfg.dim)[None, :])
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    logits = counter_normal(seed, _TRANS, a[:, None], a[None, :]) / cfg.temperature
    logits[a, a] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    trans = np.exp(logits)
    trans /= trans.sum(axis=1, keepdims=True)
    return Vocabulary(verb, noun, flags, emb, trans)


@dataclass
class ScriptedVideo:
    vid: str
    actions: np.ndarray     # action id per script step
    durations: np.ndarray   # segments per script step
    features: np.ndarray    # N x D
    timestamps: np.ndarray  # N
    split: str = "train"
    annotations: dict[str, TaskAnnotations] = field(default_factory=dict)

    @property
    def num_segments(self) -> int:
        return int(self.timestamps.shape[0])


def _sample(cdf: np.ndarray, u: float) -> int:
    return int(min(np.searchsorted(cdf, u, side="right"), cdf.shape[0] - 1))


def script_video(cfg: GenConfig, vocab: Vocabulary, seed: int, index: int) -> ScriptedVideo:
    span = cfg.max_segments - cfg.min_segments + 1
    n = cfg.min_segments + int(counter_uniform(seed, _LEN, index) * span)
    dspan = cfg.max_duration - cfg.min_duration + 1
    acts, durs, total, step = [], [], 0, 0
    a = int(counter_uniform(seed, _START, index) * cfg.actions)
    cdfs = np.cumsum(vocab.transition, axis=1)
    while total < n:
        if step:
            a = _sample(cdfs[a], float(counter_uniform(seed, _ACT, index, step)))
        d = cfg.min_duration + int(counter_uniform(seed, _DUR, index, step) * dspan)
        d = min(d, n - total)
        acts.append(a)
        durs.append(d)
        total += d
        step += 1
    actions = np.array(acts, dtype=np.int64)
    durations = np.array(durs, dtype=np.int64)
    per_seg = np.repeat(actions, durations)
    noise = counter_normal(seed, _NOISE, index, np.arange(n)[:, None], np.arange(cfg.dim)[None, :])
    x = vocab.embedding[per_seg] + cfg.sigma * noise
    ts = (np.arange(n) + 0.5) * SEGMENT_SECONDS
    n_val = int(round(cfg.val_fraction * cfg.videos))
    split = "val" if index >= cfg.videos - n_val else "train"
    video = ScriptedVideo(f"v{index:05d}", actions, durations, x, ts, split)
    video.annotations = derive_annotations(video, vocab, cfg.horizon)
    return video


def derive_annotations(video: ScriptedVideo, vocab: Vocabulary, horizon: int) -> dict[str, TaskAnnotations]:
    """Labels of all five tasks, each a function of the same latent script."""
    starts = np.concatenate([[0], np.cumsum(video.durations)[:-1]]).astype(np.float64) * SEGMENT_SECONDS
    ends = starts + video.durations * SEGMENT_SECONDS
    verb = vocab.verb[video.actions]
    noun = vocab.noun[video.actions]
    ann = {
        "ar": TaskAnnotations("recognition", starts, ends, np.stack([verb, noun], 1).astype(np.float64)),
        "oscc": TaskAnnotations("state_change", starts, ends,
                                vocab.changes_state[verb].astype(np.float64)[:, None]),
        "pnr": TaskAnnotations("keyframe", starts, ends,
                               (starts + KEYFRAME_FRACTION * (ends - starts))[:, None]),
    }
    m = len(video.actions) - horizon
    if m > 0:
        fut = np.arange(m)[:, None] + 1 + np.arange(horizon)[None, :]
        labels = np.concatenate([verb[fut], noun[fut]], axis=1).astype(np.float64)
        ann["lta"] = TaskAnnotations("anticipation", starts[:m], ends[:m], labels)
    else:
        ann["lta"] = TaskAnnotations("anticipation", np.zeros(0), np.zeros(0), np.zeros((0, 2 * horizon)))
    run_start = np.concatenate([[True], verb[1:] != verb[:-1]])
    first = np.flatnonzero(run_start)
    last = np.concatenate([first[1:], [len(verb)]]) - 1
    ann["mq"] = TaskAnnotations("localization", starts[first], ends[last],
                                verb[first].astype(np.float64)[:, None])
    return ann


# ---------------------------------------------------------------- file io


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


_HEADER = struct.Struct("<4sIII")


def encode_features(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError(f"features must be N x D, got {x.shape}")
    n, d = x.shape
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d) + x.astype("<f4").tobytes()


def write_features(path: Path, x: np.ndarray) -> None:
    atomic_write_bytes(path, encode_features(x))


def read_features(path: Path, expect_n: int | None = None, expect_d: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    want = _HEADER.size + 4 * n * d
    if len(raw) != want:
        raise FormatError(f"{path}: header declares {n}x{d} ({want} bytes) but file has {len(raw)}; "
                          f"payload starts at offset {_HEADER.size}")
    if (expect_n is not None and n != expect_n) or (expect_d is not None and d != expect_d):
        raise FormatError(f"{path}: header {n}x{d} does not match manifest {expect_n}x{expect_d}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d).astype(np.float64)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_labels(task: str, kind: str, rows: Iterable[tuple[str, TaskAnnotations]]) -> str:
    lines = [f"# task={task} kind={kind}"]
    for vid, ann in rows:
        for s, e, lab in zip(ann.s, ann.e, ann.labels):
            if kind == "keyframe":
                payload = [_fmt(lab[0])]
            else:
                payload = [str(int(v)) for v in lab]
            lines.append("\t".join([vid, _fmt(s), _fmt(e)] + payload))
    return "\n".join(lines) + "\n"


def parse_labels(path: Path, kind: str) -> dict[str, TaskAnnotations]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    rows: dict[str, list] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 4:
            raise FormatError(f"{path}:{lineno}: expected video, s, e and a label")
        try:
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field") from None
        rows.setdefault(parts[0], []).append(vals)
    out = {}
    for vid, vals in rows.items():
        arr = np.array(vals, dtype=np.float64)
        out[vid] = TaskAnnotations(kind, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2:].copy())
    return out


# --------------------------------------------------------------- manifest


@dataclass
class VideoRecord:
    vid: str
    n: int
    split: str
    path: str


@dataclass
class DatasetManifest:
    root: Path
    version: int
    seed: int
    verbs: int
    nouns: int
    classes: int
    dim: int
    horizon: int
    segment: float = SEGMENT_SECONDS
    tasks: dict[str, tuple[str, str]] = field(default_factory=dict)  # name -> (kind, file)
    videos: list[VideoRecord] = field(default_factory=list)

    def task_specs(self) -> dict[str, TaskSpec]:
        return default_tasks(self.verbs, self.nouns, self.classes, self.horizon)

    def video(self, vid: str) -> VideoRecord:
        for v in self.videos:
            if v.vid == vid:
                return v
        raise KeyError(f"unknown video id {vid!r}")

    def render(self) -> str:
        lines = [f"hierpack-manifest {self.version}", f"seed {self.seed}", f"verbs {self.verbs}",
                 f"nouns {self.nouns}", f"classes {self.classes}", f"dim {self.dim}",
                 f"horizon {self.horizon}", f"segment {_fmt(self.segment)}"]
        lines += [f"task {name} {kind} {fn}" for name, (kind, fn) in self.tasks.items()]
        lines += [f"video {v.vid} {v.n} {v.split} {v.path}" for v in self.videos]
        return "\n".join(lines) + "\n"


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    head: dict[str, str] = {}
    tasks, videos, version = {}, [], None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "hierpack-manifest":
                version = int(parts[1])
            elif parts[0] == "task":
                tasks[parts[1]] = (parts[2], parts[3])
            elif parts[0] == "video":
                videos.append(VideoRecord(parts[1], int(parts[2]), parts[3], parts[4]))
            elif len(parts) == 2:
                head[parts[0]] = parts[1]
            else:
                raise FormatError(f"{path}:{lineno}: cannot parse {line!r}")
        except (IndexError, ValueError):
            raise FormatError(f"{path}:{lineno}: malformed record {line!r}") from None
    if version != MANIFEST_VERSION:
        raise FormatError(f"{path}: expected 'hierpack-manifest {MANIFEST_VERSION}' header")
    try:
        return DatasetManifest(path.parent, version, int(head["seed"]), int(head["verbs"]),
                               int(head["nouns"]), int(head["classes"]), int(head["dim"]),
                               int(head["horizon"]), float(head.get("segment", SEGMENT_SECONDS)),
                               tasks, videos)
    except KeyError as err:
        raise FormatError(f"{path}: missing header field {err.args[0]}") from None


def load_features(manifest: DatasetManifest, vid: str):
    """Feature matrix and segment-midpoint timestamps of one video."""
    rec = manifest.video(vid)
    x = read_features(manifest.root / rec.path, rec.n, manifest.dim)
    return x, (np.arange(rec.n) + 0.5) * manifest.segment


def generate(cfg: GenConfig, seed: int, root) -> DatasetManifest:
    """Write a complete synthetic dataset under ``root`` and return its manifest."""
    cfg.validate()
    root = Path(root)
    vocab = vocabulary(cfg, seed)
    videos = [script_video(cfg, vocab, seed, i) for i in range(cfg.videos)]
    specs = default_tasks(cfg.verbs, cfg.nouns, cfg.verbs, cfg.horizon)
    man = DatasetManifest(root, MANIFEST_VERSION, seed, cfg.verbs, cfg.nouns, cfg.verbs,
                          cfg.dim, cfg.horizon)
    for v in videos:
        rel = f"features/{v.vid}.hepf"
        write_features(root / rel, v.features)
        man.videos.append(VideoRecord(v.vid, v.num_segments, v.split, rel))
    for name, spec in specs.items():
        rel = f"labels/{name}.tsv"
        text = format_labels(name, spec.kind, ((v.vid, v.annotations[name]) for v in videos))
        atomic_write_text(root / rel, text)
        man.tasks[name] = (spec.kind, rel)
    atomic_write_text(root / "manifest.txt", man.render())
    return man


@dataclass
class Video:
    vid: str
    features: np.ndarray
    timestamps: np.ndarray
    split: str
    annotations: dict[str, TaskAnnotations]


class Dataset:
    """Videos of one split with annotations for the requested tasks only.

    Label files of tasks not requested are never opened.
    """

    def __init__(self, manifest: DatasetManifest, tasks: Iterable[str], split: str | None = None):
        self.manifest = manifest
        self.tasks = list(tasks)
        labels = {}
        for t in self.tasks:
            if t not in manifest.tasks:
                raise ValidationError(f"task {t!r} has no annotations in the manifest")
            kind, rel = manifest.tasks[t]
            labels[t] = parse_labels(manifest.root / rel, kind)
        self.videos: list[Video] = []
        for rec in manifest.videos:
            if split is not None and rec.split != split:
                continue
            x, ts = load_features(manifest, rec.vid)
            ann = {}
            for t in self.tasks:
                kind = manifest.tasks[t][0]
                width = manifest.task_specs()[t].label_width if t in manifest.task_specs() else 1
                ann[t] = labels[t].get(rec.vid, TaskAnnotations(kind, np.zeros(0), np.zeros(0),
                                                                 np.zeros((0, width))))
            self.videos.append(Video(rec.vid, x, ts, rec.split, ann))

    def __len__(self):
        return len(self.videos)

    def count(self, task: str) -> int:
        return sum(len(v.annotations[task]) for v in self.videos)

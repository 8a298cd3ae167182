"""Flat ``dotted.key = value`` run configuration.

One assignment per line; ``#`` starts a comment. Unknown keys are rejected.
Lists are comma-separated. Every key has a default, so an empty file is a
valid (desk-scale) configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import GenConfig
from .errors import ValidationError
from .model import BackpackConfig
from .tasks import default_tasks
from .train import TrainConfig


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> list[int]:
    return [int(p) for p in s.split(",") if p.strip()]


def _names(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _opt_name(s: str):
    s = s.strip()
    return None if s in ("", "none") else s


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "paths.data": (str, "data"),
    "paths.checkpoints": (str, "checkpoints"),
    "paths.outputs": (str, "outputs"),
    "data.seed": (int, 0),
    "data.videos": (int, 200),
    "data.verbs": (int, 12),
    "data.nouns": (int, 16),
    "data.actions": (int, 24),
    "data.dim": (int, 128),
    "data.sigma": (float, 0.3),
    "data.temperature": (float, 0.5),
    "data.min_segments": (int, 96),
    "data.max_segments": (int, 128),
    "data.min_duration": (int, 1),
    "data.max_duration": (int, 4),
    "data.horizon": (int, 4),
    "data.val_fraction": (float, 0.2),
    "backbone.L": (int, 3),
    "backbone.layers_per_stage": (_ints, [2, 2, 2]),
    "backbone.tau": (float, 2.0),
    "backbone.pooling": (str, "mean"),
    "backbone.gate_hidden": (int, 16),
    "train.seed": (int, 0),
    "train.steps": (int, 2000),
    "train.batch_size": (int, 4),
    "train.lr": (float, 1e-3),
    "train.support": (_names, ["ar", "oscc", "pnr", "lta"]),
    "train.novel": (_opt_name, "mq"),
    "train.novel_steps": (int, 500),
    "train.freeze_policy": (str, "finetune"),
    "backpack.k": (int, 16),
    "backpack.M": (int, 2),
    "backpack.fusion": (str, "features"),
    "backpack.requery": (_bool, False),
    "backpack.coupling": (str, "full"),
    "eval.score_threshold": (float, 0.1),
    "eval.nms_iou": (float, 0.5),
    "eval.batch_size": (int, 8),
}


def parse_assignments(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = (value, f"{source}:{lineno}")
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str, where: str = "override") -> None:
        if key not in SCHEMA:
            raise ValidationError(f"{where}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(raw)
        except ValueError as err:
            raise ValidationError(f"{where}: bad value for {key}: {err}") from None

    def render(self) -> str:
        """Resolved configuration in the same flat syntax (logged with every run)."""
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    # typed views --------------------------------------------------------

    def gen(self) -> GenConfig:
        v = self.values
        return GenConfig(videos=v["data.videos"], verbs=v["data.verbs"], nouns=v["data.nouns"],
                         actions=v["data.actions"], dim=v["data.dim"], sigma=v["data.sigma"],
                         temperature=v["data.temperature"], min_segments=v["data.min_segments"],
                         max_segments=v["data.max_segments"], min_duration=v["data.min_duration"],
                         max_duration=v["data.max_duration"], horizon=v["data.horizon"],
                         val_fraction=v["data.val_fraction"])

    def backbone(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(L=v["backbone.L"], layers_per_stage=list(v["backbone.layers_per_stage"]),
                              D=v["data.dim"], tau=v["backbone.tau"], pooling=v["backbone.pooling"],
                              gate_hidden=v["backbone.gate_hidden"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(seed=v["train.seed"], steps=v["train.steps"], batch_size=v["train.batch_size"],
                           lr=v["train.lr"], tasks=list(v["train.support"]), novel=v["train.novel"],
                           novel_steps=v["train.novel_steps"], fusion=v["backpack.fusion"],
                           freeze_policy=v["train.freeze_policy"])

    def backpack(self) -> BackpackConfig:
        v = self.values
        return BackpackConfig(k=v["backpack.k"], M=v["backpack.M"], fusion=v["backpack.fusion"],
                              requery=v["backpack.requery"], coupling=v["backpack.coupling"])

    def task_specs(self):
        v = self.values
        return default_tasks(v["data.verbs"], v["data.nouns"], v["data.verbs"], v["data.horizon"])

    def validate(self) -> None:
        """Build every typed view once so invalid combinations fail early."""
        self.gen().validate()
        self.backbone()
        self.backpack()
        train = self.train()
        known = set(self.task_specs())
        for t in train.tasks + ([train.novel] if train.novel else []):
            if t not in known:
                raise ValidationError(f"unknown task {t!r}; expected one of {sorted(known)}")


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        for key, (raw, where) in parse_assignments(path.read_text().splitlines(), str(path)).items():
            cfg.set(key, raw, where)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override must be key=value, got {item!r}")
        key, raw = (p.strip() for p in item.split("=", 1))
        cfg.set(key, raw)
    if seed is not None:
        cfg.values["train.seed"] = int(seed)
        cfg.values["data.seed"] = int(seed)
    cfg.validate()
    return cfg

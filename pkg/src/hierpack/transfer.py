"""Novel-task transfer grid: backpack vs zero coupling vs single-task baseline.

Every task takes one turn as the novel task while the other four form the
support set. For each rotation and seed the same Stage-1 model feeds two
Stage-2 variants (interaction coupling learned, or frozen at zero); the
single-task baseline trains the same architecture from scratch with the same
novel-task data and step budget. Stage 2 only sees a small subset of the
training videos, the regime where reusing support perspectives matters.
"""

from __future__ import annotations

import tempfile
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .data import Dataset, GenConfig, generate
from .model import BackpackConfig
from .tasks import HEADLINE
from .train import (TrainConfig, attach_prototypes, evaluate, single_task, stage1_mtl,
                    stage2_novel, to_checkpoint)

VARIANTS = ("backpack", "zero", "single")
ROTATIONS = ("ar", "oscc", "pnr", "lta", "mq")


@dataclass
class TransferConfig:
    seeds: Sequence[int] = (0, 1, 2)
    rotations: Sequence[str] = ROTATIONS
    gen: GenConfig = field(default_factory=lambda: GenConfig(
        videos=150, dim=32, actions=24, min_segments=32, max_segments=48))
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        D=32, layers_per_stage=[1, 1, 1], gate_hidden=8))
    stage1_steps: int = 600
    novel_steps: int = 150
    novel_videos: int = 8
    freeze_policy: str = "freeze"
    lr: float = 1e-3
    batch_size: int = 4
    backpack: BackpackConfig = field(default_factory=lambda: BackpackConfig(k=2, M=2))


@dataclass
class Cell:
    novel: str
    seed: int
    variant: str
    metric: str
    value: float


def run_rotation(cfg: TransferConfig, novel: str, seed: int, root: Path) -> list[Cell]:
    man = generate(cfg.gen, seed, root)
    support = [t for t in ROTATIONS if t != novel]
    specs = man.task_specs()
    spec = specs[novel]
    key, _ = HEADLINE[spec.kind]
    base = TrainConfig(seed=seed, steps=cfg.stage1_steps, batch_size=cfg.batch_size, lr=cfg.lr,
                       tasks=support, novel=novel, novel_steps=cfg.novel_steps,
                       freeze_policy=cfg.freeze_policy)

    model = stage1_mtl(base, cfg.backbone, specs, Dataset(man, support, "train").videos)
    attach_prototypes(model, Dataset(man, ["ar"], "train").videos)
    ckpt = to_checkpoint(model, base, "backpack")

    few = Dataset(man, [novel], "train").videos[:cfg.novel_videos]
    val = Dataset(man, [novel], "val").videos
    cells = []
    for variant, coupling in (("backpack", "full"), ("zero", "zero")):
        m = stage2_novel(base, ckpt, few, spec, replace(cfg.backpack, coupling=coupling))
        cells.append(Cell(novel, seed, variant, key, evaluate(m, val, novel)[key]))
    solo = single_task(base, cfg.backbone, spec, few)
    cells.append(Cell(novel, seed, "single", key, evaluate(solo, val, novel)[key]))
    return cells


def run_grid(cfg: TransferConfig, progress=None) -> list[Cell]:
    cells = []
    with tempfile.TemporaryDirectory(prefix="hierpack-transfer-") as tmp:
        for novel in cfg.rotations:
            for seed in cfg.seeds:
                out = run_rotation(cfg, novel, seed, Path(tmp) / f"{novel}-{seed}")
                cells += out
                if progress:
                    for c in out:
                        progress(c)
    return cells


@dataclass
class GridSummary:
    """Seed-averaged headline per (rotation, variant) and the directional verdict."""

    means: dict[str, dict[str, float]]
    higher_better: dict[str, bool]

    def wins(self, novel: str) -> bool:
        m = self.means[novel]
        sign = 1.0 if self.higher_better[novel] else -1.0
        return all(sign * (m["backpack"] - m[o]) >= 0 for o in ("zero", "single"))

    @property
    def rotations_won(self) -> int:
        return sum(self.wins(n) for n in self.means)

    def table(self) -> str:
        rows = ["novel\tmetric\t" + "\t".join(VARIANTS) + "\tbackpack_best"]
        for n, m in self.means.items():
            vals = "\t".join(f"{m[v]:.4f}" for v in VARIANTS)
            rows.append(f"{n}\t{'higher' if self.higher_better[n] else 'lower'}\t{vals}\t"
                        f"{int(self.wins(n))}")
        return "\n".join(rows) + "\n"


def summarize(cells: Sequence[Cell], specs) -> GridSummary:
    means: dict[str, dict[str, float]] = {}
    better = {}
    for novel in dict.fromkeys(c.novel for c in cells):
        sel = [c for c in cells if c.novel == novel]
        means[novel] = {v: float(np.mean([c.value for c in sel if c.variant == v])) for v in VARIANTS}
        better[novel] = HEADLINE[specs[novel].kind][1]
    return GridSummary(means, better)


def cells_tsv(cells: Sequence[Cell]) -> str:
    rows = ["novel\tseed\tvariant\tmetric\tvalue"]
    rows += [f"{c.novel}\t{c.seed}\t{c.variant}\t{c.metric}\t{c.value!r}" for c in cells]
    return "\n".join(rows) + "\n"

"""``hierpack`` command line: data generation through evaluation.

Relative paths in the config resolve against ``--out`` (default: the current
directory). Every successful command writes its resolved configuration next
to its outputs. Failures print one line ``hierpack: error category=<c>
exit=<n> ...`` to stderr.

Exit codes: 0 ok, 1 failed self-check, 2 bad configuration, 3 missing or
unusable prerequisite, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .backpack import activation_rows, consensus_matrix
from .config import RunConfig, load_config
from .data import Dataset, atomic_write_text, generate, read_manifest
from .errors import FormatError, NumericError, UsageError, ValidationError
from .tasks import HEADLINE
from .train import (TrainLog, attach_prototypes, collect_predictions, evaluate, load_checkpoint,
                    model_from_checkpoint, save_checkpoint, stage1_mtl, stage2_novel,
                    to_checkpoint)

log = logging.getLogger("hierpack")

STAGE1 = "stage1.hepk"
BACKPACK = "backpack.hepk"
NOVEL = "novel.hepk"


class Run:
    """Resolved paths of one invocation."""

    def __init__(self, cfg: RunConfig, out: str | None):
        base = Path(out) if out else Path.cwd()
        self.cfg = cfg
        self.data = base / cfg["paths.data"]
        self.ckpt = base / cfg["paths.checkpoints"]
        self.outputs = base / cfg["paths.outputs"]

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"missing prerequisite: {path}")
        return path

    def manifest(self):
        return read_manifest(self.require(self.data / "manifest.txt"))

    def record_config(self, command: str) -> None:
        atomic_write_text(self.outputs / f"{command}.config.txt", self.cfg.render())


def _tsv(path: Path, header: list[str], rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(_cell(v) for v in r) for r in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _metrics_rows(task: str, split: str, metrics: dict):
    return [(task, split, k, float(v)) for k, v in sorted(metrics.items())]


# ------------------------------------------------------------------ commands


def cmd_gen_data(run: Run, args) -> int:
    man = generate(run.cfg.gen(), run.cfg["data.seed"], run.data)
    counts = {s: sum(v.split == s for v in man.videos) for s in ("train", "val")}
    print(f"wrote {len(man.videos)} videos ({counts['train']} train, {counts['val']} val) to {run.data}")
    run.record_config("gen-data")
    return 0


def cmd_pretrain(run: Run, args) -> int:
    man = run.manifest()
    tcfg = run.cfg.train()
    specs = man.task_specs()
    train = Dataset(man, tcfg.tasks, "train").videos
    run.outputs.mkdir(parents=True, exist_ok=True)
    trace = TrainLog(run.outputs / "pretrain.log.tsv")
    t0 = time.perf_counter()
    model = stage1_mtl(tcfg, run.cfg.backbone(), specs, train, trace)
    log.info("stage 1: %d steps in %.1f s", tcfg.steps, time.perf_counter() - t0)
    digest = save_checkpoint(run.ckpt / STAGE1, to_checkpoint(model, tcfg, "stage1"))
    val = Dataset(man, tcfg.tasks, "val").videos
    rows = []
    for t in tcfg.tasks:
        for split, vids in (("train", train), ("val", val)):
            if vids:
                rows += _metrics_rows(t, split, evaluate(model, vids, t, **_eval_kw(run.cfg)))
    _tsv(run.outputs / "pretrain.metrics.tsv", ["task", "split", "metric", "value"], rows)
    print(f"checkpoint {run.ckpt / STAGE1} sha256 {digest}")
    run.record_config("pretrain")
    return 0


def cmd_build_backpack(run: Run, args) -> int:
    ck = load_checkpoint(run.require(run.ckpt / STAGE1))
    man = run.manifest()
    model = model_from_checkpoint(ck)
    protos = attach_prototypes(model, Dataset(man, ["ar"], "train").videos,
                               run.cfg["eval.batch_size"])
    tcfg = run.cfg.train()
    digest = save_checkpoint(run.ckpt / BACKPACK, to_checkpoint(model, tcfg, "backpack"))
    _tsv(run.outputs / "prototypes.tsv", ["task", "prototypes", "dim", "sha256"],
         [(t, p.size, p.matrix.shape[1], p.digest()) for t, p in sorted(protos.items())])
    print(f"checkpoint {run.ckpt / BACKPACK} sha256 {digest}")
    run.record_config("build-backpack")
    return 0


def cmd_train_novel(run: Run, args) -> int:
    tcfg = run.cfg.train()
    if tcfg.novel is None:
        raise ValidationError("train.novel is not set")
    ck = load_checkpoint(run.require(run.ckpt / BACKPACK))
    man = run.manifest()
    spec = man.task_specs()[tcfg.novel]
    # only the novel task's labels are opened
    train = Dataset(man, [tcfg.novel], "train").videos
    run.outputs.mkdir(parents=True, exist_ok=True)
    trace = TrainLog(run.outputs / "train-novel.log.tsv")
    model = stage2_novel(tcfg, ck, train, spec, run.cfg.backpack(), trace)
    digest = save_checkpoint(run.ckpt / NOVEL, to_checkpoint(model, tcfg, "novel"))
    print(f"checkpoint {run.ckpt / NOVEL} sha256 {digest}")
    run.record_config("train-novel")
    return 0


def _eval_kw(cfg: RunConfig) -> dict:
    return {"batch_size": cfg["eval.batch_size"], "score_threshold": cfg["eval.score_threshold"],
            "nms_iou": cfg["eval.nms_iou"]}


def _checkpoint_for(run: Run, args) -> Path:
    if args.checkpoint:
        return run.require(Path(args.checkpoint))
    return run.require(run.ckpt / NOVEL)


def cmd_evaluate(run: Run, args) -> int:
    model = model_from_checkpoint(load_checkpoint(_checkpoint_for(run, args)))
    man = run.manifest()
    tasks = model.tasks + ([model.novel] if model.novel else [])
    split = args.split
    rows = []
    for t in tasks:
        vids = Dataset(man, [t], split).videos
        metrics = evaluate(model, vids, t, **_eval_kw(run.cfg))
        rows += _metrics_rows(t, split, metrics)
        key, _ = HEADLINE[model.specs[t].kind]
        print(f"{t}\t{key}\t{metrics[key]:.4f}")
    _tsv(run.outputs / f"metrics.{split}.tsv", ["task", "split", "metric", "value"], rows)
    run.record_config("evaluate")
    return 0


def cmd_consensus(run: Run, args) -> int:
    model = model_from_checkpoint(load_checkpoint(_checkpoint_for(run, args)))
    if model.novel is None:
        raise UsageError("consensus needs a Stage-2 checkpoint (run train-novel first)")
    man = run.manifest()
    records: list = []
    collect_predictions(model, Dataset(man, [model.novel], args.split).videos, model.novel,
                        records=records, **_eval_kw(run.cfg))
    tasks = model.support
    mat = consensus_matrix(records, tasks)
    _tsv(run.outputs / "consensus.tsv", ["task"] + tasks,
         [[t] + [float(v) for v in row] for t, row in zip(tasks, mat)])
    _tsv(run.outputs / "activations.tsv",
         ["sample", "task", "rank", "prototype", "verb", "noun", "distance"], activation_rows(records))
    width = max(len(t) for t in tasks)
    print(" " * width + "".join(f"{t:>8}" for t in tasks))
    for t, row in zip(tasks, mat):
        print(f"{t:<{width}}" + "".join(f"{v:8.1f}" for v in row))
    run.record_config("consensus")
    return 0


def cmd_grad_check(run: Run, args) -> int:
    from .gradcheck import run_all

    t0 = time.perf_counter()
    results = run_all(args.instances, run.cfg["train.seed"])
    for r in results:
        print(f"{r.name:<14} instances={r.instances} max_rel_error={r.max_error:.3e} "
              f"tol={r.tolerance:.0e} {'ok' if r.passed else 'FAIL'}")
    ops = [r for r in results if r.name != "end_to_end"]
    print(f"max per-op relative error {max(r.max_error for r in ops):.3e}; "
          f"total {time.perf_counter() - t0:.1f} s")
    _tsv(run.outputs / "gradcheck.tsv", ["check", "instances", "max_rel_error", "tolerance", "passed"],
         [(r.name, r.instances, r.max_error, r.tolerance, int(r.passed)) for r in results])
    run.record_config("grad-check")
    if not all(r.passed for r in results):
        bad = ",".join(r.name for r in results if not r.passed)
        _fail("gradcheck", 1, f"finite-difference mismatch in {bad}")
        return 1
    return 0


def cmd_transfer(run: Run, args) -> int:
    from .tasks import default_tasks
    from .transfer import TransferConfig, cells_tsv, run_grid, summarize

    cfg = TransferConfig(seeds=tuple(range(run.cfg["train.seed"], run.cfg["train.seed"] + args.seeds)))

    def progress(c):
        log.info("%s seed %d %s %s=%.4f", c.novel, c.seed, c.variant, c.metric, c.value)

    cells = run_grid(cfg, progress)
    g = cfg.gen
    summary = summarize(cells, default_tasks(g.verbs, g.nouns, g.verbs, g.horizon))
    atomic_write_text(run.outputs / "transfer.cells.tsv", cells_tsv(cells))
    atomic_write_text(run.outputs / "transfer.tsv", summary.table())
    sys.stdout.write(summary.table())
    print(f"backpack best on {summary.rotations_won} of {len(summary.means)} rotations")
    run.record_config("transfer")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic multi-task dataset"),
    "pretrain": (cmd_pretrain, "Stage-1 multi-task training of the support tasks"),
    "build-backpack": (cmd_build_backpack, "build frozen task prototypes from a Stage-1 checkpoint"),
    "train-novel": (cmd_train_novel, "Stage-2 novel-task training with the backpack"),
    "evaluate": (cmd_evaluate, "metrics of every head in a checkpoint"),
    "consensus": (cmd_consensus, "activation consensus between support tasks"),
    "grad-check": (cmd_grad_check, "finite-difference gradient suite"),
    "transfer": (cmd_transfer, "backpack vs zero-coupling vs single-task grid"),
}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    d = argparse.SUPPRESS if suppress else None
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d, help="flat key = value configuration file")
    common.add_argument("--seed", type=int, default=d, help="overrides data.seed and train.seed")
    common.add_argument("--out", default=d, help="base directory for relative paths")
    common.add_argument("--set", action="append", default=d, metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=d)
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierpack", description=__doc__.splitlines()[0],
                                parents=[_common(False)])
    p.add_argument("--version", action="version", version=f"hierpack {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, parents=[_common(True)])
        if name in ("evaluate", "consensus"):
            sp.add_argument("--checkpoint", help="checkpoint path (default: the Stage-2 checkpoint)")
            sp.add_argument("--split", default="val", choices=("train", "val"))
        if name == "grad-check":
            sp.add_argument("--instances", type=int, default=20)
        if name == "transfer":
            sp.add_argument("--seeds", type=int, default=3)
    return p


def _fail(category: str, code: int, message: str, **extra) -> None:
    fields = " ".join(f"{k}={v}" for k, v in extra.items())
    msg = json.dumps(" ".join(message.split()))
    print(f"hierpack: error category={category} exit={code}{' ' + fields if fields else ''} "
          f"message={msg}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set or [], args.seed)
    except (ValidationError, ValueError) as err:
        _fail("config", 2, str(err))
        return 2
    log.info("resolved configuration:\n%s", cfg.render())
    run = Run(cfg, args.out)
    handler = COMMANDS[args.command][0]
    try:
        return handler(run, args)
    except NumericError as err:
        _fail("numeric", 4, str(err), step=err.step)
        return 4
    except (FileNotFoundError, FormatError) as err:
        _fail("missing", 3, str(err))
        return 3
    except (UsageError, ValidationError) as err:
        _fail("prerequisite", 3, str(err))
        return 3


if __name__ == "__main__":
    sys.exit(main())

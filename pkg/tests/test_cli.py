import re
from pathlib import Path

import numpy as np
import pytest

from hierpack.cli import main

TINY = ["data.videos=8", "data.verbs=4", "data.nouns=5", "data.actions=8", "data.dim=8",
        "data.min_segments=16", "data.max_segments=20", "data.horizon=2",
        "backbone.layers_per_stage=1", "backbone.gate_hidden=4",
        "train.steps=10", "train.novel_steps=5", "backpack.k=2", "backpack.M=1"]
PIPELINE = ["gen-data", "pretrain", "build-backpack", "train-novel", "evaluate", "consensus"]
ERROR_LINE = re.compile(r'^hierpack: error category=(\w+) exit=(\d)( step=\d+)? message=".*"$')


def cli(out, *argv, extra=()):
    args = ["--out", str(out)]
    for s in list(TINY) + list(extra):
        args += ["--set", s]
    return main(args + list(argv))


def snapshot(root: Path) -> dict:
    """File bytes under root, with the wall-clock column of training logs removed."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name.endswith(".log.tsv"):
            data = b"\n".join(b"\t".join(l.split(b"\t")[:3]) for l in data.splitlines())
        out[str(p.relative_to(root))] = data
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in PIPELINE:
        assert cli(out, cmd) == 0, cmd
    return out


def test_pipeline_writes_expected_artifacts(pipeline):
    for rel in ("data/manifest.txt", "checkpoints/stage1.hepk", "checkpoints/backpack.hepk",
                "checkpoints/novel.hepk", "outputs/metrics.val.tsv", "outputs/consensus.tsv",
                "outputs/activations.tsv", "outputs/pretrain.log.tsv", "outputs/prototypes.tsv",
                "outputs/train-novel.config.txt"):
        assert (pipeline / rel).is_file(), rel
    assert "backpack.k = 2" in (pipeline / "outputs/evaluate.config.txt").read_text()


def test_consensus_matrix_is_symmetric_with_full_diagonal(pipeline):
    rows = (pipeline / "outputs/consensus.tsv").read_text().splitlines()
    tasks = rows[0].split("\t")[1:]
    mat = np.array([[float(v) for v in r.split("\t")[1:]] for r in rows[1:]])
    assert mat.shape == (len(tasks), len(tasks))
    np.testing.assert_array_equal(mat, mat.T)
    np.testing.assert_array_equal(np.diag(mat), 100.0)
    assert np.all((mat >= 0) & (mat <= 100))


def test_rerun_is_idempotent_and_inputs_untouched(pipeline, tmp_path):
    other = tmp_path / "again"
    for cmd in PIPELINE:
        assert cli(other, cmd) == 0
    assert snapshot(other) == snapshot(pipeline)
    data_before = snapshot(other / "data")
    ck_before = (other / "checkpoints/novel.hepk").read_bytes()
    assert cli(other, "evaluate") == 0 and cli(other, "consensus") == 0
    assert snapshot(other / "data") == data_before
    assert (other / "checkpoints/novel.hepk").read_bytes() == ck_before


def test_bad_config_exits_2(tmp_path, capsys):
    assert cli(tmp_path, "gen-data", extra=["model.width=3"]) == 2
    err = capsys.readouterr().err.strip()
    assert ERROR_LINE.match(err) and "category=config" in err
    (tmp_path / "c.txt").write_text("data.seed = x\n")
    assert main(["--config", str(tmp_path / "c.txt"), "gen-data"]) == 2


def test_evaluate_missing_checkpoint_exits_3_without_outputs(tmp_path, capsys):
    assert cli(tmp_path, "gen-data") == 0
    before = snapshot(tmp_path)
    assert cli(tmp_path, "evaluate") == 3
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert ERROR_LINE.match(err) and "exit=3" in err
    assert snapshot(tmp_path) == before


def test_missing_dataset_exits_3(tmp_path, capsys):
    assert cli(tmp_path, "pretrain") == 3
    assert "category=missing" in capsys.readouterr().err


def test_non_finite_loss_exits_4_with_step(tmp_path, capsys):
    assert cli(tmp_path, "gen-data") == 0
    with np.errstate(all="ignore"):
        code = cli(tmp_path, "pretrain", extra=["train.lr=1e300"])
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert code == 4
    m = ERROR_LINE.match(err)
    assert m and m.group(1) == "numeric" and m.group(3)


def test_seed_flag_wins_over_config(tmp_path):
    (tmp_path / "c.txt").write_text("data.seed = 1\ntrain.seed = 1\n")
    args = ["--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "a"), "--seed", "7"]
    for s in TINY:
        args += ["--set", s]
    assert main(args + ["gen-data"]) == 0
    text = (tmp_path / "a/outputs/gen-data.config.txt").read_text()
    assert "data.seed = 7" in text and "train.seed = 7" in text
    assert "seed 7" in (tmp_path / "a/data/manifest.txt").read_text()


def test_flags_after_subcommand(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "data.videos=3",
                 "--set", "data.dim=4", "--set", "data.min_segments=4",
                 "--set", "data.max_segments=4"]) == 0
    assert (tmp_path / "data/manifest.txt").exists()


def test_grad_check_command(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "grad-check", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    worst = float(re.search(r"max per-op relative error (\S+);", out).group(1))
    assert worst <= 1e-6
    assert (tmp_path / "outputs/gradcheck.tsv").is_file()


def test_consensus_requires_stage2_checkpoint(pipeline, capsys):
    code = main(["--out", str(pipeline), "consensus", "--checkpoint",
                 str(pipeline / "checkpoints/stage1.hepk")] + sum((["--set", s] for s in TINY), []))
    assert code == 3
    assert "category=prerequisite" in capsys.readouterr().err

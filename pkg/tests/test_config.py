import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierpack.config import SCHEMA, RunConfig, load_config, parse_assignments
from hierpack.errors import ValidationError


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("# nothing here\n\n")
    cfg = load_config(tmp_path / "c.txt")
    assert cfg.render() == RunConfig().render()
    assert cfg.backbone().D == cfg["data.dim"]


def test_assignments_comments_and_lists(tmp_path):
    (tmp_path / "c.txt").write_text(
        "backbone.L = 2   # two stages\n"
        "backbone.layers_per_stage = 1, 3\n"
        "train.support = ar, pnr\n"
        "train.novel = none\n"
        "backpack.requery = yes\n")
    cfg = load_config(tmp_path / "c.txt")
    assert cfg.backbone().layers_per_stage == [1, 3]
    assert cfg.train().tasks == ["ar", "pnr"] and cfg.train().novel is None
    assert cfg.backpack().requery is True


def test_unknown_key_reports_location(tmp_path):
    (tmp_path / "c.txt").write_text("data.seed = 1\nbackbone.depth = 4\n")
    with pytest.raises(ValidationError, match=r"c.txt:2: unknown key 'backbone.depth'"):
        load_config(tmp_path / "c.txt")


def test_bad_values_and_syntax(tmp_path):
    with pytest.raises(ValidationError, match="bad value"):
        load_config(overrides=["train.steps=many"])
    with pytest.raises(ValidationError, match=":1:"):
        parse_assignments(["no equals sign"], "x")
    with pytest.raises(ValidationError):
        load_config(overrides=["backbone.pooling=sum"])
    with pytest.raises(ValidationError):
        load_config(overrides=["train.novel=xyz"])
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.txt")


def test_override_order_and_seed_precedence(tmp_path):
    (tmp_path / "c.txt").write_text("data.seed = 1\ntrain.seed = 2\ntrain.lr = 0.5\n")
    cfg = load_config(tmp_path / "c.txt", ["train.lr=0.25"], seed=9)
    assert cfg["train.lr"] == 0.25
    assert cfg["data.seed"] == 9 and cfg["train.seed"] == 9


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(sorted(k for k, (p, _) in SCHEMA.items() if p is int)), st.integers(1, 999))
def test_render_round_trips(key, value):
    cfg = RunConfig()
    cfg.set(key, str(value))
    back = RunConfig()
    for k, (raw, where) in parse_assignments(cfg.render().splitlines()).items():
        back.set(k, raw, where)
    assert back.render() == cfg.render()

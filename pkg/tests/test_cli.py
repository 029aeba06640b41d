import csv
import json

import numpy as np
import pytest

from uwdg.bilateral import GRID_SHAPE, deserialize_grid
from uwdg.cli import main
from uwdg.pngio import read_png

TINY_NET = {"tap_widths": [2, 3, 4, 5], "block_widths": [3, 4, 5], "local_width": 4, "global_width": 4, "low_res": 128, "guide_width": 4}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"n_per_domain_per_class": 10, "image_size": 32}))
    assert main(["datagen", "--config", str(cfg), "--out", str(out / "c")]) == 0
    return out / "c"


@pytest.fixture(scope="module")
def identity_net(tmp_path_factory):
    out = tmp_path_factory.mktemp("net")
    cfg = out / "net.json"
    cfg.write_text(json.dumps(TINY_NET))
    path = out / "id.snet"
    assert main(["init-net", "--config", str(cfg), "--out", str(path), "--identity"]) == 0
    return path


def test_datagen_default_count_and_manifest(tmp_path):
    assert main(["datagen", "--out", str(tmp_path / "a")]) == 0
    assert main(["datagen", "--out", str(tmp_path / "b")]) == 0
    pngs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(pngs) == 400
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {"path", "class", "domain", "pair_group", "box"} <= set(man[0])
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_datagen_unwritable_target(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["datagen", "--out", str(blocker / "sub")]) == 2
    assert "cannot create" in capsys.readouterr().err


def test_datagen_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"image_size": 8}))
    assert main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("{not json")
    assert main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_stylize_identity_and_grid_dump(corpus_dir, identity_net, tmp_path):
    content = corpus_dir / "d0" / "g00000_c0.png"
    out, grid = tmp_path / "o.png", tmp_path / "a.bgrd"
    args = ["stylize", "--content", str(content), "--style-id", "1", "--net", str(identity_net), "--out", str(out)]
    assert main(args + ["--dump-grid", str(grid)]) == 0
    assert np.array_equal(read_png(out), read_png(content))
    A = deserialize_grid(grid.read_bytes())
    assert A.shape == GRID_SHAPE + (3, 4)
    again = tmp_path / "o2.png"
    assert main(args[:-1] + [str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_stylize_errors(corpus_dir, identity_net, tmp_path):
    content = str(corpus_dir / "d0" / "g00000_c0.png")
    assert main(["stylize", "--content", content, "--style-id", "9", "--net", str(identity_net), "--out", str(tmp_path / "o.png")]) == 2
    bad = tmp_path / "bad.snet"
    bad.write_bytes(b"garbage")
    assert main(["stylize", "--content", content, "--style-id", "0", "--net", str(bad), "--out", str(tmp_path / "o.png")]) == 2
    assert main(["stylize", "--content", str(tmp_path / "none.png"), "--style-id", "0", "--net", str(identity_net), "--out", str(tmp_path / "o.png")]) == 2


def test_bench_json(capsys):
    assert main(["bench", "--size", "32", "--iters", "10", "--ref-iters", "1", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert {"fps_opt", "fps_ref", "ratio", "iters"} <= set(rep)
    assert rep["ratio"] > 0


def test_bench_rejects_small_inputs():
    assert main(["bench", "--size", "16"]) == 2
    assert main(["bench", "--size", "32", "--iters", "5"]) == 2


def test_gradcheck_passes_and_corruption_is_named(capsys):
    assert main(["gradcheck", "--scope", "loss", "--instances", "1"]) == 0
    capsys.readouterr()
    assert main(["gradcheck", "--scope", "loss", "--instances", "1", "--corrupt", "style_loss"]) == 1
    assert "style_loss" in capsys.readouterr().err


def test_train_cbst_outputs(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_content": 2, "batch_size": 2, "net": TINY_NET}))
    assert main(["train-cbst", "--config", str(cfg), "--out", str(tmp_path / "o"), "--steps", "3"]) == 0
    with open(tmp_path / "o" / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and list(rows[0]) == ["step", "total", "content", "style", "laplacian", "mask"]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["ratio"] > 0
    assert (tmp_path / "o" / "stylizer.snet").stat().st_size > 0


def _dg(corpus_dir, out, *extra):
    return main(["dg-run", "--corpus", str(corpus_dir), "--out", str(out), "--seeds", "0", "--steps", "2", *extra])


def test_dg_run_two_sources_and_determinism(corpus_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"variants": ["deepall", "dmcl"], "train": {"batch_size": 4}}))
    assert _dg(corpus_dir, tmp_path / "a", "--config", str(cfg), "--sources", "2") == 0
    assert _dg(corpus_dir, tmp_path / "b", "--config", str(cfg), "--sources", "2") == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["sources"] == [0, 1] and rep["held_out"] == 3
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "nets" / "dmcl_seed0.tnet").exists()


def test_dg_run_errors(corpus_dir, tmp_path):
    assert _dg(corpus_dir, tmp_path / "a", "--sources", "7") == 2
    assert _dg(tmp_path / "missing", tmp_path / "b") == 2


def test_feature_stats_rows(corpus_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"variants": ["deepall"], "train": {"batch_size": 4}}))
    assert _dg(corpus_dir, tmp_path / "run", "--config", str(cfg)) == 0
    out = tmp_path / "stats.csv"
    net = tmp_path / "run" / "nets" / "deepall_seed0.tnet"
    assert main(["feature-stats", "--net", str(net), "--corpus", str(corpus_dir), "--out", str(out), "--probes", "10"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 4 + 4
    assert main(["feature-stats", "--net", str(net), "--corpus", str(corpus_dir), "--out", str(out), "--probes", "3"]) == 2


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2

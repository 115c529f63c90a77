import csv
import hashlib
import json
import math
import subprocess
import sys

import pytest

from decu import cli
from decu import config as cfg
from decu.checkpoint import load_ensemble, save_ensemble
from decu.diffusion import ClassEmbeddingTable, TrainingDivergence

from conftest import with_tables

TINY = {"dataset": {"class_counts": [2, 2, 2, 2], "bin_counts": [1, 2, 4, 8]},
        "model": {"hidden": 16, "embed_dim": 4, "n_components": 3},
        "training": {"pretrain_steps": 40, "component_steps": 20, "batch_size": 16},
        "experiment": {"n_noise": 2, "n_seeds": 1, "curve_seeds": 2}}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.json"
    conf.write_text(json.dumps(TINY))
    assert cli.main(["train", "--config", str(conf), "--out", str(root / "a")]) == 0
    return root, conf


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_outputs_and_manifest(trained):
    root, conf = trained
    out = root / "a"
    for name in ("ensemble.decu", "losses.csv", "manifest.json", "config.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    run = cfg.load(conf)
    assert manifest["config_hash"] == run.hash()
    assert manifest["config_hash"] == cfg.load(out / "config.json").hash()
    assert manifest["checkpoint_sha256"] == sha(out / "ensemble.decu")
    _, inner = load_ensemble(out / "ensemble.decu")
    assert inner["config_hash"] == run.hash()
    with open(out / "losses.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["stage", "step", "loss"] and len(rows) == 1 + 40 + 3 * 20


def test_train_is_byte_identical(trained):
    root, conf = trained
    assert cli.main(["train", "--config", str(conf), "--out", str(root / "b")]) == 0
    for name in ("ensemble.decu", "losses.csv", "manifest.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_train_errors(tmp_path, capsys, monkeypatch):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "model": {"hidden": 4,}\n}')
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    bad.write_text('{"trainig": {}}')
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "trainig" in capsys.readouterr().err

    def diverge(*a, **k):
        raise TrainingDivergence("component 2: non-finite loss nan")

    good = tmp_path / "tiny.json"
    good.write_text(json.dumps(TINY))
    monkeypatch.setattr(cli, "build_ensemble", diverge)
    assert cli.main(["train", "--config", str(good), "--out", str(tmp_path / "x")]) == 3
    assert "component 2" in capsys.readouterr().err


def test_generate_dump(trained, tmp_path, capsys):
    ckpt = trained[0] / "a" / "ensemble.decu"
    args = ["generate", "--checkpoint", str(ckpt), "--class", "3", "--branch-point", "100",
            "--seed", "4"]
    assert cli.main(args + ["--out", str(tmp_path / "g1")]) == 0
    printed = float(capsys.readouterr().out)
    assert 0.0 <= printed <= math.log(3)
    manifest = json.loads((tmp_path / "g1" / "manifest.json").read_text())
    assert (manifest["class_id"], manifest["seed"], manifest["branch_point"]) == (3, 4, 100)
    assert manifest["uncertainty"] == printed
    assert manifest["config_hash"] == cfg.load(trained[1]).hash()
    assert len(manifest["images"]) == 3
    assert cli.main(args + ["--out", str(tmp_path / "g2")]) == 0
    for f in (tmp_path / "g1").iterdir():
        assert f.read_bytes() == (tmp_path / "g2" / f.name).read_bytes()


def test_generate_errors(trained, tmp_path):
    ckpt = str(trained[0] / "a" / "ensemble.decu")
    out = str(tmp_path / "g")
    assert cli.main(["generate", "--checkpoint", ckpt, "--branch-point", "7", "--out", out]) == 2
    assert cli.main(["generate", "--checkpoint", ckpt, "--class", "99", "--out", out]) == 2
    assert cli.main(["generate", "--checkpoint", str(tmp_path / "none"), "--out", out]) == 2
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    assert cli.main(["generate", "--checkpoint", str(tmp_path / "junk"), "--out", out]) == 2


def test_generate_degenerate_checkpoint(small_model, tmp_path, capsys):
    t = small_model.tables[0]
    deg = with_tables(small_model, [ClassEmbeddingTable(t.weights.copy()) for _ in range(3)])
    save_ensemble(tmp_path / "deg.decu", deg)
    assert cli.main(["generate", "--checkpoint", str(tmp_path / "deg.decu"), "--branch-point",
                     "200", "--out", str(tmp_path / "g")]) == 0
    assert float(capsys.readouterr().out) == 0.0
    imgs = [(tmp_path / "g" / f"component{j}.pgm").read_bytes() for j in range(3)]
    assert imgs[0] == imgs[1] == imgs[2]


def test_experiments(trained, tmp_path, capsys):
    ckpt = str(trained[0] / "a" / "ensemble.decu")
    run = cfg.load(trained[1])
    out = tmp_path / "e"
    for which in ("bins", "diversity", "curve", "pixels"):
        assert cli.main(["experiment", which, "--checkpoint", ckpt, "--out", str(out)]) == 0
    capsys.readouterr()
    with open(out / "bins.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + run.dataset.n_classes
    with open(out / "diversity.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + len(run.branch_points()) * 4
    with open(out / "curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["steps_past_branch", "uncertainty"] and len(rows) == 1 + 40
    assert (out / "pixels_class000.pgm").exists() and (out / "pixels_summary.csv").exists()
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    for which in ("bins", "diversity", "curve", "pixels"):
        assert cli.main(["experiment", which, "--checkpoint", ckpt, "--out", str(out)]) == 0
    assert first == {p.name: p.read_bytes() for p in out.iterdir()}


def test_experiment_errors(trained, tmp_path):
    ckpt = str(trained[0] / "a" / "ensemble.decu")
    with pytest.raises(SystemExit) as exc:
        cli.main(["experiment", "fig9", "--checkpoint", ckpt])
    assert exc.value.code == 2
    other = tmp_path / "other.json"
    other.write_text(json.dumps(dict(TINY, master_seed=5)))
    assert cli.main(["experiment", "bins", "--checkpoint", ckpt, "--config", str(other),
                     "--out", str(tmp_path)]) == 2


def test_inspect_and_console_script(trained):
    ckpt = str(trained[0] / "a" / "ensemble.decu")
    res = subprocess.run([sys.executable, "-m", "decu.cli", "inspect", "--checkpoint", ckpt],
                         capture_output=True, text=True)
    assert res.returncode == 0
    manifest = json.loads(res.stdout)
    assert manifest["config_hash"] == cfg.load(trained[1]).hash()
    assert len(manifest["component_seeds"]) == 3

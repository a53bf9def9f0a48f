import csv

import numpy as np
import pytest
from PIL import Image

from oddkit.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_TRAIN, main
from oddkit.synthetic import write_coco_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ann = write_coco_dataset(root / "data", n_normal=12, n_anomaly=4, seed=3)
    cfg = root / "run.ini"
    cfg.write_text(f"""[run]
seed = 1
out = {root / "prep"}

[data]
annotations = {ann}
images = {root / "data" / "images"}
patches = {root / "patches"}
patch_size = 16
normal_categories = ellipse

[model]
kind = CAE
memory_slots = 20

[train]
steps = 4
batch_size = 4
validate_every = 2
checkpoint_every = 2

[eval]
budget = 16
""")
    assert main(["prepare", "--config", str(cfg)]) == EXIT_OK
    return root, cfg


def run(cfg, *args):
    return main([args[0], "--config", str(cfg), *args[1:]])


def test_prepare_manifest(workspace, capsys):
    root, cfg = workspace
    with open(root / "patches" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16
    assert sum(r["label"] == "normal" for r in rows) == 12
    assert (root / "prep" / "effective_config.ini").is_file()
    assert run(cfg, "prepare", "--set", "data.categories=ellipse", "--set", f"data.patches={root / 'only'}") == 0
    out = capsys.readouterr().out
    assert "ellipse\t12" in out and "rectangle" not in out
    with open(root / "only" / "manifest.csv") as fh:
        assert {r["category_id"] for r in csv.DictReader(fh)} == {"1"}


def test_missing_annotation_file(workspace, capsys):
    _, cfg = workspace
    assert run(cfg, "prepare", "--set", "data.annotations=/nonexistent/ann.json") == EXIT_CONFIG
    assert "/nonexistent/ann.json" in capsys.readouterr().err
    assert main(["prepare", "--config", "/nonexistent.ini"]) == EXIT_CONFIG
    assert run(cfg, "train", "--set", "train.batch_size=1") == EXIT_CONFIG


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg = workspace
    runs = {}
    for kind in ("CAE", "MemCAE"):
        out = root / f"train_{kind}"
        assert run(cfg, "train", "--out", str(out), "--set", f"model.kind={kind}") == EXIT_OK
        runs[kind] = out
    return runs


def test_train_outputs_and_determinism(workspace, trained):
    root, cfg = workspace
    out = trained["CAE"]
    for name in ("metrics.csv", "loss_curve.dat", "final.odk", "checkpoint_000002.odk", "effective_config.ini"):
        assert (out / name).is_file()
    assert len((out / "metrics.csv").read_text().splitlines()) == 5
    again = root / "again"
    assert run(cfg, "train", "--out", str(again)) == EXIT_OK
    assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
    assert (again / "final.odk").read_bytes() == (out / "final.odk").read_bytes()


def test_resume(workspace, trained):
    root, cfg = workspace
    out = root / "resumed"
    out.mkdir()
    lines = (trained["CAE"] / "metrics.csv").read_text().splitlines()
    (out / "metrics.csv").write_text("\n".join(lines[:3]) + "\n")
    assert run(cfg, "train", "--out", str(out), "--resume", str(trained["CAE"] / "checkpoint_000002.odk")) == 0
    assert (out / "metrics.csv").read_bytes() == (trained["CAE"] / "metrics.csv").read_bytes()
    assert run(cfg, "train", "--out", str(out), "--resume", str(root / "nope.odk")) == EXIT_MISSING


def test_training_failure_exit_code(workspace):
    root, cfg = workspace
    assert run(cfg, "train", "--out", str(root / "bad"), "--set", "train.learning_rate=nan") == EXIT_TRAIN


def test_score(workspace, trained, capsys):
    root, cfg = workspace
    ckpt = str(trained["CAE"] / "final.odk")
    out = root / "score"
    assert run(cfg, "score", ckpt, "--out", str(out), "--set", "score.gamma=0.2", "--gamma", "0.5") == EXIT_OK
    text = (out / "scores.csv").read_text()
    assert "# gamma: 0.5" in text
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    assert len(rows) == 16
    assert all((float(r["normalized_score"]) > 0.5) == (r["verdict"] == "anomaly") for r in rows)
    assert len(list((out / "most_anomalous").glob("*.png"))) == 5
    assert len(list((out / "most_normal").glob("*.png"))) == 5
    assert (out / "most_anomalous.png").is_file()
    capsys.readouterr()
    out2 = root / "score2"
    assert run(cfg, "score", ckpt, "--out", str(out2), "--gamma", "0.5", "--deterministic") == EXIT_OK
    assert (out2 / "scores.csv").read_bytes() == (out / "scores.csv").read_bytes()
    a = np.asarray(Image.open(out / "most_normal.png"))
    b = np.asarray(Image.open(out2 / "most_normal.png"))
    np.testing.assert_array_equal(a, b)
    assert run(cfg, "score", str(root / "missing.odk")) == EXIT_MISSING


def test_eval(workspace, trained, capsys):
    root, cfg = workspace
    ckpts = [str(trained["CAE"] / "final.odk"), str(trained["MemCAE"] / "final.odk")]
    out = root / "eval"
    assert run(cfg, "eval", *ckpts, "--out", str(out)) == EXIT_OK
    table = (out / "auc_table.txt").read_text()
    body = [line for line in table.splitlines() if line.startswith("train_")]
    assert [line.split()[0] for line in body] == ["train_CAE", "train_MemCAE"]
    assert (out / "roc_01_train_CAE.csv").is_file() and (out / "roc_02_train_MemCAE.csv").is_file()
    single = root / "eval1"
    assert run(cfg, "eval", ckpts[0], "--out", str(single)) == EXIT_OK
    assert len((single / "auc_table.csv").read_text().splitlines()) == 2
    assert run(cfg, "eval", ckpts[0], str(root / "missing.odk")) == EXIT_MISSING


def test_missing_patch_store(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[data]\npatches = {tmp_path / 'none'}\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_MISSING

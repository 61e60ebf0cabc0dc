import csv
import json

import numpy as np
import pytest

from cfnet import cli
from cfnet.ingest import TEST_FILES, TRAIN_FILES, write_idx
from cfnet.lifecycle import load_checkpoint

from conftest import DATA_DIR, needs_mnist


def blocks(per_class, seed):
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(10):
        for _ in range(per_class):
            img = np.zeros(784, dtype=np.uint8)
            img[c * 78:(c + 1) * 78] = rng.integers(120, 256, 78)
            imgs.append(img)
            labels.append(c)
    return np.array(imgs), np.array(labels, dtype=np.uint8)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("idx")
    for names, seed in ((TRAIN_FILES, 0), (TEST_FILES, 1)):
        imgs, labels = blocks(8, seed)
        write_idx(d / names[0], d / names[1], imgs.reshape(-1, 28, 28), labels)
    return d


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_sequential(data_dir, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--data-dir", data_dir, "--out-dir", out, "--size", 16,
               "--seed", 3, "--export-grid", "--train-accuracy") == 0
    rows = read_csv(out / "metrics.csv")
    stages = sorted({int(r["stage"]) for r in rows})
    assert stages == list(range(10))
    overall = [float(r["accuracy"]) for r in rows if r["class"] == "all"]
    assert overall[-1] > 0.9
    summary = json.loads((out / "summary.json").read_text())
    assert summary["size"] == 16 and len(summary["stages"]) == 10
    assert summary["train_accuracy"] > 0.9
    img = cli.read_pgm(out / "weights.pgm")
    assert img.shape == (4 * 28 + 3, 4 * 28 + 3)
    ck = load_checkpoint(out / "checkpoint.cfn")
    assert ck.state.n_neurons == 16 and ck.position == (10, 0)


def test_train_is_deterministic(data_dir, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path / name,
                   "--size", 9, "--seed", 5) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_interleaved_single_stage(data_dir, tmp_path):
    assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, "--size", 16,
               "--mode", "interleaved") == 0
    rows = read_csv(tmp_path / "metrics.csv")
    assert {r["stage"] for r in rows} == {"0"}
    assert len(rows) == 11


def test_config_file_and_override(data_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"size": 4, "vth": 14.0, "order": "2,7", "tau_mem": 15.0,
                               "data_dir": str(data_dir)}))
    assert run("train", "--config", cfg, "--out-dir", tmp_path / "o", "--vth", 13.75) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["vth"] == 13.75 and summary["order"] == [2, 7]
    assert summary["engine"]["n_neurons"] == 4


def test_non_square_grid_rejected_before_work(tmp_path):
    out = tmp_path / "never"
    assert run("train", "--data-dir", tmp_path / "missing", "--out-dir", out,
               "--size", 401, "--export-grid") == 2
    assert not out.exists()


def test_bad_inputs_exit_nonzero(data_dir, tmp_path, caplog):
    assert run("train", "--data-dir", tmp_path / "missing", "--out-dir", tmp_path) != 0
    assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, "--vth", -1) != 0
    assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, "--order", "1,1") != 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run("train", "--config", bad, "--data-dir", data_dir, "--out-dir", tmp_path) != 0
    assert "nonsense" in caplog.text


def test_resume_and_export(data_dir, tmp_path):
    first = tmp_path / "first"
    assert run("train", "--data-dir", data_dir, "--out-dir", first, "--size", 9,
               "--seed", 2) == 0
    full = load_checkpoint(first / "checkpoint.cfn")
    part = tmp_path / "part"
    assert run("train", "--data-dir", data_dir, "--out-dir", part, "--size", 9,
               "--seed", 2, "--stop-after", 30) == 0
    assert load_checkpoint(part / "checkpoint.cfn").position == (3, 6)
    assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path / "resumed",
               "--size", 9, "--seed", 2, "--resume", part / "checkpoint.cfn") == 0
    again = load_checkpoint(tmp_path / "resumed" / "checkpoint.cfn")
    assert again.state.fingerprint() == full.state.fingerprint()
    assert (tmp_path / "resumed" / "metrics.csv").read_bytes() == \
        (first / "metrics.csv").read_bytes()
    pgm = tmp_path / "w.pgm"
    assert run("export-weights", "--checkpoint", first / "checkpoint.cfn", "--out", pgm) == 0
    assert cli.read_pgm(pgm).shape == (86, 86)


def test_export_non_square_checkpoint_fails(data_dir, tmp_path):
    assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, "--size", 5) == 0
    assert run("export-weights", "--checkpoint", tmp_path / "checkpoint.cfn",
               "--out", tmp_path / "w.pgm") == 2


def test_weight_grid_geometry():
    rng = np.random.default_rng(0)
    img = cli.weight_grid(rng.random((784, 100)))
    assert img.shape == (289, 289)
    assert np.all(img[28, :] == 0) and np.all(img[:, 28] == 0)
    tile = img[:28, :28]
    assert tile.min() == 0 and tile.max() == 255


def test_weight_grid_constant_tiles_gray():
    img = cli.weight_grid(np.full((784, 4), 0.3))
    assert np.all(img[:28, :28] == 128)
    assert np.all(img[29:, 29:] == 128)


def test_pgm_roundtrip_with_whitespace_bytes(tmp_path):
    img = np.array([[10, 32, 9], [13, 0, 255]], dtype=np.uint8)
    cli.write_pgm(tmp_path / "x.pgm", img)
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")
    assert np.array_equal(cli.read_pgm(tmp_path / "x.pgm"), img)


def test_sweep_grid(data_dir, tmp_path):
    assert run("sweep", "--data-dir", data_dir, "--out-dir", tmp_path, "--sizes", "9,16",
               "--vths", "13.5,14", "--epochs", "1,2", "--seed", 1) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 8
    for size in ("9", "16"):
        group = [r for r in rows if r["size"] == size]
        best = max(float(r["train_accuracy"]) for r in group)
        flagged = [r for r in group if r["best"] == "1"]
        assert flagged and all(float(r["train_accuracy"]) == best for r in flagged)


def test_sweep_rows_marks_best_per_size():
    rows = cli.sweep_rows([(400, 13.5, 1, 0.8), (400, 14.0, 1, 0.9), (900, 13.5, 1, 0.7)])
    assert [r[-1] for r in rows] == [0, 1, 1]


def test_stats_verify(tmp_path):
    assert run("stats-verify", "--trials", 2000, "--n-specs", 3, "--out-dir", tmp_path) == 0
    rows = read_csv(tmp_path / "stats.csv")
    assert len(rows) == 6 + 15 + 3
    assert all(r["result"] == "PASS" for r in rows)


def test_kmeans_command(data_dir, tmp_path):
    assert run("kmeans", "--data-dir", data_dir, "--out-dir", tmp_path, "--k", "10,20",
               "--n-seeds", 3, "--max-iters", 5) == 0
    rows = read_csv(tmp_path / "kmeans.csv")
    per_seed = [r for r in rows if r["seed"] != "mean"]
    means = [r for r in rows if r["seed"] == "mean"]
    assert len(per_seed) == 6 and len(means) == 2
    for r in means:
        dots = [float(p["cross_class_dot"]) for p in per_seed if p["k"] == r["k"]]
        assert abs(float(r["cross_class_dot"]) - np.mean(dots)) < 1e-6
        assert abs(float(r["potential"]) - 15 * float(r["cross_class_dot"])) < 1e-5


def test_eval_checkpoint(data_dir, tmp_path):
    assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, "--size", 16,
               "--no-stage-eval") == 0
    assert run("eval", "--data-dir", data_dir, "--out-dir", tmp_path,
               "--checkpoint", tmp_path / "checkpoint.cfn") == 0
    res = json.loads((tmp_path / "eval.json").read_text())
    assert res["accuracy"] > 0.9 and res["n"] == 80


@needs_mnist
def test_eval_fresh_network_near_chance(tmp_path):
    assert run("eval", "--data-dir", DATA_DIR, "--out-dir", tmp_path, "--size", 100,
               "--limit-per-class", 50, "--seed", 0) == 0
    res = json.loads((tmp_path / "eval.json").read_text())
    assert res["accuracy"] < 0.35

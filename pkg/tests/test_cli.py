import json
import subprocess
import sys

import numpy as np
import pytest

from voxlift.cli import main
from voxlift.config import RunConfig

OUTPUTS = ["eval/eval_report.json", "eval/eval_report.csv", "eval/cost_report.json", "eval/predictions.json",
           "train/train_log.jsonl", "train/train_summary.json", "bench/bench.csv", "slice.csv"]


def run_all(root, data, cfg_path, threads=1):
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(root / "train")]) == 0
    params = str(root / "train" / "params.npz")
    assert main(["eval", "--config", str(cfg_path), "--data", str(data), "--params", params,
                 "--out", str(root / "eval"), "--threads", str(threads)]) == 0
    assert main(["bench", "--config", str(cfg_path), "--data", str(data), "--out", str(root / "bench"),
                 "--stages", "10x10x4:100,20x20x8:25,40x40x16:25", "--stages", "40x40x16:100",
                 "--threads", str(threads)]) == 0
    assert main(["export", "--config", str(cfg_path), "--data", str(data), "--params", params,
                 "--axis", "2", "--index", "3", "--out", str(root / "slice.csv")]) == 0


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["generate", "--count", "5", "--seed", "3", "--out", str(root / "d")]) == 0
    cfg = root / "run.json"
    cfg.write_text(json.dumps(RunConfig(steps=4).to_dict()))
    return root / "d", cfg


def test_generate_single_scene(tmp_path):
    assert main(["generate", "--count", "1", "--out", str(tmp_path / "one")]) == 0
    manifest = json.loads((tmp_path / "one" / "manifest.json").read_text())
    assert manifest["scenes"] == ["scene_0000"]
    assert (tmp_path / "one" / "scene_0000" / "scene.json").exists()


def test_generate_uses_config_file(tmp_path):
    (tmp_path / "g.json").write_text(json.dumps({"box_count": [0, 0]}))
    assert main(["generate", "--config", str(tmp_path / "g.json"), "--count", "2", "--out", str(tmp_path / "d")]) == 0
    scene = json.loads((tmp_path / "d" / "scene_0001" / "scene.json").read_text())
    assert scene["boxes"] == []


def test_commands_are_byte_deterministic(tmp_path, dataset):
    data, cfg = dataset
    run_all(tmp_path / "a", data, cfg)
    run_all(tmp_path / "b", data, cfg, threads=3)
    for rel in OUTPUTS:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    rows = (tmp_path / "a" / "bench" / "bench.csv").read_text().splitlines()
    assert rows[1].split('",')[1].startswith("400;800;6400,7600")
    assert rows[2].startswith("40x40x16:100,25600,25600")
    cost = json.loads((tmp_path / "a" / "eval" / "cost_report.json").read_text())
    assert cost["points_per_stage"] == [50, 100, 800] and "seconds" not in cost


def test_zero_step_training_keeps_init(tmp_path, dataset):
    data, cfg = dataset
    assert main(["train", "--config", str(cfg), "--data", str(data), "--steps", "0", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "train_summary.json").read_text())
    assert summary["initial"] == summary["final"]
    assert (tmp_path / "train_log.jsonl").read_text() == ""


def test_seed_flag_changes_parameters(tmp_path, dataset):
    data, cfg = dataset
    for seed in (1, 2):
        assert main(["train", "--config", str(cfg), "--data", str(data), "--steps", "0", "--seed", str(seed),
                     "--out", str(tmp_path / str(seed))]) == 0
    a, b = np.load(tmp_path / "1" / "params.npz"), np.load(tmp_path / "2" / "params.npz")
    assert not np.array_equal(a["head.l1.w"], b["head.l1.w"])


def test_error_paths(tmp_path, dataset, capsys):
    data, cfg = dataset
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--params", str(tmp_path / "none.npz"),
                 "--out", str(tmp_path / "e")]) == 1
    assert "not found" in capsys.readouterr().err
    assert main(["generate", "--count", "1", "--split", "1.0", "--out", str(tmp_path / "tv")]) == 0
    main(["train", "--config", str(cfg), "--data", str(tmp_path / "tv"), "--steps", "0", "--out", str(tmp_path / "t")])
    assert main(["eval", "--config", str(cfg), "--data", str(tmp_path / "tv"),
                 "--params", str(tmp_path / "t" / "params.npz"), "--out", str(tmp_path / "e")]) == 1
    assert "empty" in capsys.readouterr().err
    assert not (tmp_path / "e" / "eval_report.json").exists()
    assert main(["export", "--config", str(cfg), "--data", str(tmp_path / "tv"), "--split", "train",
                 "--params", str(tmp_path / "t" / "params.npz"), "--index", "99",
                 "--out", str(tmp_path / "x.csv")]) == 20
    assert not (tmp_path / "x.csv").exists()
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "z")]) == 1
    assert main(["eval", "--data", str(data), "--params", "p", "--out", "o", "--threads", "0"]) == 2


def test_bad_blob_surfaces_error_code(tmp_path):
    assert main(["generate", "--count", "1", "--split", "1.0", "--out", str(tmp_path / "d")]) == 0
    blob = tmp_path / "d" / "scene_0000" / "view000_features.bin"
    blob.write_bytes(b"NOPE" + blob.read_bytes()[4:])
    assert main(["train", "--data", str(tmp_path / "d"), "--steps", "0", "--out", str(tmp_path / "t")]) == 11


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "voxlift", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("generate", "train", "eval", "bench", "export"):
        assert cmd in out.stdout

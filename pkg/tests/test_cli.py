import json
import os
import shutil
import struct
import subprocess
import sys
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from resiren.checkpoint import load_checkpoint
from resiren.cli import DEFAULTS, main, run
from resiren.probe import ProbeReport

ROOT = Path(__file__).resolve().parents[1]
SMALL = ["--width", "16", "--height", "8", "--n-vars", "3"]
TINY_NET = ["--depth", "3", "--hidden-dim", "16", "--embedding-dim", "8", "--epochs", "2", "--batch-size", "32"]


def fail(argv, capsys):
    code = main(argv)
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return code, json.loads(lines[0])


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "g"), "--seed", "3"] + SMALL) == 0
    grid = str(root / "g" / "grid.cgrd")
    assert main(["pretrain", "--out", str(root / "m"), "--grid", grid, "--seed", "3"] + TINY_NET) == 0
    return root, grid, str(root / "m" / "model.rsrn")


def test_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--seed", "9"] + SMALL) == 0
    assert (tmp_path / "a" / "grid.cgrd").read_bytes() == (tmp_path / "b" / "grid.cgrd").read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "gen" and man["outputs"] == ["grid.cgrd"] and man["seeds"]["grid"] != 9


def test_manifest_replay(tmp_path):
    run(["gen", "--out", str(tmp_path / "a"), "--seed", "4"] + SMALL)
    run(["gen", "--out", str(tmp_path / "b"), "--config", str(tmp_path / "a" / "manifest.json")])
    assert (tmp_path / "a" / "grid.cgrd").read_bytes() == (tmp_path / "b" / "grid.cgrd").read_bytes()


def test_config_then_flags_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"width": 16, "height": 8, "n_vars": 2, "seed": 1}))
    man = run(["gen", "--out", str(tmp_path / "o"), "--config", str(cfg), "--n-vars", "4"])
    assert man.config["width"] == 16 and man.config["n_vars"] == 4 and man.config["seed"] == 1
    assert man.config["land_fraction"] == DEFAULTS["gen"]["land_fraction"]
    pinned = run(["gen", "--out", str(tmp_path / "p"), "--config", str(cfg), "--grid-seed", "77"])
    assert pinned.seeds["grid"] == 77


def test_pretrain_outputs(built):
    root, _, model = built
    ckpt = load_checkpoint(model)
    assert ckpt.config.depth == 3 and ckpt.config.embedding_dim == 8
    loss = (root / "m" / "loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,mean_loss,wallclock_s" and len(loss) == 3
    man = json.loads((root / "m" / "manifest.json").read_text())
    assert set(man["seeds"]) >= {"init", "train"} and "grid" in man["inputs"]


def test_pretrain_reproducible(built, tmp_path):
    root, grid, model = built
    assert main(["pretrain", "--out", str(tmp_path), "--grid", grid, "--seed", "3"] + TINY_NET) == 0
    assert (tmp_path / "model.rsrn").read_bytes() == Path(model).read_bytes()


def test_probe_reports_ten_seeds(built, tmp_path):
    _, grid, model = built
    argv = ["probe", "--out", str(tmp_path), "--grid", grid, "--checkpoint", model, "--task", "traits",
            "--n-points", "60", "--probe-epochs", "2"]
    assert main(argv) == 0
    rep = ProbeReport.from_json(tmp_path / "report.json")
    assert rep.seeds == list(range(10)) and len(rep.values) == 10
    assert rep.std == pytest.approx(np.std(rep.values))
    assert rep.provider == "seasonal" and rep.metric == "r2"
    assert len((tmp_path / "report.csv").read_text().splitlines()) == 2


def test_probe_from_dataset_csv(built, tmp_path):
    _, grid, model = built
    base = ["probe", "--grid", grid, "--checkpoint", model, "--n-inits", "1", "--probe-epochs", "2"]
    assert main(base + ["--out", str(tmp_path / "a"), "--task", "sdm", "--n-occurrences", "100"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--dataset", str(tmp_path / "a" / "dataset.csv")]) == 0
    a = ProbeReport.from_json(tmp_path / "a" / "report.json")
    b = ProbeReport.from_json(tmp_path / "b" / "report.json")
    assert a.values == b.values and a.provider == "obs"


def test_probe_baseline(built, tmp_path):
    _, grid, _ = built
    assert main(["probe", "--out", str(tmp_path), "--grid", grid, "--baseline", "fs-ch", "--task", "biomes",
                 "--n-points", "60", "--n-inits", "1", "--probe-epochs", "2"]) == 0
    assert ProbeReport.from_json(tmp_path / "report.json").provider == "fs-ch"


def test_embed(built, tmp_path):
    _, _, model = built
    pts = tmp_path / "pts.csv"
    pts.write_text("lon_deg,lat_deg,month\n10.0,20.0,3\n-50.5,-10.0,11\n")
    assert main(["embed", "--out", str(tmp_path / "e"), "--checkpoint", model, "--points", str(pts),
                 "--months", "obs"]) == 0
    lines = (tmp_path / "e" / "embeddings.csv").read_text().splitlines()
    assert len(lines) == 3 and len(lines[0].split(",")) == 3 + 8
    assert main(["embed", "--out", str(tmp_path / "s"), "--checkpoint", model, "--points", str(pts)]) == 0
    assert len((tmp_path / "s" / "embeddings.csv").read_text().splitlines()[0].split(",")) == 3 + 32


def test_analyze(built, tmp_path):
    _, grid, model = built
    assert main(["analyze", "--out", str(tmp_path), "--grid", grid, "--checkpoint", model, "--cells", "4,8",
                 "--resolution", "5,7", "--n-occurrences", "120", "--n-inits", "1", "--probe-epochs", "2"]) == 0
    names = json.loads((tmp_path / "manifest.json").read_text())["outputs"]
    assert names == ["errors.json", "errors_by_month.csv", "cell_mae.csv", "prediction_grid.csv"]
    assert len((tmp_path / "prediction_grid.csv").read_text().splitlines()) == 1 + 35


def test_scale(built, tmp_path):
    _, grid, _ = built
    assert main(["scale", "--out", str(tmp_path), "--grid", grid, "--depths", "2,3", "--seeds", "0",
                 "--hidden-dim", "8", "--embedding-dim", "8", "--sweep-epochs", "1", "--batch-size", "64"]) == 0
    rows = (tmp_path / "scaling.csv").read_text().splitlines()
    assert len(rows) == 1 + 4


def test_missing_file(capsys, tmp_path):
    code, err = fail(["pretrain", "--out", str(tmp_path), "--grid", str(tmp_path / "nope.cgrd")], capsys)
    assert code == 3 and err == {"command": "pretrain", "error": "missing_file", "message": err["message"]}


def test_usage_errors(capsys, tmp_path):
    code, err = fail(["gen", "--out", str(tmp_path), "--bogus", "1"], capsys)
    assert code == 2 and err["error"] == "usage"
    code, err = fail(["pretrain", "--out", str(tmp_path)], capsys)
    assert code == 2 and "--grid" in err["message"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"wdth": 3}))
    code, err = fail(["gen", "--out", str(tmp_path), "--config", str(bad)], capsys)
    assert code == 2 and "wdth" in err["message"]


def test_bad_coordinates(built, capsys, tmp_path):
    _, _, model = built
    pts = tmp_path / "pts.csv"
    pts.write_text("lon_deg,lat_deg,month\n200.0,20.0,3\n")
    code, err = fail(["embed", "--out", str(tmp_path), "--checkpoint", model, "--points", str(pts),
                      "--months", "obs"], capsys)
    assert code == 1 and err["command"] == "embed"


def test_format_errors(built, capsys, tmp_path):
    _, grid, model = built
    data = bytearray(Path(model).read_bytes())
    data[len(data) // 2] ^= 0xFF
    (tmp_path / "bad.rsrn").write_bytes(bytes(data))
    args = ["--out", str(tmp_path / "o"), "--grid", grid, "--cells", "2,2", "--export-task", "none"]
    code, err = fail(["analyze", "--checkpoint", str(tmp_path / "bad.rsrn")] + args, capsys)
    assert code == 4 and err["error"] == "bad_format"
    v2 = bytearray(Path(model).read_bytes()[:-4])
    v2[4:8] = struct.pack("<I", 2)
    (tmp_path / "v2.rsrn").write_bytes(bytes(v2) + struct.pack("<I", zlib.crc32(v2)))
    code, err = fail(["analyze", "--checkpoint", str(tmp_path / "v2.rsrn")] + args, capsys)
    assert code == 4 and err["error"] == "version_mismatch"


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "resiren.cli", "gen", "--out", str(tmp_path)] + SMALL,
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "grid.cgrd").exists()


@pytest.mark.slow
@pytest.mark.skipif(shutil.which("resiren") is None, reason="console script not installed")
def test_desk_pipeline_under_15_minutes(tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run(["sh", str(ROOT / "scripts" / "run_desk_pipeline.sh"), str(tmp_path)],
                          capture_output=True, text=True, env={**os.environ, "SEED": "0"})
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    assert elapsed < 15 * 60
    for task in ("biomes", "sdm", "traits"):
        assert (tmp_path / f"probe-{task}" / "report.json").exists()
    assert (tmp_path / "analysis" / "prediction_grid.csv").exists()

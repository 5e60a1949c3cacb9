import json
import subprocess
import sys

import numpy as np
import pytest

from voxprim.cli import main
from voxprim.fitting import FitConfig, fit_subject
from voxprim.io import load_pfm, load_primitive_set
from voxprim.synth import load_subject_dir


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "subj"
    assert main(["make-synth", "--out", str(d), "--views", "2", "--res", "16", "--grid", "4", "--payload", "2",
                 "--seed", "3"]) == 0
    return d


def test_make_synth_layout(synth_dir):
    names = {p.name for p in synth_dir.iterdir()}
    assert {"mesh.json", "cameras.json", "pose.json", "gt.prm", "meta.json", "images", "masks",
            "manifest.json"} <= names
    man = json.loads((synth_dir / "manifest.json").read_text())
    assert man["seed"] == 3 and man["command"] == "make-synth"
    assert all(len(h) == 64 for h in man["outputs"].values())


def test_fit_zero_iters_equals_init(synth_dir, tmp_path):
    out = tmp_path / "init.prm"
    assert main(["fit", "--data", str(synth_dir), "--out", str(out), "--iters", "0"]) == 0
    data, mesh, frames, _ = load_subject_dir(synth_dir)
    ref = fit_subject(data, mesh, frames, FitConfig(iterations=0, payload_resolution=2, seed=0)).primitive_set
    got = load_primitive_set(out)
    assert got.S == 2 and got.grid_width == 4
    assert np.array_equal(got.density, ref.density.astype(np.float32).astype(np.float64))
    assert np.array_equal(got.positions, ref.positions.astype(np.float32).astype(np.float64))
    assert (tmp_path / "init.trace.csv").is_file() and (tmp_path / "init.manifest.json").is_file()


def test_fit_flags_and_config(synth_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 0.01, "batch": 256}))
    out = tmp_path / "f.prm"
    assert main(["fit", "--data", str(synth_dir), "--out", str(out), "--iters", "3", "--config", str(cfg),
                 "--batch", "128"]) == 0
    man = json.loads((tmp_path / "f.manifest.json").read_text())
    assert man["config"]["fit"]["learning_rate"] == 0.01
    assert man["config"]["fit"]["batch"] == 128 and man["config"]["fit"]["iterations"] == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["fit", "--data", str(synth_dir), "--out", str(out), "--config", str(bad)]) == 5


def test_render_and_animate(synth_dir, tmp_path):
    gt = str(synth_dir / "gt.prm")
    cams = str(synth_dir / "cameras.json")
    assert main(["render", "--set", gt, "--camera", cams, "--out", str(tmp_path / "r")]) == 0
    alpha = load_pfm(tmp_path / "r" / "alpha_000.pfm")
    mask = load_pfm(synth_dir / "masks" / "000.pfm")
    # gt.prm stores float32, so the re-render differs from the float64 masks only by quantization
    assert np.abs(alpha - mask).max() <= 1e-5 and alpha.sum() > 0
    for k in ("view_001.png", "depth_001.pfm", "rgb_001.pfm", "manifest.json"):
        assert (tmp_path / "r" / k).is_file()
    assert main(["render", "--set", gt, "--camera", cams, "--out", str(tmp_path / "r2"),
                 "--mesh", str(synth_dir / "mesh.json")]) == 3
    assert main(["animate", "--set", gt, "--mesh", str(synth_dir / "mesh.json"), "--pose",
                 str(synth_dir / "pose.json"), "--camera", cams, "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "frame_000.png").is_file()


def test_sample_inpaint_transfer(synth_dir, tmp_path):
    gt = str(synth_dir / "gt.prm")
    assert main(["sample", "--dataset", gt, "--steps", "20", "--out", str(tmp_path / "s.prm"), "--seed", "1"]) == 0
    man = json.loads((tmp_path / "s.manifest.json").read_text())
    assert man["nearest_item"] == 0 and (tmp_path / "s.pkt.json").is_file()
    mask = tmp_path / "mask.json"
    mask.write_text(json.dumps({"cells": [[0, 0], [1, 1]]}))
    assert main(["inpaint", "--set", gt, "--mask", str(mask), "--dataset", gt, "--steps", "20",
                 "--out", str(tmp_path / "i.prm")]) == 0
    mask.write_text(json.dumps({"cells": [[9, 9]]}))
    assert main(["inpaint", "--set", gt, "--mask", str(mask), "--dataset", gt, "--steps", "5",
                 "--out", str(tmp_path / "i2.prm")]) == 5
    assert main(["transfer", "--set", gt, "--dataset", str(tmp_path / "s.prm"), "--out", str(tmp_path / "t.prm")]) == 0
    t = load_primitive_set(tmp_path / "t.prm")
    assert np.array_equal(t.density, load_primitive_set(gt).density)


def test_bench_manifest(synth_dir, tmp_path):
    out = tmp_path / "bench.json"
    assert main(["bench", "--set", str(synth_dir / "gt.prm"), "--camera", str(synth_dir / "cameras.json"),
                 "--repeat", "2", "--out", str(out)]) == 0
    b = json.loads(out.read_text())["bench"]
    assert b["fps"] > 0 and b["mean_ms_per_frame"] > 0 and b["repeat"] == 2


def test_exit_codes(synth_dir, tmp_path):
    assert main(["frobnicate"]) == 2
    assert main(["render", "--set", str(synth_dir / "gt.prm")]) == 3
    assert main(["render", "--set", str(tmp_path / "none.prm"), "--camera", "x", "--out", str(tmp_path)]) == 4
    (tmp_path / "bad.prm").write_bytes(b"XXXX" + bytes(12))
    assert main(["render", "--set", str(tmp_path / "bad.prm"), "--camera", str(synth_dir / "cameras.json"),
                 "--out", str(tmp_path / "o")]) == 4
    assert main(["make-synth", "--out", str(tmp_path / "z"), "--views", "0"]) == 5
    assert main(["bench", "--set", str(synth_dir / "gt.prm"), "--camera", str(synth_dir / "cameras.json"),
                 "--threads", "0"]) == 5


def test_replay_and_mismatch(synth_dir, tmp_path):
    out = tmp_path / "t.prm"
    assert main(["transfer", "--set", str(synth_dir / "gt.prm"), "--dataset", str(synth_dir / "gt.prm"),
                 "--out", str(out)]) == 0
    mpath = tmp_path / "t.manifest.json"
    assert main(["replay", "--manifest", str(mpath)]) == 0
    doc = json.loads(mpath.read_text())
    doc["outputs"][str(out)] = "0" * 64
    mpath.write_text(json.dumps(doc))
    assert main(["replay", "--manifest", str(mpath)]) == 7


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "voxprim", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()

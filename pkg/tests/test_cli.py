import json

import numpy as np
import pytest
import torch
from PIL import Image

from hyperrestormer.checkpoint import save_checkpoint
from hyperrestormer.config import ModelConfig
from hyperrestormer.cli import main, percentile_stretch
from hyperrestormer.cubeio import read_cube, write_cube
from hyperrestormer.degradations import add_gaussian_noise
from hyperrestormer.model import build_model
from hyperrestormer.synthetic import SyntheticSceneSpec, synth_scene

TINY_MODEL = {
    "embed_dim": 8,
    "n_stages": 1,
    "slsst": {"n_basis": 16, "basis_depths": [1, 1], "abundance_depths": [1], "window_size": 4},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def scene(tmp_path):
    x = synth_scene(SyntheticSceneSpec(seed=0, height=16, width=16, bands=4))
    path = tmp_path / "clean.cube"
    write_cube(path, x)
    return path, x


def write_config(path, model=None, train=None):
    path.write_text(json.dumps({"format_version": 1, "model": model or TINY_MODEL, "train": train or {}}))
    return path


# --------------------------------------------------------------------------
# evaluate / degrade / preview


def test_evaluate_identical_cubes(capsys, scene, tmp_path):
    path, _ = scene
    code, out, _ = run(capsys, "evaluate", "--ref", path, "--test", path, "--out", tmp_path / "r.txt")
    assert code == 0
    assert out.strip() == "mpsnr=100.0, mssim=1.0, sam=0.0"
    report = dict(line.split("=", 1) for line in (tmp_path / "r.txt").read_text().splitlines())
    assert float(report["mpsnr"]) == 100.0


def test_degrade_sigma_zero_is_bit_exact(capsys, scene, tmp_path):
    path, x = scene
    code, _, _ = run(capsys, "degrade", "--task", "noise", "--sigma", 0, "--seed", 3, "--in", path, "--out", tmp_path / "n.cube")
    assert code == 0
    assert read_cube(tmp_path / "n.cube").tobytes() == x.tobytes()


def test_degrade_noise_matches_library_and_is_deterministic(capsys, scene, tmp_path):
    path, x = scene
    for name in ("a", "b"):
        assert run(capsys, "degrade", "--task", "noise", "--sigma", 30, "--seed", 5, "--in", path, "--out", tmp_path / f"{name}.cube")[0] == 0
    a = read_cube(tmp_path / "a.cube")
    assert a.tobytes() == read_cube(tmp_path / "b.cube").tobytes()
    assert np.array_equal(a, add_gaussian_noise(x, 30, 5))


def test_degrade_stripes_writes_mask(capsys, scene, tmp_path):
    path, x = scene
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"stripes": {"n_groups": [2, 2], "n_missing_ranges": [0, 0]}}))
    code, _, _ = run(
        capsys, "degrade", "--task", "stripes", "--spec", spec, "--seed", 1, "--in", path, "--out", tmp_path / "s.cube", "--mask", tmp_path / "m.cube"
    )
    assert code == 0
    y, mask = read_cube(tmp_path / "s.cube"), read_cube(tmp_path / "m.cube")
    assert np.array_equal(y, x * mask) and (mask == 0).any()


def test_degrade_sr_shape(capsys, scene, tmp_path):
    path, _ = scene
    assert run(capsys, "degrade", "--task", "sr", "--scale", 4, "--in", path, "--out", tmp_path / "lr.cube")[0] == 0
    assert read_cube(tmp_path / "lr.cube").shape == (4, 4, 4)


def test_preview_constant_cube_gives_constant_image(capsys, tmp_path):
    write_cube(tmp_path / "c.cube", np.full((3, 6, 5), 0.4))
    assert run(capsys, "preview", "--in", tmp_path / "c.cube", "--bands", "0,1,2", "--out", tmp_path / "c.png")[0] == 0
    img = np.asarray(Image.open(tmp_path / "c.png"))
    assert img.shape == (6, 5, 3) and img.dtype == np.uint8
    assert len(np.unique(img)) == 1


def test_preview_stretch_uses_percentiles(capsys, scene, tmp_path):
    path, x = scene
    assert run(capsys, "preview", "--in", path, "--bands", "3,2,1", "--out", tmp_path / "p.png")[0] == 0
    img = np.asarray(Image.open(tmp_path / "p.png"))
    expected = np.round(percentile_stretch(x[3])).astype(np.uint8)
    assert np.array_equal(img[..., 0], expected)
    assert img.min() == 0 and img.max() == 255


# --------------------------------------------------------------------------
# count


def test_count_reports_ratios(capsys, tmp_path):
    cfg = write_config(tmp_path / "full.json", model={"channels": 172})
    code, out, _ = run(capsys, "count", "--config", cfg, "--hw", "64x64")
    assert code == 0
    report = dict(line.split("=") for line in out.strip().splitlines())
    assert int(report["parameters"]) < int(report["parameters_dense"])
    assert 0 < float(report["parameter_ratio"]) < 1 and 0 < float(report["mac_ratio"]) < 1


# --------------------------------------------------------------------------
# train / restore / benchmark


def test_train_resume_restore_benchmark(capsys, scene, tmp_path):
    path, x = scene
    data = tmp_path / "data"
    for i in range(3):
        write_cube(data / f"c{i}.cube", synth_scene(SyntheticSceneSpec(seed=i, height=16, width=16, bands=4)))
    cfg = write_config(
        tmp_path / "run.json",
        train={"epochs": 2, "batch_size": 2, "checkpoint_every": 1, "degradation": {"kind": "noise", "sigma": 30, "seed": 1}},
    )
    code, out, err = run(capsys, "train", "--config", cfg, "--data", data, "--out", tmp_path / "run")
    assert code == 0, err
    assert out.startswith("steps=4 ")
    ckpt = tmp_path / "run" / "checkpoints" / "epoch_00001.npz"
    code, out, err = run(capsys, "train", "--resume", ckpt, "--data", data, "--out", tmp_path / "resumed")
    assert code == 0, err
    assert out.startswith("steps=4 ")

    final = tmp_path / "run" / "checkpoints" / "final.npz"
    assert run(capsys, "restore", "--checkpoint", final, "--in", path, "--out", tmp_path / "r.cube")[0] == 0
    assert read_cube(tmp_path / "r.cube").shape == x.shape
    code, out, _ = run(capsys, "benchmark", "--checkpoint", final, "--in", path, "--repeat", 2, "--warmup", 0)
    assert code == 0
    stats = json.loads(out)
    assert stats["repeat"] == 2 and stats["min_s"] <= stats["mean_s"] <= stats["max_s"]


def test_train_rejects_task_mismatch(capsys, scene, tmp_path):
    path, _ = scene
    cfg = write_config(tmp_path / "bad.json", model={**TINY_MODEL, "task": "inpaint"}, train={"degradation": {"kind": "noise"}})
    code, _, err = run(capsys, "train", "--config", cfg, "--data", path.parent, "--out", tmp_path / "x")
    assert code == 2 and "does not match" in err


def test_superres_restore_applies_bicubic(capsys, tmp_path):
    x = synth_scene(SyntheticSceneSpec(seed=1, height=16, width=16, bands=4))
    cfg = ModelConfig.from_dict({"channels": 4, "task": "superres", **TINY_MODEL})
    save_checkpoint(tmp_path / "sr.npz", build_model(cfg))
    write_cube(tmp_path / "lr.cube", x[:, ::4, ::4])
    assert run(capsys, "restore", "--checkpoint", tmp_path / "sr.npz", "--in", tmp_path / "lr.cube", "--out", tmp_path / "hr.cube")[0] == 0
    assert read_cube(tmp_path / "hr.cube").shape == (4, 16, 16)


def test_restore_then_evaluate_on_overfit_pair(capsys, overfit, tmp_path):
    run_ = overfit("noise")
    save_checkpoint(tmp_path / "m.npz", run_.model)
    write_cube(tmp_path / "clean.cube", run_.clean)
    write_cube(tmp_path / "noisy.cube", run_.degraded)
    assert run(capsys, "restore", "--checkpoint", tmp_path / "m.npz", "--in", tmp_path / "noisy.cube", "--out", tmp_path / "r.cube")[0] == 0
    _, noisy_out, _ = run(capsys, "evaluate", "--ref", tmp_path / "clean.cube", "--test", tmp_path / "noisy.cube")
    _, restored_out, _ = run(capsys, "evaluate", "--ref", tmp_path / "clean.cube", "--test", tmp_path / "r.cube")

    def psnr(line):
        return float(line.split(",")[0].split("=")[1])

    assert psnr(restored_out) >= psnr(noisy_out) + 10


# --------------------------------------------------------------------------
# exit codes


@pytest.mark.parametrize(
    "argv,code",
    [
        ([], 1),
        (["frobnicate"], 1),
        (["evaluate", "--ref", "a"], 1),
        (["count", "--config", "{cfg}", "--hw", "64by64"], 1),
        (["preview", "--in", "{cube}", "--bands", "0,1", "--out", "{tmp}/p.png"], 1),
        (["evaluate", "--ref", "{tmp}/missing.cube", "--test", "{cube}"], 2),
        (["preview", "--in", "{cube}", "--bands", "0,1,9", "--out", "{tmp}/p.png"], 2),
        (["count", "--config", "{cfg}", "--hw", "99x99"], 2),
        (["restore", "--checkpoint", "{nan}", "--in", "{cube}", "--out", "{tmp}/o.cube"], 3),
        (["--help"], 0),
    ],
)
def test_exit_codes(capsys, scene, tmp_path, argv, code):
    path, _ = scene
    cfg = write_config(tmp_path / "c.json", model={**TINY_MODEL, "channels": 4})
    model = build_model(ModelConfig.from_dict({"channels": 4, **TINY_MODEL}))
    with torch.no_grad():
        model.conv_out.bias.fill_(float("nan"))
    save_checkpoint(tmp_path / "nan.npz", model)
    subs = {"{cfg}": str(cfg), "{cube}": str(path), "{tmp}": str(tmp_path), "{nan}": str(tmp_path / "nan.npz")}
    resolved = []
    for a in argv:
        for k, v in subs.items():
            a = a.replace(k, v)
        resolved.append(a)
    got, out, err = run(capsys, *resolved)
    assert got == code
    if code:
        assert len(err.strip().splitlines()[-1]) > 0

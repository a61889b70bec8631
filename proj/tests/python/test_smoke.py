import math
import os
import shutil
import subprocess

import numpy as np
import pytest

import gdnv


def test_cost_totals_and_reduction():
    ghost = gdnv.cost("ghostcnn-netvlad")
    vgg = gdnv.cost("vgg16-netvlad")
    assert ghost["flops"] == 2 * ghost["macs"]
    assert vgg["params"] > ghost["params"] > 0
    cmp = gdnv.compare()
    assert cmp["flops_reduction_pct"] == pytest.approx(100 * (1 - ghost["flops"] / vgg["flops"]))
    assert cmp["params_reduction_pct"] == pytest.approx(100 * (1 - ghost["params"] / vgg["params"]))


def test_cost_is_dilation_invariant():
    assert gdnv.cost("ghostcnn-netvlad", dilation="1") == gdnv.cost("ghostcnn-netvlad", dilation="5-2")


def test_unknown_arch_raises():
    with pytest.raises(Exception):
        gdnv.cost("resnet")


def test_gradcheck_suite():
    results = gdnv.gradcheck(3)
    assert {r["name"] for r in results} >= {"conv2d", "vlad", "triplet_loss"}
    assert all(r["checked"] > 0 and r["max_rel_error"] <= 1e-4 for r in results)


def unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.linalg.norm(v)


def test_index_matches_brute_force():
    rng = np.random.default_rng(0)
    rows = [unit(rng.normal(size=8)) for _ in range(20)]
    idx = gdnv.Index(8)
    for i, r in enumerate(rows):
        idx.add(f"db{i:02d}", r)
    assert len(idx) == 20 and idx.dim == 8
    q = unit(rng.normal(size=8))
    got = idx.query(q, 5)
    want = sorted((float(np.linalg.norm(q - r)), f"db{i:02d}") for i, r in enumerate(rows))[:5]
    assert [g[0] for g in got] == [w[1] for w in want]
    for (_, d), (wd, _) in zip(got, want):
        assert d == pytest.approx(wd, abs=1e-5)


def test_index_rejects_non_unit_rows():
    idx = gdnv.Index(3)
    with pytest.raises(ArithmeticError):
        idx.add("x", np.array([1.0, 1.0, 0.0], dtype=np.float32))


CLI = os.environ.get("GDNV_CLI") or shutil.which("gdnv")


@pytest.mark.skipif(CLI is None, reason="set GDNV_CLI or put gdnv on PATH")
def test_model_descriptor_from_cli_run(tmp_path):
    data = tmp_path / "data"
    run = tmp_path / "run"
    subprocess.run([CLI, "synth", "--out", str(data), "--places", "6", "--seed", "1"], check=True)
    subprocess.run(
        [CLI, "train", "--manifest", str(data / "manifest.jsonl"), "--out", str(run), "--epochs", "1",
         "--input", "64x64", "--k", "4"],
        check=True,
    )
    model = gdnv.Model.load(str(run / "model.gdnv"))
    assert model.input_size == (64, 64)
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    img[:, 32:] = 200
    d = model.describe(img)
    assert d.dtype == np.float32
    assert math.isclose(float(np.linalg.norm(d)), 1.0, abs_tol=1e-5)
    assert np.array_equal(d, model.describe(img))

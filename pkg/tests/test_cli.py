import json

import numpy as np
import pytest

from vqforge.cli import main, weights_main
from vqforge.kmeans import make_rng
from vqforge.packfmt import read_vqm
from vqforge.qinfer import decode
from vqforge.weightio import ModelBundle, WeightMatrix, save_bundle


@pytest.fixture
def wts(tmp_path):
    r = make_rng(0)
    b = ModelBundle([WeightMatrix("fc1", r.standard_normal((64, 64))), WeightMatrix("fc2", r.standard_normal((32, 64)))])
    path = tmp_path / "m.wts"
    save_bundle(b, path)
    return path


def test_inspect(wts, capsys):
    assert weights_main(["inspect", str(wts)]) == 0
    out = capsys.readouterr().out
    assert "fc1" in out and "64x64" in out
    assert weights_main(["inspect", str(wts), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)["layers"]
    assert [r["name"] for r in rows] == ["fc1", "fc2"]


def test_inspect_reports_bad_file(tmp_path, capsys):
    p = tmp_path / "bad.wts"
    p.write_bytes(b"nope")
    assert weights_main(["inspect", str(p)]) == 2
    assert "error" in capsys.readouterr().err


def test_kmeans(wts, capsys):
    assert main(["kmeans", str(wts), "--k", "16", "--d", "4", "--seed", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    l0 = rep["layers"][0]
    assert len(l0["codebook"]) == 16 and np.array(l0["assignments"]).shape == (64, 16)
    assert l0["distortion"] >= 0


def test_calibrate_pack_info_infer(wts, tmp_path, capsys):
    vqm = tmp_path / "m.vqm"
    rep_path = tmp_path / "r.json"
    assert main(["calibrate", str(wts), "--bits", "2", "--epochs", "1", "--init-steps", "5",
                 "--samples", "64", "--batch-size", "32", "--out", str(vqm), "--report", str(rep_path)]) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["codebook_shape"] == [256, 4]
    model = read_vqm(vqm)
    assert [l.name for l in model] == ["fc1", "fc2"]

    assert main(["pack-info", str(vqm), "--json"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert all(l["bits_per_weight"] == 2.0 for l in info["layers"])
    assert main(["pack-info", str(vqm)]) == 0
    assert "bits/weight" in capsys.readouterr().out

    x = make_rng(1).standard_normal(64).astype("<f4")
    xin = tmp_path / "x.f32"
    x.tofile(xin)
    assert main(["infer", str(vqm), "--input", str(xin), "--bench", "--repeats", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    fc1 = next(l for l in out["layers"] if l["name"] == "fc1")
    expect = decode(model["fc1"]).astype(np.float64) @ x
    np.testing.assert_allclose(np.array(fc1["output"])[0], expect, rtol=1e-5, atol=1e-6)
    assert "on_the_fly_s" in fc1["timing"]


def test_bench_quick(tmp_path):
    out = tmp_path / "b.json"
    csv = tmp_path / "b.csv"
    assert main(["bench", "--suite", "ablation", "--quick", "--out", str(out), "--csv", str(csv)]) == 0
    rep = json.loads(out.read_text())
    assert [r["arm"] for r in rep["rows"]] == ["baseline-vq", "+combination", "+incremental"]
    assert csv.exists()

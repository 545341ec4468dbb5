import csv
import hashlib
import logging

import numpy as np
import pytest
from PIL import Image

from psirkit.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, read_series
from psirkit.core import read_array, write_array

SMALL = ["--rows", "48", "--cols", "64", "--coils", "2", "--noise-samples", "256"]


def sim(out, *extra):
    return main(["simulate", "--out", str(out), *SMALL, *extra])


@pytest.fixture(scope="module")
def static_series(tmp_path_factory):
    d = tmp_path_factory.mktemp("static") / "slice0"
    assert sim(d, "--n-avg", "3", "--noise-sigma", "0", "--motion-amplitude", "0", "--accel", "1") == EXIT_OK
    return d


def test_simulate_is_deterministic(tmp_path):
    assert sim(tmp_path / "a", "--seed", "7", "--n-avg", "2") == EXIT_OK
    assert sim(tmp_path / "b", "--seed", "7", "--n-avg", "2") == EXIT_OK
    a = (tmp_path / "a" / "manifest.txt").read_bytes()
    b = (tmp_path / "b" / "manifest.txt").read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()
    sim(tmp_path / "c", "--seed", "8", "--n-avg", "2")
    assert (tmp_path / "c" / "manifest.txt").read_bytes() != a


def test_simulate_round_trip(tmp_path):
    sim(tmp_path / "s", "--n-avg", "2", "--accel", "3")
    series = read_series(tmp_path / "s")
    assert series.n_avg == 2 and series.mask.acceleration == 3
    k = np.stack(series.k_ir)
    assert k.shape == (2, 2, 48, 64)
    unsampled = ~series.mask.sampled
    assert np.all(k[:, :, unsampled, :] == 0)


@pytest.mark.parametrize(
    "args, flag",
    [
        (["--n-avg", "0"], "--n-avg"),
        (["--coils", "0"], "--coils"),
        (["--noise-sigma", "-1"], "--noise-sigma"),
        (["--acs-lines", "4"], "--acs-lines"),
    ],
)
def test_simulate_bad_flags_exit_2(tmp_path, capsys, args, flag):
    assert sim(tmp_path / "x", *args) == EXIT_CONFIG
    assert flag in capsys.readouterr().err


def test_unwritable_output_exits_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert sim(blocker / "sub", "--n-avg", "1") == EXIT_IO


def test_recon_and_moco_agree_without_motion_or_noise(static_series, tmp_path, caplog):
    caplog.set_level(logging.INFO, logger="psirkit")
    assert main(["recon", "--series", str(static_series), "--out", str(tmp_path / "r"), "--png"]) == EXIT_OK
    assert main(["moco", "--series", str(static_series), "--out", str(tmp_path / "m")]) == EXIT_OK
    a = read_array(tmp_path / "r" / "slice0.cxf")
    b = read_array(tmp_path / "m" / "slice0.cxf")
    assert a.shape == (48, 64) and not np.iscomplexobj(a)
    assert np.abs(a - b).max() <= 1e-6 * max(np.abs(a).max(), 1.0)
    assert "wall time" in caplog.text
    rows = list(csv.DictReader(open(tmp_path / "r" / "timing.csv")))
    assert rows[0]["slice"] == "slice0" and float(rows[0]["wall_time_s"]) > 0
    png = Image.open(tmp_path / "r" / "slice0.png")
    assert png.mode == "L" and png.size == (64, 48)
    assert float(png.text["window_lo"]) < float(png.text["window_hi"])


def test_recon_missing_manifest_exits_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["recon", "--series", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "--series" in capsys.readouterr().err


def test_corrupt_series_exits_3(static_series, tmp_path):
    import shutil

    d = tmp_path / "bad"
    shutil.copytree(static_series, d)
    f = d / "k_ir_000.cxf"
    data = bytearray(f.read_bytes())
    data[-5] ^= 0xFF
    f.write_bytes(bytes(data))
    assert main(["recon", "--series", str(d), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_params_file_is_used(static_series, tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("n_iters = 0\nlambda_ir = \nlambda_pd = \n")
    assert main(["recon", "--series", str(static_series), "--out", str(tmp_path / "o"), "--params", str(p)]) == 0
    p.write_text("refinement.kind = sharpen\n")
    assert main(["recon", "--series", str(static_series), "--out", str(tmp_path / "o2"), "--params", str(p)]) == 2


def _image_pair(tmp_path, rng):
    img = rng.standard_normal((24, 24))
    write_array(tmp_path / "t.cxf", img)
    write_array(tmp_path / "r.cxf", img)


def test_metrics_identical_pairs(tmp_path, rng, capsys):
    _image_pair(tmp_path, rng)
    (tmp_path / "pairs.csv").write_text("patient_id,slice_id,test,ref\nA,0,t.cxf,r.cxf\nB,0,t.cxf,r.cxf\n")
    assert main(["metrics", "--pairs", str(tmp_path / "pairs.csv"), "--out", str(tmp_path / "m.csv")]) == 0
    assert "SSIM 1.0000" in capsys.readouterr().out
    assert (tmp_path / "m.png").is_file()
    assert main(["metrics", "--test", str(tmp_path / "t.cxf"), "--ref", str(tmp_path / "r.cxf"),
                 "--out", str(tmp_path / "m2.csv")]) == 0


def test_metrics_csv_errors(tmp_path, rng, capsys):
    _image_pair(tmp_path, rng)
    (tmp_path / "empty.csv").write_text("")
    assert main(["metrics", "--pairs", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "m.csv")]) == 2
    (tmp_path / "bad.csv").write_text("patient_id,slice_id,test,ref\nA,0,t.cxf,r.cxf\nB,0,t.cxf\n")
    capsys.readouterr()
    assert main(["metrics", "--pairs", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "m.csv")]) == 2
    assert "line 3" in capsys.readouterr().err
    (tmp_path / "miss.csv").write_text("patient_id,slice_id,test,ref\nA,0,t.cxf,nope.cxf\n")
    assert main(["metrics", "--pairs", str(tmp_path / "miss.csv"), "--out", str(tmp_path / "m.csv")]) == 2
    assert main(["metrics", "--out", str(tmp_path / "m.csv")]) == 2


def test_stats_split_reader_pattern(tmp_path, capsys):
    lines = ["patient_id,variant,reader,score_a,score_b"]
    for i in range(30):
        lines.append(f"p{i},bright,r1,{4.0 + 0.5 * (i % 3 != 0)},4")
        lines.append(f"p{i},bright,r2,{4.0 + 0.1 * (-1) ** i},4")
    (tmp_path / "s.csv").write_text("\n".join(lines) + "\n")
    out = tmp_path / "v.csv"
    assert main(["stats", str(tmp_path / "s.csv"), "--out", str(out), "--bootstrap-iters", "500"]) == 0
    text = capsys.readouterr().out
    assert "bright" in text and "equivalent" in text
    merged = [r for r in csv.DictReader(open(out)) if r["reader"] == "merged"]
    assert merged[0]["decision"] == "equivalent"
    assert out.with_suffix(".png").is_file()


def test_stats_bad_input(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("patient_id,variant,reader,score_a,score_b\np1,v,r,x,1\n")
    assert main(["stats", str(tmp_path / "s.csv")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["stats", str(tmp_path / "s.csv"), "--alpha", "2"]) == 2
    assert main(["stats", str(tmp_path / "none.csv")]) == 2


def test_train_cli(tmp_path, capsys):
    out = tmp_path / "t"
    rc = main(["train", "--out", str(out), "--steps", "1", "--n-train", "1", "--n-val", "1", "--n-avg", "2",
               "--coils", "2", "--lr", "5"])
    assert rc == EXIT_OK
    assert "selected step" in capsys.readouterr().out
    for name in ("train_log.csv", "checkpoint_0000.txt", "checkpoint_0001.txt", "selected_params.txt",
                 "train_log.png"):
        assert (out / name).is_file(), name
    assert main(["train", "--out", str(out), "--steps", "-1"]) == EXIT_CONFIG

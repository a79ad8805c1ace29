import csv

import numpy as np
import pytest

from caecodec.cli import main
from caecodec.imageio import read_image, write_image
from caecodec.network import load_checkpoint, save_checkpoint
from helpers import smooth_image


@pytest.fixture
def work(tmp_path, toy_params):
    save_checkpoint(tmp_path / "model.caep", toy_params)
    img = smooth_image(np.random.default_rng(11), 192, 256, channels=3)
    write_image(tmp_path / "img.ppm", img)
    return tmp_path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_encode_decode_eval(work):
    assert main(["-q", "encode", str(work / "img.ppm"), str(work / "model.caep"), "--bpp", "1.0", "--out", str(work / "a.cae")]) == 0
    assert (work / "a.cae").stat().st_size * 8 <= 192 * 256
    assert main(["-q", "decode", str(work / "a.cae"), str(work / "model.caep"), "--out", str(work / "a.ppm")]) == 0
    assert read_image(work / "a.ppm").shape == (192, 256, 3)
    assert main(["-q", "eval", str(work / "img.ppm"), str(work / "a.ppm"), "--out", str(work / "q.csv")]) == 0
    (row,) = rows(work / "q.csv")
    assert np.isfinite(float(row["psnr_db"])) and np.isfinite(float(row["psnr_y_db"]))
    assert 0 <= float(row["msssim"]) <= 1


def test_lossless_encode(work):
    assert main(["-q", "encode", str(work / "img.ppm"), str(work / "model.caep"), "--out", str(work / "a.cae")]) == 0


def test_rd_curve_and_bd_rate(work, capsys):
    out = work / "rd.csv"
    assert main(["-q", "rd-curve", str(work / "img.ppm"), str(work / "model.caep"), "--rates", "0.12,0.5,1.0,2.4", "--out", str(out)]) == 0
    r = rows(out)
    bpp = [float(x["bpp"]) for x in r]
    assert len(r) == 4 and all(b2 > b1 for b1, b2 in zip(bpp, bpp[1:]))
    assert {x["label"] for x in r} == {"img"}
    capsys.readouterr()
    assert main(["bd-rate", str(out), str(out), "--report", str(work / "rep.csv")]) == 0
    assert capsys.readouterr().out.strip() == "0.0"
    assert rows(work / "rep.csv")[0]["image"] == "img"


def test_train(work):
    data = work / "data"
    data.mkdir()
    write_image(data / "x.pgm", smooth_image(np.random.default_rng(0), 48, 48))
    cfg = work / "train.cfg"
    cfg.write_text("# toy run\nfilters = 2,2,2,2,2,2\npatch_size = 8\nbatch_size = 4\nmax_iterations = 5\npatches = 8\n")
    args = ["-q", "train", str(data), "--config", str(cfg), "--out", str(work / "m.caep"), "--history", str(work / "h.csv")]
    assert main(args) == 0
    assert load_checkpoint(work / "m.caep").iteration == 5
    assert len(rows(work / "h.csv")) == 5
    assert main(args[:-4] + ["--out", str(work / "m2.caep"), "--resume", str(work / "m.caep"), "--iterations", "7"]) == 0
    assert load_checkpoint(work / "m2.caep").iteration == 7


@pytest.mark.parametrize(
    "argv",
    [
        ["decode", "missing.cae", "model.caep", "--out", "x.ppm"],
        ["encode", "img.ppm", "model.caep", "--bpp", "0.01", "--out", "x.cae"],
        ["decode", "img.ppm", "model.caep", "--out", "x.ppm"],
        ["eval", "img.ppm"],
        ["train", "nowhere", "--out", "x.caep"],
    ],
)
def test_failures_exit_nonzero_without_output(work, argv, capsys, monkeypatch):
    monkeypatch.chdir(work)
    assert main(["-q"] + argv) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "error" in err[0]
    assert not (work / "x.ppm").exists() and not (work / "x.cae").exists() and not (work / "x.caep").exists()
    assert not list(work.glob(".*.tmp"))


def test_bad_config_key(work, capsys):
    cfg = work / "bad.cfg"
    cfg.write_text("learning_rat = 0.1\n")
    assert main(["-q", "train", str(work), "--config", str(cfg), "--out", str(work / "m.caep")]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--bogus"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_config_parsing():
    from caecodec.config import parse_config

    cfg = parse_config("filters = 8,8,16,16,16,8\npatch_size = 32  # comment\nlambda = 0.5\nlr = 1e-3\npatches = 64\n")
    assert cfg.architecture.filter_counts == (8, 8, 16, 16, 16, 8)
    assert (cfg.train.lam, cfg.train.learning_rate, cfg.patches) == (0.5, 1e-3, 64)
    for bad in ("lambda", "batch_size = two", "patch_size = 12", "lambda = -1"):
        with pytest.raises(ValueError):
            parse_config(bad)

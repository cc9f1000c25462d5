import json
import subprocess
import sys

import numpy as np
import pytest

from sacnet.cli import main
from sacnet.data import image_to_ppm, load_dataset, pgm_to_mask, read_array


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "3", "--count", "6", "--size", "32", "--classes", "4",
                 "--out", str(d / "data")]) == 0
    (d / "run.cfg").write_text(f"preset = micro\nepochs = 2\nbatch_size = 3\ndata_dir = {d / 'data'}\n")
    assert main(["train", "--config", str(d / "run.cfg")]) == 0
    return d


def test_gen_data(trained):
    samples = load_dataset(trained / "data")
    assert len(samples) == 6 and samples[0].image.shape == (3, 32, 32)
    assert json.loads((trained / "data" / "meta.json").read_text())["seed"] == 3


def test_train_writes_under_config_dir(trained):
    assert (trained / "checkpoints" / "best.ckpt").exists()
    assert (trained / "logs" / "metrics.csv").exists()


def test_eval_report(trained):
    out = trained / "eval.json"
    assert main(["eval", "--ckpt", str(trained / "checkpoints" / "best.ckpt"), "--data", str(trained / "data"),
                 "--report", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert 0 <= rep["miou"] <= 1 and len(rep["iou"]) == 4


def test_infer_ppm_to_pgm_and_bin(trained):
    image_to_ppm(load_dataset(trained / "data")[0].image, trained / "x.ppm")
    ck = str(trained / "checkpoints" / "best.ckpt")
    assert main(["infer", "--ckpt", ck, "--image", str(trained / "x.ppm"), "--out", str(trained / "m.pgm")]) == 0
    assert main(["infer", "--ckpt", ck, "--image", str(trained / "data" / "img_00000.bin"),
                 "--out", str(trained / "m.bin")]) == 0
    a, b = pgm_to_mask(trained / "m.pgm"), read_array(trained / "m.bin")
    assert a.shape == b.shape == (32, 32) and a.max() < 4


def test_plot(trained):
    assert main(["plot", "--log", str(trained / "logs" / "metrics.csv"), "--out", str(trained / "plots")]) == 0
    assert sorted(p.name for p in (trained / "plots").iterdir()) == ["iou.png", "kappa.png", "loss.png"]


def test_gradcheck_losses(capsys):
    assert main(["gradcheck", "--op", "losses"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(l.startswith("ok") for l in lines[:-1])


def test_errors_return_2(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "no.ckpt"), "--data", str(tmp_path), "--report", "x"]) == 2
    assert "no.ckpt" in capsys.readouterr().err
    (tmp_path / "bad.cfg").write_text("bogus = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "sacnet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout

import csv

import numpy as np
import pytest

from sacnet import checkpoint as ckpt_io
from sacnet import trainer
from sacnet.config import TrainConfig
from sacnet.losses import ct_loss, one_hot
from sacnet.model import SACNetConfig
from sacnet.optim import cosine_lr
from sacnet.tensor import Tensor, no_grad
from sacnet.trainer import (build_state, evaluate, kappa_tracks_iou, load_data, load_model, read_rows,
                            run_training, score_labels, train_epoch)


def micro_cfg(**kw):
    base = dict(model=SACNetConfig.micro(), epochs=3, data_count=12, batch_size=4, seed=11, eval_batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_training(micro_cfg(), out_dir=out)
    return out, report


class LabelEcho:
    """Stand-in model: channel 0 of the input carries the label map."""

    def __init__(self, C, constant=None):
        self.C = C
        self.constant = constant

    def eval(self):
        return self

    def __call__(self, x):
        lab = np.rint(x.data[:, 0]).astype(int)
        if self.constant is not None:
            lab = np.full_like(lab, self.constant)
        return Tensor(one_hot(lab, self.C))


# train_epoch --------------------------------------------------------------------------

def test_lr_schedule_matches_cosine():
    cfg = micro_cfg()
    state = build_state(cfg)
    (x, y), _ = load_data(cfg)
    n = len(x) // cfg.batch_size + (len(x) % cfg.batch_size > 0)
    for e in range(2):
        stats = train_epoch(state, x, y)
        assert stats["lrs"] == [cosine_lr(e * n + b, cfg.epochs * n, cfg.base_lr) for b in range(n)]
        state.epoch += 1


def test_zero_lr_leaves_params_and_matches_eval_loss():
    # droppath disabled so train-mode and eval-mode forwards coincide; one batch covers the set
    cfg = micro_cfg(base_lr=0.0, batch_size=16, model=SACNetConfig.micro(droppath_max=0.0))
    state = build_state(cfg)
    (x, y), _ = load_data(cfg)
    before = {k: p.data.copy() for k, p in state.model.named_parameters().items()}
    stats = train_epoch(state, x, y)
    for k, p in state.model.named_parameters().items():
        assert p.data.tobytes() == before[k].tobytes(), k
    state.model.eval()
    with no_grad():
        ev = ct_loss(state.model(Tensor(x)), Tensor(one_hot(y, 4)), state.kappa, cfg.loss).item()
    assert stats["loss"] == pytest.approx(ev, rel=1e-12)


def test_epoch_loss_deterministic():
    cfg = micro_cfg()
    (x, y), _ = load_data(cfg)
    a = train_epoch(build_state(cfg), x, y)["loss"]
    b = train_epoch(build_state(cfg), x, y)["loss"]
    assert a == b


def test_nan_loss_names_batch():
    cfg = micro_cfg()
    state = build_state(cfg)
    (x, y), _ = load_data(cfg)
    state.model.head.bias.data[:] = np.nan
    with pytest.raises(FloatingPointError, match="batch 0"):
        train_epoch(state, x, y)


def test_label_range_checked():
    cfg = micro_cfg()
    (x, y), _ = load_data(cfg)
    with pytest.raises(ValueError, match="classes"):
        train_epoch(build_state(cfg), x, y + 4)


# evaluate -----------------------------------------------------------------------------

def test_perfect_predictor():
    rng = np.random.default_rng(0)
    masks = rng.integers(0, 4, (5, 16, 16))
    images = np.zeros((5, 3, 16, 16))
    images[:, 0] = masks
    ev = evaluate(LabelEcho(4), images, masks, 4, batch_size=2)
    assert ev["miou"] == ev["mdsc"] == 1.0 and ev["mhd95"] == 0.0


def test_constant_predictor_hand_count():
    mask = np.zeros((1, 4, 4), int)
    mask[0, :2, :2] = 1       # 4 pixels
    mask[0, 3, :] = 2         # 4 pixels, class 3 absent
    images = np.zeros((1, 3, 4, 4))
    ev = evaluate(LabelEcho(4, constant=0), images, mask, 4)
    assert ev["iou"][0] == 8 / 16
    assert ev["iou"][1] == ev["iou"][2] == 0.0
    assert ev["iou"][3] == 1.0  # absent in both: counted as perfect
    assert ev["dsc"][0] == 2 * 8 / (16 + 8)
    assert ev["miou"] == pytest.approx((0.5 + 0 + 0 + 1) / 4)


def test_score_labels_deterministic():
    rng = np.random.default_rng(1)
    p, m = rng.integers(0, 3, (4, 12, 12)), rng.integers(0, 3, (4, 12, 12))
    assert score_labels(p, m, 3) == score_labels(p, m, 3)


def test_kappa_tracks_iou_helper():
    assert kappa_tracks_iou([0.1, 0.5, 0.5], [3.2, 16.0, 16.0])
    assert not kappa_tracks_iou([0.1, 0.5], [16.0, 3.2])


# run_training -------------------------------------------------------------------------

def test_artifacts_and_kappa_rows(run_dir):
    out, report = run_dir
    with open(out / "logs" / "kappa.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == 3 * 4
    metrics = read_rows(out / "logs" / "metrics.csv")
    assert [r["epoch"] for r in metrics] == [0, 1, 2]
    assert (out / "checkpoints" / "best.ckpt").exists() and (out / "logs" / "report.json").exists()
    assert report["epochs"] == 3


def test_kappa_follows_previous_validation_iou(run_dir):
    out, _ = run_dir
    for r in read_rows(out / "logs" / "metrics.csv"):
        iou = [r[f"iou_{c}"] for c in range(4)]
        assert [r[f"kappa_{c}"] for c in range(4)] == [32.0 * v for v in iou]


def test_best_checkpoint_reproduces_logged_mdsc(run_dir):
    out, report = run_dir
    cfg = micro_cfg()
    _, (xv, yv) = load_data(cfg)
    ev = evaluate(load_model(out / "checkpoints" / "best.ckpt"), xv, yv, 4, cfg.eval_batch_size)
    assert ev["mdsc"] == report["best"]["mdsc"]


def test_rerun_identical_csv(run_dir, tmp_path):
    out, _ = run_dir
    run_training(micro_cfg(), out_dir=tmp_path)
    assert (tmp_path / "logs" / "metrics.csv").read_bytes() == (out / "logs" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(run_dir, tmp_path, monkeypatch):
    out, _ = run_dir
    real = trainer.train_epoch

    def stop_at_two(state, x, y):
        if state.epoch == 2:
            raise KeyboardInterrupt
        return real(state, x, y)

    monkeypatch.setattr(trainer, "train_epoch", stop_at_two)
    with pytest.raises(KeyboardInterrupt):
        run_training(micro_cfg(), out_dir=tmp_path)
    monkeypatch.setattr(trainer, "train_epoch", real)
    run_training(micro_cfg(), resume=str(tmp_path / "checkpoints" / "last.ckpt"), out_dir=tmp_path)
    assert (tmp_path / "logs" / "metrics.csv").read_bytes() == (out / "logs" / "metrics.csv").read_bytes()
    a = ckpt_io.load(tmp_path / "checkpoints" / "last.ckpt")
    b = ckpt_io.load(out / "checkpoints" / "last.ckpt")
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot create directory"):
        run_training(micro_cfg(epochs=1), out_dir=blocker)


def test_fixed_kappa_stays_put(tmp_path):
    rep = run_training(micro_cfg(epochs=1, adaptive_kappa=False, kappa_init=0.0), out_dir=tmp_path)
    assert rep["kappa"] == [0.0] * 4

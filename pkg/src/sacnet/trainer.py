"""Epoch loop, evaluation, checkpointing and run reporting."""
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .data import gen_synthetic, load_dataset, split, stack
from .losses import KappaState, ct_loss, one_hot, update_kappa
from .metrics import dsc, hd95, iou
from .model import SACNet, SACNetConfig
from .nn import cast_parameters
from .optim import AdamW, cosine_lr
from .tensor import Tape, Tensor, no_grad, set_precision

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: SACNet
    optimizer: AdamW
    kappa: KappaState
    rng: np.random.Generator
    epoch: int = 0
    best_mdsc: float = -1.0
    best_epoch: int = -1
    rows: List[dict] = field(default_factory=list)


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return -(-n_train // batch_size)


def build_state(cfg: TrainConfig) -> TrainState:
    set_precision(cfg.precision)
    init_seq, train_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = SACNet(cfg.model, np.random.default_rng(init_seq))
    cast_parameters(model)
    opt = AdamW(model.parameters(), cfg.base_lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    ks = KappaState.initial(cfg.model.num_classes, cfg.kappa_max, cfg.initial_kappa)
    return TrainState(cfg, model, opt, ks, np.random.default_rng(train_seq))


def load_data(cfg: TrainConfig):
    if cfg.data_dir:
        samples = load_dataset(cfg.data_dir)
    else:
        seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
        samples = gen_synthetic(seed, cfg.data_count, cfg.model.input_size[0], cfg.model.num_classes)
    train, val = split(samples, cfg.train_fraction)
    return stack(train), stack(val)


def train_epoch(state: TrainState, images: np.ndarray, masks: np.ndarray) -> dict:
    """One pass over the training set. Does not touch kappa."""
    cfg, model = state.cfg, state.model
    C = cfg.model.num_classes
    if masks.max() >= C:
        raise ValueError(f"mask labels reach {masks.max()}, model has {C} classes")
    model.train()
    order = state.rng.permutation(len(images))
    n_steps = steps_per_epoch(len(images), cfg.batch_size)
    losses, lrs = [], []
    for b in range(n_steps):
        step = state.epoch * n_steps + b
        lr = cosine_lr(step, cfg.epochs * n_steps, cfg.base_lr)
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        x = Tensor(images[idx])
        target = Tensor(one_hot(masks[idx], C))
        with Tape() as tape:
            probs = model(x, state.rng)
            loss = ct_loss(probs, target, state.kappa, cfg.loss)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {state.epoch} batch {b}")
            grads = tape.backward(loss)
        state.optimizer.step(grads, lr)
        losses.append(value)
        lrs.append(lr)
    return {"loss": float(np.mean(losses)), "lr": lrs[0], "lrs": lrs}


def predict(model: SACNet, images: np.ndarray, batch_size: int = 25) -> np.ndarray:
    """Per-pixel argmax labels, (N, H, W)."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            probs = model(Tensor(images[i:i + batch_size]))
            out.append(probs.data.argmax(axis=1))
    return np.concatenate(out)


def score_labels(pred: np.ndarray, masks: np.ndarray, C: int) -> dict:
    """IoU and DSC pooled over all images, HD95 averaged over images; means over all classes."""
    per_iou = [iou(pred == c, masks == c) for c in range(C)]
    per_dsc = [dsc(pred == c, masks == c) for c in range(C)]
    per_hd = [float(np.mean([hd95(p == c, m == c) for p, m in zip(pred, masks)])) for c in range(C)]
    return {
        "iou": per_iou, "dsc": per_dsc, "hd95": per_hd,
        "miou": float(np.mean(per_iou)), "mdsc": float(np.mean(per_dsc)), "mhd95": float(np.mean(per_hd)),
    }


def evaluate(model: SACNet, images: np.ndarray, masks: np.ndarray, C: int, batch_size: int = 25) -> dict:
    return score_labels(predict(model, images, batch_size), masks, C)


def kappa_tracks_iou(iou_values, kappa_values) -> bool:
    """True when every pair of classes is ordered the same way by IoU and by kappa."""
    a = np.asarray(iou_values)
    k = np.asarray(kappa_values)
    return bool(np.all(np.sign(a[:, None] - a[None, :]) == np.sign(k[:, None] - k[None, :])))


# checkpoints ---------------------------------------------------------------------

def make_checkpoint(state: TrainState) -> ckpt_io.Checkpoint:
    named = state.model.named_parameters()
    opt = state.optimizer
    index = {id(p): i for i, p in enumerate(opt.params)}
    moments = {}
    for name, p in named.items():
        moments[f"m/{name}"] = opt.state.m[index[id(p)]]
    for name, p in named.items():
        moments[f"v/{name}"] = opt.state.v[index[id(p)]]
    meta = {
        "train_config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "best_mdsc": state.best_mdsc,
        "best_epoch": state.best_epoch,
        "kappa": {"values": [float(k) for k in state.kappa.kappa], "kappa_max": state.kappa.kappa_max,
                  "history": [list(h) for h in state.kappa.history]},
        "rng": state.rng.bit_generator.state,
    }
    return ckpt_io.Checkpoint(
        config_digest=ckpt_io.digest_bytes(state.cfg.model.digest()),
        params={k: p.data for k, p in named.items()},
        opt_step=opt.state.step,
        moments=moments,
        meta=meta,
    )


def restore_state(ck: ckpt_io.Checkpoint, cfg: Optional[TrainConfig] = None) -> TrainState:
    saved_cfg = TrainConfig.from_dict(ck.meta["train_config"])
    cfg = cfg or saved_cfg
    if ckpt_io.digest_bytes(cfg.model.digest()) != ck.config_digest:
        raise ckpt_io.CheckpointError("checkpoint was written for a different model config (digest mismatch)")
    state = build_state(cfg)
    named = state.model.named_parameters()
    if set(named) != set(ck.params):
        raise ckpt_io.CheckpointError("checkpoint parameter names do not match the model")
    for name, p in named.items():
        if ck.params[name].shape != p.shape:
            raise ckpt_io.CheckpointError(f"{name}: shape {ck.params[name].shape} != {p.shape}")
        p.data = ck.params[name].copy()
    opt = state.optimizer
    index = {id(p): i for i, p in enumerate(opt.params)}
    for name, p in named.items():
        i = index[id(p)]
        if f"m/{name}" in ck.moments:
            opt.state.m[i] = ck.moments[f"m/{name}"].copy()
            opt.state.v[i] = ck.moments[f"v/{name}"].copy()
    opt.state.step = ck.opt_step
    k = ck.meta["kappa"]
    state.kappa = KappaState(np.array(k["values"]), k["kappa_max"], [tuple(h) for h in k["history"]])
    state.epoch = ck.meta["epoch"]
    state.best_mdsc = ck.meta["best_mdsc"]
    state.best_epoch = ck.meta["best_epoch"]
    state.rng.bit_generator.state = ck.meta["rng"]
    return state


def load_model(path) -> SACNet:
    """Model with the weights of checkpoint ``path``, in eval mode."""
    return restore_state(ckpt_io.load(path)).model.eval()


# run loop ---------------------------------------------------------------------------

def _csv_header(C: int) -> List[str]:
    cols = ["epoch", "train_loss", "lr", "miou", "mdsc", "mhd95"]
    for name in ("iou", "dsc", "hd95", "kappa"):
        cols += [f"{name}_{c}" for c in range(C)]
    return cols


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(path: Path, rows: List[dict], C: int) -> None:
    header = _csv_header(C)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def read_rows(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def run_training(cfg: TrainConfig, resume: Optional[str] = None, out_dir=None) -> dict:
    """Train for ``cfg.epochs`` epochs and write logs, checkpoints and a report.

    Per epoch: train, evaluate on validation, update kappa from validation
    IoU, log, save ``last.ckpt`` and, if validation mDSC improved, ``best.ckpt``.
    """
    t0 = time.time()
    base = Path(out_dir) if out_dir is not None else Path(".")
    ckpt_dir = base / cfg.checkpoint_dir
    log_dir = base / cfg.log_dir
    for d in (ckpt_dir, log_dir):
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create directory {d}: {exc.strerror}") from exc
    C = cfg.model.num_classes
    (x_tr, y_tr), (x_va, y_va) = load_data(cfg)
    metrics_csv = log_dir / "metrics.csv"

    if resume:
        state = restore_state(ckpt_io.load(resume), cfg)
        rows = read_rows(metrics_csv) if metrics_csv.exists() else []
        state.rows = [r for r in rows if r["epoch"] < state.epoch]
    else:
        state = build_state(cfg)

    while state.epoch < cfg.epochs:
        stats = train_epoch(state, x_tr, y_tr)
        ev = evaluate(state.model, x_va, y_va, C, cfg.eval_batch_size)
        if cfg.adaptive_kappa:
            state.kappa = update_kappa(state.kappa, ev["iou"], state.epoch)
        else:
            ks = state.kappa
            state.kappa = KappaState(ks.kappa, ks.kappa_max, ks.history + [
                (state.epoch, c, float(ev["iou"][c]), float(ks.kappa[c])) for c in range(C)])
        row = {"epoch": state.epoch, "train_loss": stats["loss"], "lr": stats["lr"],
               "miou": ev["miou"], "mdsc": ev["mdsc"], "mhd95": ev["mhd95"]}
        for name in ("iou", "dsc", "hd95"):
            row.update({f"{name}_{c}": ev[name][c] for c in range(C)})
        row.update({f"kappa_{c}": float(state.kappa.kappa[c]) for c in range(C)})
        state.rows.append(row)
        log.info("epoch %d loss %.4f mIoU %.4f mDSC %.4f", state.epoch, stats["loss"], ev["miou"], ev["mdsc"])

        improved = ev["mdsc"] > state.best_mdsc
        if improved:
            state.best_mdsc = ev["mdsc"]
            state.best_epoch = state.epoch
        state.epoch += 1
        ck = make_checkpoint(state)
        ckpt_io.save(ckpt_dir / "last.ckpt", ck)
        if improved:
            ckpt_io.save(ckpt_dir / "best.ckpt", ck)
        write_rows(metrics_csv, state.rows, C)
        state.kappa.write_csv(log_dir / "kappa.csv")

    final = state.rows[-1]
    best = next(r for r in state.rows if r["epoch"] == state.best_epoch)
    report = {
        "epochs": cfg.epochs,
        "final": _row_metrics(final, C),
        "best_epoch": state.best_epoch,
        "best": _row_metrics(best, C),
        "kappa": [float(k) for k in state.kappa.kappa],
        "best_checkpoint": str(ckpt_dir / "best.ckpt"),
        "metrics_csv": str(metrics_csv),
        "kappa_csv": str(log_dir / "kappa.csv"),
        "seconds": round(time.time() - t0, 2),
    }
    (log_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def _row_metrics(row: dict, C: int) -> dict:
    return {
        "epoch": row["epoch"], "train_loss": row["train_loss"],
        "miou": row["miou"], "mdsc": row["mdsc"], "mhd95": row["mhd95"],
        "iou": [row[f"iou_{c}"] for c in range(C)],
        "dsc": [row[f"dsc_{c}"] for c in range(C)],
        "hd95": [row[f"hd95_{c}"] for c in range(C)],
    }

"""Continuity dynamic adjustment loss: t-vMF Dice + cross-entropy with IoU-driven kappa."""
import csv
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

Number = Union[float, Tensor]


@dataclass
class CTLossConfig:
    num_classes: int
    gamma: float = 0.6
    smooth: float = 1e-6
    log_eps: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass
class KappaState:
    kappa: np.ndarray
    kappa_max: float = 32.0
    history: List[Tuple[int, int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if self.kappa_max <= 0:
            raise ValueError("kappa_max must be positive")
        if np.any(self.kappa < 0) or np.any(self.kappa > self.kappa_max):
            raise ValueError(f"kappa values {self.kappa} outside [0, {self.kappa_max}]")

    @classmethod
    def initial(cls, num_classes: int, kappa_max: float = 32.0, value=None) -> "KappaState":
        value = kappa_max / 2.0 if value is None else value
        return cls(np.full(num_classes, float(value)), kappa_max)

    @property
    def num_classes(self) -> int:
        return self.kappa.shape[0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "class", "iou", "kappa"])
            for epoch, c, iou_c, k in self.history:
                w.writerow([epoch, c, repr(float(iou_c)), repr(float(k))])


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """(B, H, W) integer labels -> (B, C, H, W) indicator array."""
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    return (mask[:, None, :, :] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(np.float64)


def _check_pair(probs: Tensor, onehot: Tensor):
    if probs.shape != onehot.shape or probs.ndim != 4:
        raise ShapeError(f"probs {probs.shape} and onehot {onehot.shape} must share a (B, N, H, W) shape")
    if np.any(probs.data < 0):
        raise ValueError("probabilities must be non-negative")


def class_cosines(probs: Tensor, onehot, smooth: float = 1e-6) -> Tensor:
    """Per-class cosine between flattened prediction and target maps, shape (N,).

    A class absent from both the prediction mass and the target counts as a
    perfect match.
    """
    onehot = as_tensor(onehot)
    _check_pair(probs, onehot)
    axes = (0, 2, 3)
    dot = (probs * onehot).sum(axis=axes)
    p_norm = (probs * probs).sum(axis=axes).sqrt()
    t_norm = np.sqrt((onehot.data ** 2).sum(axis=axes))
    cos = dot / (p_norm * Tensor(t_norm) + smooth)
    absent = (probs.data.sum(axis=axes) == 0) & (t_norm == 0)
    if absent.any():
        cos = cos * Tensor(~absent) + Tensor(absent.astype(np.float64))
    return cos


def class_cosine(probs: Tensor, onehot, c: int, smooth: float = 1e-6) -> Tensor:
    return class_cosines(probs, onehot, smooth)[c]


def tvmf_phi(cos_theta: Number, kappa) -> Number:
    """phi(cos; k) = (1 + cos) / (1 + k (1 - cos)) - 1; k = 0 gives cos itself."""
    k = np.asarray(kappa.data if isinstance(kappa, Tensor) else kappa, dtype=np.float64)
    if np.any(k < 0):
        raise ValueError(f"kappa must be non-negative, got {kappa}")
    if isinstance(cos_theta, Tensor):
        return (1.0 + cos_theta) / (1.0 + Tensor(k) * (1.0 - cos_theta)) - 1.0
    c = np.asarray(cos_theta, dtype=np.float64)
    out = (1.0 + c) / (1.0 + k * (1.0 - c)) - 1.0
    return float(out) if out.ndim == 0 else out


def tvmf_dice_loss(probs: Tensor, onehot, ks: KappaState, cfg: CTLossConfig) -> Tensor:
    if probs.shape[1] != ks.num_classes or probs.shape[1] != cfg.num_classes:
        raise ShapeError(f"probs have {probs.shape[1]} classes, kappa state {ks.num_classes}, "
                         f"config {cfg.num_classes}")
    cos = class_cosines(probs, onehot, cfg.smooth)
    return ((1.0 - tvmf_phi(cos, ks.kappa)) ** 2).mean()


def cross_entropy(probs: Tensor, onehot, log_eps: float = 1e-12) -> Tensor:
    """Pixel-averaged categorical cross-entropy on probabilities."""
    onehot = as_tensor(onehot)
    _check_pair(probs, onehot)
    B, _, H, W = probs.shape
    return -(onehot * probs.clamp_min(log_eps).log()).sum() * (1.0 / (B * H * W))


def ct_loss(probs: Tensor, onehot, ks: KappaState, cfg: CTLossConfig) -> Tensor:
    onehot = as_tensor(onehot)
    return cfg.gamma * tvmf_dice_loss(probs, onehot, ks, cfg) + \
        (1.0 - cfg.gamma) * cross_entropy(probs, onehot, cfg.log_eps)


def update_kappa(ks: KappaState, val_iou: Sequence[float], epoch: int = 0) -> KappaState:
    """kappa_c <- kappa_max * IoU_c: well-segmented classes get a sharper similarity."""
    iou = np.asarray(val_iou, dtype=np.float64)
    if iou.shape != ks.kappa.shape:
        raise ValueError(f"expected {ks.num_classes} IoU values, got {iou.shape}")
    if np.any(iou < 0) or np.any(iou > 1) or not np.all(np.isfinite(iou)):
        raise ValueError(f"IoU values must lie in [0, 1], got {iou}")
    kappa = ks.kappa_max * iou
    history = list(ks.history) + [(epoch, c, float(iou[c]), float(kappa[c])) for c in range(iou.size)]
    return KappaState(kappa, ks.kappa_max, history)

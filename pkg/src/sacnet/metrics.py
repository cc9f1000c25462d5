"""Overlap and distance metrics on binary masks.

Conventions: both masks empty gives DSC = IoU = 1 and distance 0; exactly one
empty gives DSC = IoU = 0 and distance equal to the image diagonal
``sqrt(H^2 + W^2)``. Distances are Euclidean, between foreground pixel centres.
"""
import math

import numpy as np
from scipy.ndimage import distance_transform_edt


def _pair(x, y):
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    return x, y


def dsc(x, y) -> float:
    x, y = _pair(x, y)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / total


def iou(x, y) -> float:
    x, y = _pair(x, y)
    union = int((x | y).sum())
    if union == 0:
        return 1.0
    return int((x & y).sum()) / union


def _diagonal(shape) -> float:
    return math.sqrt(sum(float(n) ** 2 for n in shape))


def _directed(x, y):
    """Distance from each foreground pixel of ``x`` to the nearest foreground pixel of ``y``."""
    return distance_transform_edt(~y)[x]


def hausdorff(x, y) -> float:
    x, y = _pair(x, y)
    nx, ny = x.any(), y.any()
    if not nx and not ny:
        return 0.0
    if not (nx and ny):
        return _diagonal(x.shape)
    return float(max(_directed(x, y).max(), _directed(y, x).max()))


def hd95(x, y, q: float = 95.0) -> float:
    """``q``-th percentile (linear interpolation) of both directed distance sets pooled together."""
    x, y = _pair(x, y)
    nx, ny = x.any(), y.any()
    if not nx and not ny:
        return 0.0
    if not (nx and ny):
        return _diagonal(x.shape)
    pooled = np.concatenate([_directed(x, y), _directed(y, x)])
    return float(np.percentile(pooled, q))


def per_class_masks(labels: np.ndarray, num_classes: int):
    return [labels == c for c in range(num_classes)]

"""Grouped deformable convolution (DCNv3).

For every output location ``p0`` and group ``g``, K points are read from the
group's channel slice at ``p0 + p_k + offset_gk`` by bilinear interpolation,
blended with softmax-normalized modulation weights ``m_gk`` and projected by
the group's ``(C, C/G)`` weight; the group results are summed.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .nn import Conv2d, Linear, Module, Parameter, trunc_normal
from .tensor import ShapeError, Tensor


def sampling_grid(num_points: int = 9) -> List[Tuple[int, int]]:
    """(row, col) grid offsets; for K=9 the 3x3 neighbourhood in row-major order."""
    side = int(round(np.sqrt(num_points)))
    if side * side != num_points:
        raise ValueError(f"num_points must be a perfect square, got {num_points}")
    half = side // 2
    start = -half
    return [(dy, dx) for dy in range(start, start + side) for dx in range(start, start + side)]


@dataclass
class OffsetField:
    offsets: Tensor  # (B, G, K, 2, H, W), pixels, (row, col)
    modulation: Tensor  # (B, G, K, H, W), softmax over K


class DCNv3Params(Module):
    """Generator and projection weights of one deformable core.

    ``offset_gen`` and ``modulation_gen`` are 3x3 convolutions over the input,
    zero-initialized so an untrained operator samples the plain 3x3 grid with
    uniform weights. ``proj`` holds one ``(C, C/G)`` matrix per group.
    """

    def __init__(self, channels: int, groups: int, num_points: int = 9,
                 rng: Optional[np.random.Generator] = None):
        if groups < 1 or channels % groups:
            raise ValueError(f"channels ({channels}) must be divisible by groups ({groups})")
        self.channels = channels
        self.groups = groups
        self.num_points = num_points
        self.grid = sampling_grid(num_points)
        self.offset_gen = Conv2d(channels, 2 * groups * num_points, 3, padding=1, zero_init=True)
        self.modulation_gen = Conv2d(channels, groups * num_points, 3, padding=1, zero_init=True)
        gdim = channels // groups
        self.proj = Parameter(trunc_normal((groups, channels, gdim), rng))

    @property
    def group_dim(self) -> int:
        return self.channels // self.groups


def compute_offsets_modulation(x: Tensor, p: DCNv3Params) -> OffsetField:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"dcnv3: input {x.shape} does not have {p.channels} channels")
    B, _, H, W = x.shape
    G, K = p.groups, p.num_points
    offsets = p.offset_gen(x).reshape(B, G, K, 2, H, W)
    logits = p.modulation_gen(x).reshape(B, G, K, H, W)
    return OffsetField(offsets, ops.softmax(logits, axis=2))


def _grid_arrays(grid, H, W, dtype):
    dy = np.array([g[0] for g in grid], dtype=dtype).reshape(1, 1, -1, 1, 1)
    dx = np.array([g[1] for g in grid], dtype=dtype).reshape(1, 1, -1, 1, 1)
    rows = np.arange(H, dtype=dtype).reshape(1, 1, 1, H, 1)
    cols = np.arange(W, dtype=dtype).reshape(1, 1, 1, 1, W)
    return rows + dy, cols + dx


def dcnv3_apply(x: Tensor, field: OffsetField, p: DCNv3Params, proj: Optional[Tensor] = None) -> Tensor:
    """Deformable aggregation; ``proj`` overrides ``p.proj`` (used by gradient checks)."""
    B, C, H, W = x.shape
    G, K, Cg = p.groups, p.num_points, p.group_dim
    proj = p.proj if proj is None else proj
    if C != p.channels:
        raise ShapeError(f"dcnv3: input {x.shape} does not have {p.channels} channels")
    if field.offsets.shape != (B, G, K, 2, H, W) or field.modulation.shape != (B, G, K, H, W):
        raise ShapeError(f"dcnv3: offsets {field.offsets.shape} / modulation {field.modulation.shape} "
                         f"inconsistent with input {x.shape}, G={G}, K={K}")
    if proj.shape != (G, C, Cg):
        raise ShapeError(f"dcnv3: projection {proj.shape}, expected {(G, C, Cg)}")

    base_r, base_c = _grid_arrays(p.grid, H, W, x.dtype)
    rows = (field.offsets[:, :, :, 0] + Tensor(base_r)).reshape(B * G, K, H, W)
    cols = (field.offsets[:, :, :, 1] + Tensor(base_c)).reshape(B * G, K, H, W)
    sampled = ops.bilinear_gather(x.reshape(B * G, Cg, H, W), rows, cols)  # (B*G, Cg, K, H, W)
    m = field.modulation.reshape(B * G, 1, K, H, W)
    agg = (sampled * m).sum(axis=2).reshape(B, C, H, W)
    # sum_g w_g y_g is one (C, G*Cg) matrix acting on the stacked group outputs
    weight = proj.transpose(1, 0, 2).reshape(C, C)
    return ops.channel_linear(agg, weight)


class DCNv3Block(Module):
    """1x1 input projection, deformable core, 1x1 output projection."""

    def __init__(self, channels: int, groups: int, num_points: int = 9,
                 rng: Optional[np.random.Generator] = None):
        self.input_proj = Linear(channels, channels, rng=rng)
        self.core = DCNv3Params(channels, groups, num_points, rng=rng)
        self.output_proj = Linear(channels, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        field = compute_offsets_modulation(x, self.core)
        return self.output_proj(dcnv3_apply(self.input_proj(x), field, self.core))


def dcnv3_block(x: Tensor, block: DCNv3Block) -> Tensor:
    return block(x)

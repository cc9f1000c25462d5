"""Adaptive receptive field module: a deformable branch and an FFN branch.

    z'  = DP(gamma1 * LN(DCN(z)) + z)
    out = DP(gamma2 * LN(FFN(z')) + z')

DropPath wraps the whole residual sum, so a dropped sample leaves the block
as zeros rather than as its input.
"""
from typing import Optional

import numpy as np

from . import ops
from .dcnv3 import DCNv3Block
from .nn import DropPath, LayerNorm, Linear, Module, Parameter
from .tensor import ShapeError, Tensor


class FFN(Module):
    def __init__(self, channels: int, ratio: int = 4, rng=None):
        if ratio < 1:
            raise ValueError(f"ffn ratio must be >= 1, got {ratio}")
        self.fc1 = Linear(channels, channels * ratio, rng=rng)
        self.fc2 = Linear(channels * ratio, channels, rng=rng)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.fc1.weight.shape[1]:
            raise ShapeError(f"ffn: input {z.shape} does not match {self.fc1.weight.shape[1]} channels")
        return self.fc2(ops.gelu(self.fc1(z)))


def ffn_forward(z: Tensor, ffn: FFN) -> Tensor:
    return ffn(z)


class ARFM(Module):
    def __init__(self, channels: int, groups: int, ffn_ratio: int = 4, drop_prob: float = 0.0,
                 layer_scale: float = 1e-2, num_points: int = 9,
                 rng: Optional[np.random.Generator] = None):
        self.channels = channels
        self.dcn = DCNv3Block(channels, groups, num_points, rng=rng)
        self.norm1 = LayerNorm(channels)
        self.ffn = FFN(channels, ffn_ratio, rng=rng)
        self.norm2 = LayerNorm(channels)
        self.gamma1 = Parameter(np.full(channels, layer_scale))
        self.gamma2 = Parameter(np.full(channels, layer_scale))
        self.drop_path = DropPath(drop_prob)

    def forward(self, z: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.channels:
            raise ShapeError(f"arfm: input {z.shape} does not have {self.channels} channels")
        g1 = self.gamma1.reshape(1, -1, 1, 1)
        g2 = self.gamma2.reshape(1, -1, 1, 1)
        z = self.drop_path(g1 * self.norm1(self.dcn(z)) + z, rng)
        return self.drop_path(g2 * self.norm2(self.ffn(z)) + z, rng)


def arfm_forward(z_prev: Tensor, block: ARFM, mode: str = "eval",
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    block.train(mode == "train")
    return block(z_prev, rng)

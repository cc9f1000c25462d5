"""Module containers and the basic layers built on :mod:`sacnet.ops`."""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from . import ops
from .ops import DropPathConfig
from .tensor import Tensor, get_dtype


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _walk(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child._walk(f"{prefix}{name}.")

    def parameter_references(self) -> List[Tuple[str, Parameter]]:
        """Every (name, parameter) reference, aliased parameters included once per reference."""
        return list(self._walk())

    def named_parameters(self) -> Dict[str, Parameter]:
        """Distinct parameters keyed by the first name they are reachable under."""
        seen = set()
        out = {}
        for name, p in self._walk():
            if id(p) not in seen:
                seen.add(id(p))
                out[name] = p
        return out

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


@dataclass
class ConvParams:
    weight: Parameter
    bias: Optional[Parameter]
    stride: int = 1
    padding: int = 0


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, rng: Optional[np.random.Generator] = None, zero_init: bool = False):
        if kernel < 1:
            raise ValueError(f"kernel size must be >= 1, got {kernel}")
        shape = (out_ch, in_ch, kernel, kernel)
        if zero_init:
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(in_ch * kernel * kernel)
            w = rng.uniform(-bound, bound, shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, self.stride, self.padding)

    def forward(self, x):
        if self.weight.shape[2:] == (1, 1) and self.stride == 1 and self.padding == 0:
            w = self.weight.reshape(self.weight.shape[:2])
            return ops.channel_linear(x, w, self.bias)
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    """Position-wise linear layer acting on the channel axis of (B, C, H, W) maps."""

    def __init__(self, in_ch: int, out_ch: int, bias: bool = True, rng=None, zero_init: bool = False):
        w = np.zeros((out_ch, in_ch)) if zero_init else trunc_normal((out_ch, in_ch), rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return ops.channel_linear(x, self.weight, self.bias)


@dataclass
class LayerNormParams:
    gamma: Parameter
    beta: Parameter
    epsilon: float = 1e-6


class LayerNorm(Module):
    """Normalizes over channels; ``axis=1`` for NCHW maps, ``-1`` for (B, N, C)."""

    def __init__(self, channels: int, eps: float = 1e-6, axis: int = 1):
        if eps <= 0:
            raise ValueError("layernorm epsilon must be positive")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps
        self.axis = axis

    @property
    def params(self) -> LayerNormParams:
        return LayerNormParams(self.gamma, self.beta, self.eps)

    def forward(self, x):
        return ops.layernorm(x, self.gamma, self.beta, axis=self.axis, eps=self.eps)


class GELU(Module):
    def forward(self, x):
        return ops.gelu(x)


class DropPath(Module):
    def __init__(self, drop_prob: float = 0.0):
        DropPathConfig(drop_prob)
        self.drop_prob = drop_prob

    def forward(self, x, rng=None):
        cfg = DropPathConfig(self.drop_prob, "train" if self.training else "eval")
        return ops.droppath(x, cfg, rng)


def cast_parameters(module: Module) -> None:
    """Re-cast every parameter to the current global precision."""
    dtype = get_dtype()
    for p in module.parameters():
        p.data = p.data.astype(dtype)

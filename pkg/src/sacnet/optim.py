"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class AdamWState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState, lr: float,
               betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> AdamWState:
    """Update ``params`` in place and return the advanced state.

    Decay is applied as ``p -= lr * wd * p`` before the bias-corrected Adam step.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return state


class AdamW:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState.zeros_like([p.data for p in self.params])

    def step(self, grads: Dict, lr: float = None) -> None:
        g = [grads[p] if p in grads else np.zeros_like(p.data) for p in self.params]
        adamw_step([p.data for p in self.params], g, self.state, self.lr if lr is None else lr,
                   self.betas, self.eps, self.weight_decay)

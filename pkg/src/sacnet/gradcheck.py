"""Central finite-difference verification of analytical gradients."""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tape, Tensor, TapeError, no_grad, precision


@dataclass
class GradcheckReport:
    max_abs_err: float
    max_rel_err: float
    passed: bool
    checked: int


def _scalar(out: Tensor) -> float:
    if out.size != 1 or out.ndim > 1:
        raise TapeError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(()))


def gradcheck(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-6, tol: float = 1e-4,
              abs_floor: float = 1e-8, max_coords: Optional[int] = None,
              rng: Optional[np.random.Generator] = None, stencil: int = 2) -> GradcheckReport:
    """Compare the tape gradient of ``fn`` at ``point`` with central differences.

    A coordinate passes when its relative error is below ``tol``; coordinates
    where both gradients are below ``abs_floor`` in magnitude are judged on
    absolute error instead. ``max_coords`` restricts the numeric side to a
    random subset of coordinates. ``stencil=4`` switches to the fourth-order
    central difference, which tolerates a larger ``eps`` and so keeps round-off
    noise away from small gradient entries of deep compositions.
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    with precision("float64"):
        base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        x = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            out = fn(x)
            _scalar(out)
            analytic = tape.backward(out, inputs=[x])[x].reshape(-1)

        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

        numeric = np.empty(coords.size)
        probe = flat.copy()
        with no_grad():
            for n, i in enumerate(coords):
                orig = probe[i]

                def at(h):
                    probe[i] = orig + h
                    return _scalar(fn(Tensor(probe.reshape(base.shape))))

                if stencil == 2:
                    numeric[n] = (at(eps) - at(-eps)) / (2.0 * eps)
                else:
                    numeric[n] = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
                probe[i] = orig

    a = analytic[coords]
    abs_err = np.abs(a - numeric)
    scale = np.maximum(np.abs(a), np.abs(numeric))
    small = scale < abs_floor
    rel_err = np.where(small, 0.0, abs_err / np.where(small, 1.0, scale))
    ok = np.where(small, abs_err < tol, rel_err < tol)
    return GradcheckReport(
        max_abs_err=float(abs_err.max(initial=0.0)),
        max_rel_err=float(rel_err.max(initial=0.0)),
        passed=bool(ok.all()),
        checked=int(coords.size),
    )

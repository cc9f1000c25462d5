"""Dense tensors and a reverse-mode differentiation tape.

Operations are recorded onto the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape block nothing is saved, so
plain forward passes (evaluation, finite differences) are cheap.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64
_debug = False
_local = threading.local()

OPS: Dict[str, type] = {}


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_precision(mode: str) -> None:
    """Switch the global numeric mode: ``"float64"`` (verification) or ``"float32"`` (training)."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}, expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[mode]


def get_dtype():
    return _dtype


@contextmanager
def precision(mode: str):
    previous = "float64" if _dtype is np.float64 else "float32"
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def set_debug(enabled: bool) -> None:
    """Enable the finiteness assertion after every recorded op."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return record("add", [self, as_tensor(other)])

    def __radd__(self, other):
        return record("add", [as_tensor(other), self])

    def __sub__(self, other):
        return record("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return record("sub", [as_tensor(other), self])

    def __mul__(self, other):
        return record("mul", [self, as_tensor(other)])

    def __rmul__(self, other):
        return record("mul", [as_tensor(other), self])

    def __truediv__(self, other):
        return record("div", [self, as_tensor(other)])

    def __rtruediv__(self, other):
        return record("div", [as_tensor(other), self])

    def __neg__(self):
        return record("neg", [self])

    def __pow__(self, exponent):
        return record("pow", [self], exponent=float(exponent))

    def __getitem__(self, index):
        return record("getitem", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return record("transpose", [self], axes=axes or None)

    def exp(self):
        return record("exp", [self])

    def log(self):
        return record("log", [self])

    def sqrt(self):
        return record("sqrt", [self])

    def tanh(self):
        return record("tanh", [self])

    def clamp_min(self, floor: float):
        return record("clamp_min", [self], floor=float(floor))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Context:
    """Scratch space a primitive uses to stash intermediates for its backward."""

    def save(self, **items):
        self.__dict__.update(items)


class Function:
    """A differentiable primitive.

    ``forward`` receives raw arrays (plus keyword attributes) and returns an
    array. ``backward`` receives the output gradient and returns one gradient
    per input, ``None`` where an input needs none.
    """

    @staticmethod
    def forward(ctx, *arrays, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError


def register(name: str) -> Callable[[type], type]:
    def deco(cls):
        cls.op_name = name
        OPS[name] = cls
        return cls
    return deco


class _Node:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op, inputs, output, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops evaluated inside the block are appended in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._outputs = set()
        self._consumed = False

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []
        self._outputs = set()
        self._consumed = False

    def _append(self, op, inputs, output, ctx):
        if self._consumed:
            raise TapeError("tape was already differentiated; call reset() before recording")
        output._node = len(self.nodes)
        self._outputs.add(id(output))
        self.nodes.append(_Node(op, inputs, output, ctx))

    def backward(self, loss: Tensor, inputs: Sequence[Tensor] = ()) -> Dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(leaf) for every grad-requiring leaf on the tape.

        Leaves listed in ``inputs`` always receive an entry, zero-filled when
        the loss does not depend on them. Gradients are also written to
        ``leaf.grad``.
        """
        if self._consumed:
            raise TapeError("backward() already called on this tape; reset() it first")
        if loss.size != 1 or loss.ndim > 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        idx = loss._node
        if idx is None or idx >= len(self.nodes) or self.nodes[idx].output is not loss:
            raise TapeError("loss tensor was not produced on this tape")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._outputs:
                    leaves.setdefault(id(t), t)
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.op.backward(node.ctx, g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for t in inputs:
            leaves.setdefault(id(t), t)

        result: Dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads.get(key)
            g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g
            result[t] = g
        return result


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def record(op_kind: str, inputs: List[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``op_kind`` on ``inputs`` and log it on the active tape."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise KeyError(f"unknown op {op_kind!r}") from None
    inputs = [as_tensor(t) for t in inputs]
    ctx = Context()
    out = Tensor(op.forward(ctx, *[t.data for t in inputs], **attrs))
    if _debug and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op_kind}: non-finite values in output of shape {out.shape}")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._append(op, inputs, out, ctx)
    return out


def backward(loss: Tensor, inputs: Sequence[Tensor] = ()) -> Dict[Tensor, np.ndarray]:
    """Differentiate ``loss`` on the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape; wrap the computation in `with Tape() as tape:`")
    return tape.backward(loss, inputs)

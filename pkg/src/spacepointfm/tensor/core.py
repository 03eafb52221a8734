"""Dense tensors with reverse-mode differentiation recorded on an explicit tape.

Two global knobs:
  * default dtype: float64 for gradient-check/test work, float32 for training;
  * mode: "strict" raises on domain violations (log of non-positive input),
    "train" clamps at a small epsilon instead.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float64
_MODE = "strict"
_TAPE_STACK: list["Tape"] = []

CLAMP_EPS = 1e-12


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_mode(mode: str) -> None:
    global _MODE
    if mode not in ("strict", "train"):
        raise ValueError(f"mode must be 'strict' or 'train', got {mode!r}")
    _MODE = mode


def get_mode() -> str:
    return _MODE


@contextlib.contextmanager
def using(dtype=None, mode=None):
    """Temporarily switch default dtype and/or mode."""
    old_dtype, old_mode = _DEFAULT_DTYPE, _MODE
    try:
        if dtype is not None:
            set_default_dtype(dtype)
        if mode is not None:
            set_mode(mode)
        yield
    finally:
        set_default_dtype(old_dtype)
        set_mode(old_mode)


class Tensor:
    """A dense n-d array of floats, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

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

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        if self.requires_grad:
            head += ", requires_grad=True"
        return head + ")"

    # operator sugar; the real work lives in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Node:
    """One executed op: the output it produced and how to push gradients back."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; execution order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, inputs, output, backward_fn) -> None:
        self.nodes.append(Node(inputs, output, backward_fn))

    def backward(self, loss: Tensor, grad=None) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every requires_grad tensor."""
        if grad is None:
            grad = np.ones_like(loss.data)
        else:
            grad = np.asarray(grad, dtype=loss.data.dtype)
            if grad.shape != loss.data.shape:
                raise ValueError("seed gradient shape must match the loss shape")
        grads: dict[int, np.ndarray] = {id(loss): grad}
        touched: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            input_grads = node.backward_fn(g_out)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                touched[key] = tensor
        for key, tensor in touched.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != tensor.data.shape:
                raise AssertionError(
                    f"gradient shape {g.shape} != tensor shape {tensor.data.shape}"
                )
            if tensor.grad is None:
                tensor.grad = g
            else:
                tensor.grad = tensor.grad + g


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(inputs, output, backward_fn) -> None:
    tape = active_tape()
    if tape is not None and output.requires_grad:
        tape.record(inputs, output, backward_fn)

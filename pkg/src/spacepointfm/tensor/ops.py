"""Differentiable operations over Tensor.

Broadcasting in binary ops is deliberately limited to three cases: equal
shapes, a scalar operand, and a trailing-suffix operand (for example a gain
vector of shape (d,) against activations of shape (S, d)). Anything wider is
expressed with explicit reshape/repeat ops so every backward stays obvious.
"""

from __future__ import annotations

import math

import numpy as np

from .. import kernels
from .core import CLAMP_EPS, Tensor, as_tensor, get_mode, record

RMSNORM_EPS = 1e-6


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _result(data, requires_grad):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    t.name = None
    return t


def _check_broadcast(sa, sb):
    if sa == sb:
        return
    if math.prod(sa) == 1 or math.prod(sb) == 1:
        return
    small, large = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(large) and large[len(large) - len(small):] == small:
        return
    raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible "
                     "(only equal, scalar, and trailing-suffix cases are supported)")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, bwd):
    a = as_tensor(a)
    b = as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = _result(fwd(a.data, b.data), a.requires_grad or b.requires_grad)
    if out.requires_grad:
        record((a, b), out, lambda g: bwd(g, a, b))
    return out


def add(a, b):
    return _binary(a, b, np.add,
                   lambda g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    return _binary(a, b, np.subtract,
                   lambda g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, a, b: (_unbroadcast(g * b.data, a.shape),
                                    _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    def bwd(g, a, b):
        inv = 1.0 / b.data
        return (_unbroadcast(g * inv, a.shape),
                _unbroadcast(-g * a.data * inv * inv, b.shape))

    return _binary(a, b, np.divide, bwd)


def scale(x, c: float):
    x = as_tensor(x)
    c = float(c)
    out = _result(x.data * c, x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g * c,))
    return out


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        record((a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)
    out = _result(y, x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g * y * (1.0 - y),))
    return out


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    out = _result(y, x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g * y,))
    return out


def _positive_arg(x, opname):
    if get_mode() == "strict":
        if np.any(x <= 0):
            raise DomainError(f"{opname} of non-positive input in strict mode")
        return x
    return np.maximum(x, CLAMP_EPS)


def log(x):
    x = as_tensor(x)
    arg = _positive_arg(x.data, "log")
    out = _result(np.log(arg), x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g / arg,))
    return out


def sqrt(x):
    x = as_tensor(x)
    arg = _positive_arg(x.data, "sqrt")
    y = np.sqrt(arg)
    out = _result(y, x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g * 0.5 / y,))
    return out


def softplus(x):
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    out = _result(y, x.requires_grad)
    if out.requires_grad:
        s = _stable_sigmoid(x.data)
        record((x,), out, lambda g: (g * s,))
    return out


def silu(x):
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    out = _result(x.data * s, x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))
    return out


def square(x):
    x = as_tensor(x)
    out = _result(x.data * x.data, x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g * 2.0 * x.data,))
    return out


def softmax(x, masked_positions=None):
    """Softmax over the last axis; masked positions come out exactly zero."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one position")
    logits = x.data
    if masked_positions is not None:
        mask = np.asarray(masked_positions, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
        if np.any(mask.all(axis=-1)):
            raise DomainError("softmax row is fully masked")
        logits = np.where(mask, -np.inf, logits)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, x.requires_grad)
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        record((x,), out, bwd)
    return out


def rmsnorm(x, gain):
    """y = gain * x / sqrt(mean(x^2, last axis) + 1e-6)."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"gain shape {gain.shape} != ({d},)")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + RMSNORM_EPS)
    y = x.data * r * gain.data
    out = _result(y, x.requires_grad or gain.requires_grad)
    if out.requires_grad:
        def bwd(g):
            gg = g * gain.data
            dot = (gg * x.data).sum(axis=-1, keepdims=True)
            dx = r * gg - (r ** 3 / d) * x.data * dot
            reduce_axes = tuple(range(x.ndim - 1))
            dgain = (g * x.data * r).sum(axis=reduce_axes) if reduce_axes else g * x.data * r
            return dx, dgain

        record((x, gain), out, bwd)
    return out


def linear_scan(a, b):
    """h[t] = a[t] * h[t-1] + b[t] over (T, h) with h[-1] = 0, in O(T).

    Backward is the hand-derived reverse recurrence, not a taped unroll.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"linear_scan expects equal 2-d shapes, got {a.shape}, {b.shape}")
    h = kernels.scan_forward(a.data, b.data)
    out = _result(h, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def bwd(g):
            da, db = kernels.scan_backward(
                np.ascontiguousarray(a.data), h, np.ascontiguousarray(g))
            return da, db

        record((a, b), out, bwd)
    return out


def ssd_scan(abar, b_in, u, c_out):
    """Fused per-head state-space step: scan then readout, one tape node.

    Shapes: abar (S, H) per-head decay, b_in (S, H, N) state input gains,
    u (S, H, P) head values, c_out (S, H, N) readout gains. Computes
    h[t] = abar[t] * h[t-1] + b_in[t] (x) u[t] over the flattened (H*N*P)
    channels and returns y[t, h, p] = sum_n c_out[t, h, n] * h[t, h, n, p].

    Equivalent to composing repeat/mul/linear_scan/sum, but avoids
    materializing the broadcast intermediates on the tape.
    """
    abar = as_tensor(abar)
    b_in = as_tensor(b_in)
    u = as_tensor(u)
    c_out = as_tensor(c_out)
    s, heads = abar.shape
    n_state = b_in.shape[-1]
    pdim = u.shape[-1]
    if b_in.shape != (s, heads, n_state) or u.shape != (s, heads, pdim) \
            or c_out.shape != (s, heads, n_state):
        raise ShapeError("inconsistent ssd_scan operand shapes")
    a4 = np.ascontiguousarray(
        np.broadcast_to(abar.data[:, :, None, None], (s, heads, n_state, pdim)))
    bu = b_in.data[:, :, :, None] * u.data[:, :, None, :]
    flat = (s, heads * n_state * pdim)
    h = kernels.scan_forward(a4.reshape(flat), np.ascontiguousarray(bu.reshape(flat)))
    h4 = h.reshape(s, heads, n_state, pdim)
    y = np.matmul(c_out.data[:, :, None, :], h4)[:, :, 0, :]
    out = _result(y, abar.requires_grad or b_in.requires_grad
                  or u.requires_grad or c_out.requires_grad)
    if out.requires_grad:
        def bwd(g):
            dc = np.matmul(g[:, :, None, :],
                           h4.transpose(0, 1, 3, 2))[:, :, 0, :]
            dh = c_out.data[:, :, :, None] * g[:, :, None, :]
            da_flat, dbu_flat = kernels.scan_backward(
                a4.reshape(flat), h, np.ascontiguousarray(dh.reshape(flat)))
            da4 = da_flat.reshape(s, heads, n_state, pdim)
            dbu = dbu_flat.reshape(s, heads, n_state, pdim)
            dabar = da4.sum(axis=(2, 3))
            db_in = np.matmul(dbu, u.data[:, :, :, None])[:, :, :, 0]
            du = np.matmul(b_in.data[:, :, None, :], dbu)[:, :, 0, :]
            return dabar, db_in, du, dc

        record((abar, b_in, u, c_out), out, bwd)
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = _result(x.data.reshape(shape), x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g.reshape(x.shape),))
    return out


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {x.shape}")
    out = _result(x.data.T, x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g.T,))
    return out


def repeat(x, axis: int, n: int):
    """Tile a size-1 axis up to n entries; backward sums back over it."""
    x = as_tensor(x)
    if x.shape[axis] != 1:
        raise ShapeError(f"repeat axis {axis} has size {x.shape[axis]}, expected 1")
    out = _result(np.repeat(x.data, n, axis=axis), x.requires_grad)
    if out.requires_grad:
        record((x,), out, lambda g: (g.sum(axis=axis, keepdims=True),))
    return out


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = _result(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad)
    if out.requires_grad:
        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape),)
            ge = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(ge, x.shape),)

        record((x,), out, bwd)
    return out


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)

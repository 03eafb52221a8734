"""AdamW with per-parameter learning-rate multipliers, plus schedule and clipping."""

from __future__ import annotations

import math

import numpy as np

from .core import Tensor


class GradientError(RuntimeError):
    pass


class AdamW:
    """Decoupled weight decay Adam over named parameters.

    Per-parameter lr multipliers implement the width-scaled learning-rate
    groups; a multiplier scales both the Adam step and the decay term,
    matching per-group lr semantics.
    """

    def __init__(self, params, lr_mults=None, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.01):
        if isinstance(params, dict):
            params = list(params.items())
        else:
            params = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
        names = [n for n, _ in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params: list[tuple[str, Tensor]] = params
        self.lr_mults = dict(lr_mults or {})
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            lr_eff = lr * self.lr_mults.get(name, 1.0)
            update = lr_eff * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + lr_eff * self.weight_decay * p.data
            p.data = p.data - update

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for n, _ in self.params:
            self.m[n] = np.asarray(state["m"][n]).astype(self.m[n].dtype)
            self.v[n] = np.asarray(state["v"][n]).astype(self.v[n].dtype)


def lr_schedule(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear ramp 0 -> peak over [0, warmup], cosine decay peak -> 0 over [warmup, total]."""
    if not 0 < warmup < total:
        raise ValueError(f"need 0 < warmup < total, got warmup={warmup} total={total}")
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= warmup:
        return peak * step / warmup
    progress = (min(step, total) - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it.

    Accepts Tensors (their .grad is rescaled) or raw arrays (rescaled in a list
    that is returned implicitly by mutation). Returns the factor applied.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    grads = []
    for p in params:
        g = p.grad if isinstance(p, Tensor) else p
        if g is not None:
            grads.append((p, g))
    sq = 0.0
    for _, g in grads:
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p, g in grads:
        scaled = g * g.dtype.type(factor)
        if isinstance(p, Tensor):
            p.grad = scaled
        else:
            p[...] = scaled
    return factor

"""The pretrained sequence model: feature + positional input embedding, a
stack of pre-norm gated selective linear-recurrence mixer blocks with
residuals, a final RMSNorm, and a 3k-dimensional neighbor-prediction head.

Initialization and per-parameter learning-rate multipliers follow the
width-scaled rules for state-space blocks: with state size N and input width
d, the state-input projection scales as sigma ~ sqrt(N/d) with lr ~ N/sqrt(d)
and the state-readout projection as sigma ~ 1/sqrt(N*d) with lr ~ 1/(N*sqrt(d)),
while ordinary hidden matrices use 1/sqrt(d) init with lr ~ 1/d. All rules
are anchored so they reduce to plain fan-in init with multiplier 1 at the
base width, letting one tuned peak learning rate transfer across widths.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import encoding_dim, positional_encoding


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    state_dim: int = 16
    n_heads: int = 0          # 0 selects d_model // 64, at least 1
    k: int = 10
    pe_levels: int = 6
    mup_base_width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_heads == 0:
            self.n_heads = max(1, self.d_model // 64)
        if min(self.d_model, self.n_layers, self.state_dim, self.n_heads,
               self.k, self.mup_base_width) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def pe_dim(self) -> int:
        return encoding_dim(self.pe_levels)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_layers": self.n_layers,
            "state_dim": self.state_dim, "n_heads": self.n_heads,
            "k": self.k, "pe_levels": self.pe_levels,
            "mup_base_width": self.mup_base_width, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def _named_rng(seed: int, name: str) -> np.random.Generator:
    """Stable per-tensor stream: the draw for a given name depends only on
    (seed, name), so widths change shapes but not streams."""
    digest = hashlib.blake2s(name.encode(), digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


DT_INIT_RANGE = (0.01, 0.5)
A_INIT_RANGE = (1.0, 16.0)


def mup_init(config: ModelConfig, dtype=np.float32):
    """Draw all weights and their lr multipliers for the given width."""
    d = config.d_model
    n_state = config.state_dim
    heads = config.n_heads
    d0 = config.mup_base_width
    n0 = 16.0

    sigma_hidden = 1.0 / math.sqrt(d)
    sigma_b = (1.0 / math.sqrt(d0)) * math.sqrt((n_state / d) / (n0 / d0))
    sigma_c = (1.0 / math.sqrt(d0)) * math.sqrt((n0 * d0) / (n_state * d))
    mult_hidden = d0 / d
    mult_b = (n_state / n0) * math.sqrt(d0 / d)
    mult_c = (n0 / n_state) * math.sqrt(d0 / d)

    weights: dict[str, T.Tensor] = {}
    lr_mults: dict[str, float] = {}

    def gauss(name, shape, std, mult):
        rng = _named_rng(config.seed, name)
        data = (rng.standard_normal(shape) * std).astype(dtype)
        weights[name] = T.Tensor(data, requires_grad=True, dtype=dtype, name=name)
        lr_mults[name] = mult

    def const(name, data, mult=1.0):
        weights[name] = T.Tensor(np.asarray(data, dtype=dtype),
                                 requires_grad=True, dtype=dtype, name=name)
        lr_mults[name] = mult

    gauss("embed.w_feat", (1, d), 1.0, 1.0)
    gauss("embed.w_pos", (config.pe_dim, d), 1.0 / math.sqrt(config.pe_dim), 1.0)
    for i in range(config.n_layers):
        p = f"block{i}."
        const(p + "norm_gain", np.ones(d))
        gauss(p + "w_in", (d, d), sigma_hidden, mult_hidden)
        gauss(p + "w_gate", (d, d), sigma_hidden, mult_hidden)
        gauss(p + "w_delta", (d, heads), sigma_hidden, mult_hidden)
        rng = _named_rng(config.seed, p + "b_delta")
        dt = np.exp(rng.uniform(math.log(DT_INIT_RANGE[0]),
                                math.log(DT_INIT_RANGE[1]), heads))
        const(p + "b_delta", np.log(np.expm1(dt)))  # softplus inverse
        gauss(p + "w_b", (d, heads * n_state), sigma_b, mult_b)
        gauss(p + "w_c", (d, heads * n_state), sigma_c, mult_c)
        rng = _named_rng(config.seed, p + "a_log")
        const(p + "a_log", np.log(rng.uniform(*A_INIT_RANGE, heads)))
        const(p + "d_skip", np.ones(heads))
        gauss(p + "w_out", (d, d), sigma_hidden, mult_hidden)
    const("final_norm_gain", np.ones(d))
    gauss("head.w", (d, 3 * config.k), sigma_hidden, mult_hidden)
    const("head.b", np.zeros(3 * config.k))
    return weights, lr_mults


@dataclass
class Backbone:
    config: ModelConfig
    weights: dict = field(default_factory=dict)
    lr_mults: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, dtype=np.float32) -> "Backbone":
        weights, lr_mults = mup_init(config, dtype=dtype)
        return cls(config=config, weights=weights, lr_mults=lr_mults)

    @property
    def dtype(self):
        return self.weights["head.w"].dtype

    def params(self) -> dict:
        return self.weights

    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def astype(self, dtype) -> "Backbone":
        cast = {
            name: T.Tensor(w.data.astype(dtype), requires_grad=w.requires_grad,
                           dtype=dtype, name=name)
            for name, w in self.weights.items()
        }
        return Backbone(config=self.config, weights=cast, lr_mults=dict(self.lr_mults))

    def freeze(self) -> "Backbone":
        for w in self.weights.values():
            w.requires_grad = False
            w.data.flags.writeable = False
        return self

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.weights):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.weights[name].data).tobytes())
        return digest.hexdigest()

    def _const(self, arr) -> T.Tensor:
        return T.Tensor(np.asarray(arr, dtype=self.dtype), dtype=self.dtype)

    def embed(self, features: np.ndarray, pe: np.ndarray | None = None) -> T.Tensor:
        """(S, 4) serialized (energy, r_hat, phi_hat, eta_hat) -> (S, d_model).

        Elementwise sum of the energy projection and the projected positional
        encoding of the coordinates. A precomputed encoding may be passed to
        avoid recomputing it every step.
        """
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != 4:
            raise T.ShapeError(f"expected (S, 4) features, got {features.shape}")
        energy = self._const(features[:, :1])
        if pe is None:
            pe = positional_encoding(features[:, 1:].astype(np.float64),
                                     self.config.pe_levels)
        return T.add(T.matmul(energy, self.weights["embed.w_feat"]),
                     T.matmul(self._const(pe), self.weights["embed.w_pos"]))

    def mixer_block(self, x: T.Tensor, i: int) -> T.Tensor:
        """Pre-norm gated selective-recurrence mixer with a residual."""
        w = self.weights
        p = f"block{i}."
        cfg = self.config
        s = x.shape[0]
        heads, n_state, pdim = cfg.n_heads, cfg.state_dim, cfg.head_dim

        xn = T.rmsnorm(x, w[p + "norm_gain"])
        u = T.matmul(xn, w[p + "w_in"])
        gate = T.silu(T.matmul(xn, w[p + "w_gate"]))

        delta = T.softplus(T.add(T.matmul(u, w[p + "w_delta"]), w[p + "b_delta"]))
        a_pos = T.exp(w[p + "a_log"])
        abar = T.exp(T.scale(T.mul(delta, a_pos), -1.0))              # (S, H)

        b_proj = T.reshape(T.matmul(u, w[p + "w_b"]), (s, heads, n_state))
        delta3 = T.repeat(T.reshape(delta, (s, heads, 1)), 2, n_state)
        bbar = T.mul(delta3, b_proj)                                   # (S, H, N)

        u_heads = T.reshape(u, (s, heads, pdim))
        c_proj = T.reshape(T.matmul(u, w[p + "w_c"]), (s, heads, n_state))
        y = T.ssd_scan(abar, bbar, u_heads, c_proj)                    # (S, H, P)
        skip = T.repeat(T.reshape(w[p + "d_skip"], (heads, 1)), 1, pdim)
        y = T.add(y, T.mul(u_heads, skip))

        out = T.matmul(T.mul(T.reshape(y, (s, cfg.d_model)), gate), w[p + "w_out"])
        return T.add(x, out)

    def hidden_features(self, features: np.ndarray, pe=None,
                        collect_blocks=None) -> T.Tensor:
        """Run the block stack; returns the post-final-norm (S, d) representation."""
        x = self.embed(features, pe=pe)
        for i in range(self.config.n_layers):
            x = self.mixer_block(x, i)
            if collect_blocks is not None:
                collect_blocks.append(x.data)
        return T.rmsnorm(x, self.weights["final_norm_gain"])

    def head(self, hidden: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(hidden, self.weights["head.w"]), self.weights["head.b"])

    def forward(self, features: np.ndarray, pe=None, collect_blocks=None) -> T.Tensor:
        """(S, 4) serialized features -> (S, 3k) neighbor coordinate predictions."""
        return self.head(self.hidden_features(features, pe=pe,
                                              collect_blocks=collect_blocks))

"""Frozen-backbone downstream heads.

Track finding: a query-based decoder. Point features are linearly projected
to spacepoint embeddings once (the probe layer); N learnable queries are
refined over L decoder layers of masked cross-attention over points, then
self-attention among queries, then a feed-forward update. Each layer's
queries yield mask embeddings, an objectness probability, and point-to-query
assignment probabilities; the cross-attention logits of the next layer are
offset additively by -log(p + eps) so queries focus on their likely points.
Truth tracks are matched to queries with the Hungarian algorithm under a
dice + focal + classification cost, and every layer (plus the initial
queries) contributes an auxiliary loss.

PID and noise tagging share one architecture: linear embedding, a single
self-attention layer for global context, and an MLP classifier with softmax.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, ModelConfig, _named_rng
from .checkpoint import load_checkpoint
from .geometry import Event
from .matching import hungarian
from .serializer import PartitionGrid, SerializedEvent, serialize


@dataclass
class TrackDecoderConfig:
    n_queries: int = 64
    n_layers: int = 3
    d_embed: int = 128
    lambda_dice: float = 5.0
    lambda_focal: float = 5.0
    lambda_cls: float = 2.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    eps_mask: float = 1e-8
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_queries", "n_layers", "d_embed", "lambda_dice", "lambda_focal",
            "lambda_cls", "focal_gamma", "focal_alpha", "eps_mask", "seed")}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class ClassifierConfig:
    n_classes: int = 5
    d_embed: int = 128
    seed: int = 0
    class_weights: tuple | None = None

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "d_embed": self.d_embed,
                "seed": self.seed,
                "class_weights": list(self.class_weights) if self.class_weights else None}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        cw = doc.get("class_weights")
        doc["class_weights"] = tuple(cw) if cw else None
        return cls(**doc)


@dataclass
class TrackPrediction:
    assignment_probs: np.ndarray   # (S, N) p-hat
    objectness: np.ndarray         # (N,) y-hat
    labels: np.ndarray             # (S,) argmax_k p-hat * y-hat


def _gauss(weights, seed, name, shape, std, dtype):
    rng = _named_rng(seed, name)
    weights[name] = T.Tensor((rng.standard_normal(shape) * std).astype(dtype),
                             requires_grad=True, dtype=dtype, name=name)


def _zeros(weights, name, shape, dtype):
    weights[name] = T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True,
                             dtype=dtype, name=name)


def _ones(weights, name, shape, dtype):
    weights[name] = T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True,
                             dtype=dtype, name=name)


def _linear(x, w, b=None):
    out = T.matmul(x, w)
    return T.add(out, b) if b is not None else out


def _attention(q, k, v, extra_logits=None):
    d = q.shape[-1]
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    if extra_logits is not None:
        logits = T.add(logits, extra_logits)
    return T.matmul(T.softmax(logits), v)


class TrackDecoder:
    def __init__(self, d_in: int, config: TrackDecoderConfig, dtype=np.float32):
        self.d_in = d_in
        self.config = config
        self.dtype = np.dtype(dtype).type
        w: dict[str, T.Tensor] = {}
        de = config.d_embed
        std = 1.0 / math.sqrt(de)
        _gauss(w, config.seed, "proj.w", (d_in, de), 1.0 / math.sqrt(d_in), dtype)
        _gauss(w, config.seed, "queries", (config.n_queries, de), std, dtype)
        for l in range(config.n_layers):
            p = f"layer{l}."
            for blk in ("cross", "self"):
                _ones(w, p + blk + ".gain", de, dtype)
                for mat in ("wq", "wk", "wv", "wo"):
                    _gauss(w, config.seed, p + blk + "." + mat, (de, de), std, dtype)
            _ones(w, p + "ffn.gain", de, dtype)
            _gauss(w, config.seed, p + "ffn.w1", (de, 2 * de), std, dtype)
            _zeros(w, p + "ffn.b1", 2 * de, dtype)
            _gauss(w, config.seed, p + "ffn.w2", (2 * de, de),
                   1.0 / math.sqrt(2 * de), dtype)
            _zeros(w, p + "ffn.b2", de, dtype)
        for head in ("mask", "cls"):
            out_dim = de if head == "mask" else 1
            _gauss(w, config.seed, f"{head}.w1", (de, de), std, dtype)
            _zeros(w, f"{head}.b1", de, dtype)
            _gauss(w, config.seed, f"{head}.w2", (de, out_dim), std, dtype)
            _zeros(w, f"{head}.b2", out_dim, dtype)
        self.weights = w

    def params(self) -> dict:
        return self.weights

    def param_count(self) -> int:
        return sum(p.size for p in self.weights.values())

    def _const(self, arr):
        return T.Tensor(np.asarray(arr, dtype=self.dtype), dtype=self.dtype)

    def project(self, features) -> T.Tensor:
        """The single linear probe from point features to spacepoint embeddings."""
        return T.matmul(self._const(features), self.weights["proj.w"])

    def _mlp(self, x, head):
        w = self.weights
        hidden = T.silu(_linear(x, w[f"{head}.w1"], w[f"{head}.b1"]))
        return _linear(hidden, w[f"{head}.w2"], w[f"{head}.b2"])

    def _heads(self, queries, embeddings):
        mask_emb = self._mlp(queries, "mask")                       # (N, de)
        objectness = T.sigmoid(T.reshape(self._mlp(queries, "cls"),
                                         (self.config.n_queries,)))
        p_hat = T.sigmoid(T.matmul(embeddings, T.transpose(mask_emb)))  # (S, N)
        return p_hat, objectness, mask_emb

    def forward(self, features):
        """Per-layer (p_hat, objectness, mask embeddings), layer 0 = initial queries."""
        w = self.weights
        e = self.project(features)
        q = w["queries"]
        outputs = [self._heads(q, e)]
        for l in range(self.config.n_layers):
            p = f"layer{l}."
            p_prev = outputs[-1][0]
            # the penalty -log(p + eps) is subtracted from the cross-attention
            # logits, so low-probability points are suppressed and a p ~ 1
            # column is left untouched
            offsets = T.transpose(
                T.log(T.add(p_prev, self._const(self.config.eps_mask))))
            qn = T.rmsnorm(q, w[p + "cross.gain"])
            attn = _attention(T.matmul(qn, w[p + "cross.wq"]),
                              T.matmul(e, w[p + "cross.wk"]),
                              T.matmul(e, w[p + "cross.wv"]),
                              extra_logits=offsets)
            q = T.add(q, T.matmul(attn, w[p + "cross.wo"]))
            qn = T.rmsnorm(q, w[p + "self.gain"])
            attn = _attention(T.matmul(qn, w[p + "self.wq"]),
                              T.matmul(qn, w[p + "self.wk"]),
                              T.matmul(qn, w[p + "self.wv"]))
            q = T.add(q, T.matmul(attn, w[p + "self.wo"]))
            qn = T.rmsnorm(q, w[p + "ffn.gain"])
            hidden = T.silu(_linear(qn, w[p + "ffn.w1"], w[p + "ffn.b1"]))
            q = T.add(q, _linear(hidden, w[p + "ffn.w2"], w[p + "ffn.b2"]))
            outputs.append(self._heads(q, e))
        return outputs

    def predict(self, features) -> TrackPrediction:
        p_hat, objectness, _ = self.forward(features)[-1]
        p = p_hat.data
        y = objectness.data
        labels = np.argmax(p * y[None, :], axis=1)
        return TrackPrediction(assignment_probs=p, objectness=y, labels=labels)

    # -- losses ---------------------------------------------------------

    def _match(self, truth_masks, p_hat, objectness):
        """Hungarian assignment of truth tracks to queries on the layer's cost."""
        lam_d, lam_f, lam_c = (self.config.lambda_dice, self.config.lambda_focal,
                               self.config.lambda_cls)
        gamma, alpha = self.config.focal_gamma, self.config.focal_alpha
        y_t = truth_masks
        p = np.clip(p_hat.data.astype(np.float64), 1e-12, 1.0 - 1e-12)
        obj = np.clip(objectness.data.astype(np.float64), 1e-12, 1.0)
        s = p.shape[0]
        inter = y_t @ p
        dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(axis=0)[None, :]
                                            + y_t.sum(axis=1)[:, None] + 1.0)
        pos = -alpha * (1.0 - p) ** gamma * np.log(p)
        neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
        focal = (y_t @ pos + (1.0 - y_t) @ neg) / s
        cls = -np.log(obj)[None, :]
        cost = lam_d * dice + lam_f * focal + lam_c * cls
        assignment, total = hungarian(cost)
        return assignment, cost, total

    def _layer_loss(self, truth_masks, p_hat, objectness, assignment):
        """Differentiable dice + focal over matched pairs, BCE objectness over all."""
        cfg = self.config
        m = truth_masks.shape[0]
        s, nq = p_hat.shape
        one = self._const(1.0)
        terms = []
        if m > 0:
            y_const = self._const(truth_masks)
            sel = np.zeros((m, nq), dtype=self.dtype)
            sel[np.arange(m), assignment] = 1.0
            sel_const = self._const(sel)
            inter = T.matmul(y_const, p_hat)                       # (M, N)
            num = T.add(T.scale(inter, 2.0), one)
            colsum = T.repeat(T.reshape(T.tsum(p_hat, axis=0), (1, nq)), 0, m)
            rowsum = self._const(truth_masks.sum(axis=1, keepdims=True)
                                 .repeat(nq, axis=1))
            den = T.add(T.add(colsum, rowsum), one)
            dice = T.sub(one, T.div(num, den))
            dice_loss = T.scale(T.tsum(T.mul(dice, sel_const)), 1.0 / m)

            one_m_p = T.sub(one, p_hat)
            if cfg.focal_gamma == 2.0:
                w_pos, w_neg = T.square(one_m_p), T.square(p_hat)
            else:
                w_pos = T.exp(T.scale(T.log(one_m_p), cfg.focal_gamma))
                w_neg = T.exp(T.scale(T.log(p_hat), cfg.focal_gamma))
            pos = T.scale(T.mul(w_pos, T.log(p_hat)), -cfg.focal_alpha)
            neg = T.scale(T.mul(w_neg, T.log(one_m_p)), -(1.0 - cfg.focal_alpha))
            focal_mat = T.scale(
                T.add(T.matmul(y_const, pos),
                      T.matmul(self._const(1.0 - truth_masks), neg)), 1.0 / s)
            focal_loss = T.scale(T.tsum(T.mul(focal_mat, sel_const)), 1.0 / m)
            terms.append(T.scale(dice_loss, cfg.lambda_dice))
            terms.append(T.scale(focal_loss, cfg.lambda_focal))
        targets = np.zeros(nq, dtype=self.dtype)
        if m > 0:
            targets[assignment] = 1.0
        t_const = self._const(targets)
        bce = T.scale(T.add(
            T.mul(t_const, T.log(objectness)),
            T.mul(self._const(1.0 - targets), T.log(T.sub(one, objectness)))), -1.0)
        terms.append(T.scale(T.tmean(bce), cfg.lambda_cls))
        total = terms[0]
        for term in terms[1:]:
            total = T.add(total, term)
        return total

    def loss(self, features, truth_masks):
        """Total training loss: auxiliary losses from every layer plus the
        initial queries access the same truth matching machinery.

        truth_masks: (M, S) binary, one row per truth track over the
        serialized point order. Returns (total, per-layer list, assignments).
        """
        truth_masks = np.asarray(truth_masks, dtype=np.float64)
        outputs = self.forward(features)
        per_layer = []
        assignments = []
        for p_hat, objectness, _ in outputs:
            if truth_masks.shape[0] > 0:
                assignment, _, _ = self._match(truth_masks, p_hat, objectness)
            else:
                assignment = np.zeros(0, dtype=np.int64)
            per_layer.append(self._layer_loss(truth_masks, p_hat, objectness,
                                              assignment))
            assignments.append(assignment)
        total = per_layer[0]
        for term in per_layer[1:]:
            total = T.add(total, term)
        return total, per_layer, assignments


class PointClassifier:
    """Linear embedding -> one self-attention layer -> MLP with softmax."""

    def __init__(self, d_in: int, config: ClassifierConfig, dtype=np.float32):
        self.d_in = d_in
        self.config = config
        self.dtype = np.dtype(dtype).type
        dp = config.d_embed
        std = 1.0 / math.sqrt(dp)
        w: dict[str, T.Tensor] = {}
        _gauss(w, config.seed, "embed.w", (d_in, dp), 1.0 / math.sqrt(d_in), dtype)
        _zeros(w, "embed.b", dp, dtype)
        _ones(w, "attn.gain", dp, dtype)
        for mat in ("wq", "wk", "wv", "wo"):
            _gauss(w, config.seed, "attn." + mat, (dp, dp), std, dtype)
        _ones(w, "mlp.gain", dp, dtype)
        _gauss(w, config.seed, "mlp.w1", (dp, dp), std, dtype)
        _zeros(w, "mlp.b1", dp, dtype)
        # zero-initialized final layer: untrained output is uniform over classes
        _zeros(w, "mlp.w2", (dp, config.n_classes), dtype)
        _zeros(w, "mlp.b2", config.n_classes, dtype)
        self.weights = w

    def params(self) -> dict:
        return self.weights

    def param_count(self) -> int:
        return sum(p.size for p in self.weights.values())

    def _const(self, arr):
        return T.Tensor(np.asarray(arr, dtype=self.dtype), dtype=self.dtype)

    def forward(self, features) -> T.Tensor:
        """(S, d_in) -> (S, C) class probabilities."""
        w = self.weights
        h = _linear(self._const(features), w["embed.w"], w["embed.b"])
        hn = T.rmsnorm(h, w["attn.gain"])
        attn = _attention(T.matmul(hn, w["attn.wq"]),
                          T.matmul(hn, w["attn.wk"]),
                          T.matmul(hn, w["attn.wv"]))
        h = T.add(h, T.matmul(attn, w["attn.wo"]))
        hn = T.rmsnorm(h, w["mlp.gain"])
        hidden = T.silu(_linear(hn, w["mlp.w1"], w["mlp.b1"]))
        logits = _linear(hidden, w["mlp.w2"], w["mlp.b2"])
        return T.softmax(logits)

    def loss(self, features, labels) -> T.Tensor:
        """Cross-entropy, optionally weighted per class."""
        probs = self.forward(features)
        s, c = probs.shape
        onehot = np.zeros((s, c), dtype=self.dtype)
        onehot[np.arange(s), np.asarray(labels, dtype=np.int64)] = 1.0
        if self.config.class_weights is not None:
            cw = np.asarray(self.config.class_weights, dtype=np.float64)
            point_w = cw[np.asarray(labels, dtype=np.int64)]
            onehot = onehot * (point_w / point_w.mean())[:, None].astype(self.dtype)
        picked = T.tsum(T.mul(T.log(probs), self._const(onehot)))
        return T.scale(picked, -1.0 / s)

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.forward(features).data, axis=1)


class FrozenFeatures:
    """Feature server over a frozen backbone (or raw inputs).

    Features are the backbone's post-final-norm representation of the
    serialized event; results are cached per event id up to cache_limit.
    """

    def __init__(self, backbone: Backbone | None, grid: PartitionGrid,
                 cache_limit: int = 4096):
        self.backbone = backbone.freeze() if backbone is not None else None
        self.grid = grid
        self.checksum = backbone.checksum() if backbone is not None else "raw"
        self.cache_limit = cache_limit
        self._cache: dict[int, tuple] = {}

    @property
    def d_out(self) -> int:
        return self.backbone.config.d_model if self.backbone is not None else 4

    @staticmethod
    def _key(event: Event):
        # event ids restart per corpus; fold in shape and corner coordinates
        first, last = event.points[0], event.points[-1]
        return (event.event_id, len(event.points), first.x, first.z, last.phi)

    def features_for(self, event: Event):
        """Returns (features (S, d_out) float32, serialized ordering)."""
        if len(event.points) == 0:
            raise ValueError(f"event {event.event_id} has no points")
        key = self._key(event)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        ser = serialize(event, self.grid)
        feats = event.features()[ser.order]
        if self.backbone is None:
            out = feats.astype(np.float32)
        else:
            hidden = self.backbone.hidden_features(feats.astype(self.backbone.dtype))
            out = hidden.data.astype(np.float32)
        result = (out, ser)
        if len(self._cache) < self.cache_limit:
            self._cache[key] = result
        return result

    def verify_frozen(self) -> None:
        if self.backbone is None:
            return
        current = self.backbone.checksum()
        if current != self.checksum:
            raise RuntimeError("frozen backbone weights changed "
                               f"({self.checksum[:12]} -> {current[:12]})")


def truth_masks_for(event: Event, order: np.ndarray) -> np.ndarray:
    """(M, S) binary truth assignment over the serialized order."""
    n = len(event.points)
    position = np.empty(n, dtype=np.int64)
    position[order] = np.arange(n)
    masks = np.zeros((len(event.tracks), n), dtype=np.float64)
    for j, track in enumerate(event.tracks):
        masks[j, position[track]] = 1.0
    return masks


def freeze_and_probe(source, grid: PartitionGrid | None = None,
                     cache_limit: int = 4096) -> FrozenFeatures:
    """Feature extractor from a checkpoint path, a Backbone, or 'raw'."""
    if isinstance(source, str) and source == "raw":
        if grid is None:
            raise ValueError("raw feature mode still needs a partition grid")
        return FrozenFeatures(None, grid, cache_limit)
    if isinstance(source, Backbone):
        if grid is None:
            raise ValueError("missing partition grid")
        return FrozenFeatures(source, grid, cache_limit)
    tensors, metadata = load_checkpoint(source)
    if metadata.get("kind") != "backbone":
        raise ValueError(f"{source} is a {metadata.get('kind')!r} checkpoint, "
                         "expected a backbone")
    config = ModelConfig.from_dict(metadata["config"])
    weights = {
        name: T.Tensor(arr, dtype=np.float32, name=name)
        for name, arr in tensors.items() if not name.startswith("opt.")
    }
    backbone = Backbone(config=config, weights=weights)
    if grid is None:
        if metadata.get("grid") is None:
            raise ValueError("checkpoint carries no partition grid")
        grid = PartitionGrid.from_dict(metadata["grid"])
    return FrozenFeatures(backbone, grid, cache_limit)


def random_frozen_backbone(config: ModelConfig, seed: int | None = None) -> Backbone:
    """The AdapterOnly baseline: an untrained frozen backbone of identical shape."""
    cfg_doc = config.to_dict()
    if seed is not None:
        cfg_doc["seed"] = seed
    return Backbone.init(ModelConfig.from_dict(cfg_doc)).freeze()

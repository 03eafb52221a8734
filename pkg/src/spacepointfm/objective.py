"""Self-supervised regression targets and loss: for every spacepoint, predict
the normalized coordinates of its k nearest neighbors among the points at
strictly larger radius, with per-event difficulty reweighting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Event

DEFAULT_K = 10
DEFAULT_DIFFICULTY_BINS = 8
_ROW_BLOCK = 256


@dataclass
class KnnTargets:
    """Per-point forward-neighbor targets in normalized (r, phi, eta) space."""

    k: int
    target_coords: np.ndarray   # (n, k, 3), zero-filled at masked slots
    valid_mask: np.ndarray      # (n, k) bool
    mean_knn_distance: float    # mean distance over all valid (point, slot) pairs

    def reordered(self, order: np.ndarray) -> "KnnTargets":
        return KnnTargets(self.k, self.target_coords[order],
                          self.valid_mask[order], self.mean_knn_distance)

    def cast_cache(self, dtype):
        """Loss-side constants (targets, 3-wide mask, valid count) per dtype."""
        cache = getattr(self, "_cache", None)
        if cache is None or cache[0] != dtype:
            n_valid = int(self.valid_mask.sum())
            self._cache = (
                dtype,
                self.target_coords.astype(dtype),
                np.repeat(self.valid_mask[:, :, None], 3, axis=2).astype(dtype),
                n_valid,
            )
        return self._cache[1:]


def build_targets(event: Event, k: int = DEFAULT_K) -> KnnTargets:
    """k nearest forward neighbors per point; ties broken by point index."""
    if len(event) == 0:
        raise ValueError("event has no points")
    coords = event.coords_normalized()
    n = len(coords)
    targets = np.zeros((n, k, 3), dtype=np.float64)
    mask = np.zeros((n, k), dtype=bool)
    dist_sum = 0.0
    dist_count = 0
    col_idx = np.arange(n)
    for start in range(0, n, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, n)
        block = coords[start:stop]
        d2 = ((block[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1)
        forward = coords[None, :, 0] > block[:, None, 0]
        d2[~forward] = np.inf
        order = np.lexsort((np.broadcast_to(col_idx, d2.shape), d2), axis=-1)
        take = order[:, :k]
        chosen_d2 = np.take_along_axis(d2, take, axis=-1)
        valid = np.isfinite(chosen_d2)
        rows = valid.sum(axis=-1)
        for bi in range(stop - start):
            kk = int(rows[bi])
            if kk:
                targets[start + bi, :kk] = coords[take[bi, :kk]]
                mask[start + bi, :kk] = True
        d = np.sqrt(chosen_d2[valid])
        dist_sum += float(d.sum())
        dist_count += int(valid.sum())
    mean_d = dist_sum / dist_count if dist_count else 0.0
    return KnnTargets(k=k, target_coords=targets, valid_mask=mask,
                      mean_knn_distance=mean_d)


def knn_loss(pred: T.Tensor, targets: KnnTargets):
    """Mean over valid (point, slot) pairs of the squared coordinate distance.

    Masked slots contribute nothing to the value or the gradient. Returns
    (loss tensor, skipped) where skipped marks an all-masked event.
    """
    n, k = targets.valid_mask.shape
    if pred.shape != (n, 3 * k):
        raise T.ShapeError(f"prediction shape {pred.shape} != ({n}, {3 * k})")
    tgt_arr, mask_arr, n_valid = targets.cast_cache(pred.dtype)
    if n_valid == 0:
        return T.Tensor(np.zeros((), dtype=pred.dtype)), True
    tgt = T.Tensor(tgt_arr, dtype=pred.dtype)
    m3 = T.Tensor(mask_arr, dtype=pred.dtype)
    diff = T.sub(T.reshape(pred, (n, k, 3)), tgt)
    masked = T.mul(T.square(diff), m3)
    return T.scale(T.tsum(masked), 1.0 / n_valid), False


@dataclass
class DifficultyBins:
    """Quantile bins over per-event mean neighbor distance, with weights.

    edges are the inner boundaries (outer bins unbounded); weights follow
    w_g = median_h(m_h) / m_g with m_g the bin mean of squared distances.
    """

    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.edges) + 1:
            raise ValueError("need exactly one more weight than inner edges")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")

    def bin_of(self, difficulty: float) -> int:
        return int(np.searchsorted(self.edges, difficulty, side="right"))

    def weight_of(self, difficulty: float) -> float:
        return float(self.weights[self.bin_of(difficulty)])

    def to_json(self) -> str:
        return json.dumps({"edges": self.edges.tolist(),
                           "weights": self.weights.tolist()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DifficultyBins":
        doc = json.loads(text)
        return cls(doc["edges"], doc["weights"])

    def to_dict(self) -> dict:
        return json.loads(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "DifficultyBins":
        return cls(doc["edges"], doc["weights"])


def fit_difficulty_bins(corpus, n_bins: int = DEFAULT_DIFFICULTY_BINS,
                        min_events: int = 100) -> DifficultyBins:
    """Quantile edges over per-event difficulty; weights from bin means."""
    difficulties = np.asarray(
        [t.mean_knn_distance if isinstance(t, KnnTargets) else float(t)
         for t in corpus], dtype=np.float64)
    if len(difficulties) < min_events:
        raise ValueError(f"need at least {min_events} events, got {len(difficulties)}")
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    edges = np.unique(np.quantile(difficulties, qs))
    if difficulties.min() == difficulties.max():
        return DifficultyBins(edges=np.zeros(0), weights=np.ones(1))
    bins = np.searchsorted(edges, difficulties, side="right")
    n_eff = len(edges) + 1
    means = np.full(n_eff, np.nan)
    for g in range(n_eff):
        sel = difficulties[bins == g]
        if len(sel):
            means[g] = float(np.mean(sel ** 2))
    present = np.isfinite(means)
    med = float(np.median(means[present]))
    weights = np.where(present, med / np.where(present, means, 1.0), 1.0)
    return DifficultyBins(edges=edges, weights=weights)


def batch_loss(event_losses, bins: DifficultyBins, difficulties) -> T.Tensor:
    """Mean over events of w_g(i) * L_i."""
    if len(event_losses) == 0:
        raise ValueError("empty batch")
    if len(event_losses) != len(difficulties):
        raise ValueError("losses and difficulties must have equal length")
    total = None
    for loss, d in zip(event_losses, difficulties):
        term = T.scale(loss, bins.weight_of(d))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(event_losses))

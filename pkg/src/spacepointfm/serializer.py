"""Hierarchical raster scan: a 6 x 8 x 8 physics-informed partition of the
normalized (r, phi, eta) volume and the two-level ordering that turns an
unordered point set into a sequence.

Radial bin edges are fixed at the detector's layer-group half boundaries
(two bins per group); phi and eta edges come from empirical occupancy
quantiles so each of the 8 bins holds roughly the same point share. Boxes
are visited in ascending (r_bin, phi_bin, eta_bin) lexicographic rank;
within a box, points are sorted by (r, phi, eta, original index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import R_MAX, R_MIN, Event

R_GROUP_HALF_EDGES_CM = (30.0, 38.0, 46.0, 54.0, 62.0, 70.0, 78.0)
N_R_BINS = 6
N_PHI_BINS = 8
N_ETA_BINS = 8
MIN_FIT_POINTS = 10_000


def _r_edges_normalized() -> np.ndarray:
    cm = np.asarray(R_GROUP_HALF_EDGES_CM)
    return (cm - R_MIN) / (R_MAX - R_MIN)


@dataclass
class PartitionGrid:
    """Bin edges in normalized coordinates plus fit provenance."""

    r_edges: np.ndarray
    phi_edges: np.ndarray
    eta_edges: np.ndarray
    sample_points: int = 0
    sample_events: int = 0
    sample_seed: int = 0

    def __post_init__(self):
        self.r_edges = np.asarray(self.r_edges, dtype=np.float64)
        self.phi_edges = np.asarray(self.phi_edges, dtype=np.float64)
        self.eta_edges = np.asarray(self.eta_edges, dtype=np.float64)
        for name, edges, n in (("r", self.r_edges, N_R_BINS),
                               ("phi", self.phi_edges, N_PHI_BINS),
                               ("eta", self.eta_edges, N_ETA_BINS)):
            if len(edges) != n + 1:
                raise ValueError(f"{name} edges must have {n + 1} entries")
            if np.any(np.diff(edges) <= 0):
                raise ValueError(f"{name} edges must be strictly increasing")

    @property
    def n_boxes(self) -> int:
        return N_R_BINS * N_PHI_BINS * N_ETA_BINS

    def box_ids(self, coords: np.ndarray) -> np.ndarray:
        """Rank of each point's box; rank is lexicographic in (r, phi, eta) bins.

        Points outside the outer edges clamp into the boundary bins.
        """
        coords = np.asarray(coords, dtype=np.float64)
        rb = np.clip(np.searchsorted(self.r_edges, coords[:, 0], side="right") - 1,
                     0, N_R_BINS - 1)
        pb = np.clip(np.searchsorted(self.phi_edges, coords[:, 1], side="right") - 1,
                     0, N_PHI_BINS - 1)
        eb = np.clip(np.searchsorted(self.eta_edges, coords[:, 2], side="right") - 1,
                     0, N_ETA_BINS - 1)
        return (rb * N_PHI_BINS + pb) * N_ETA_BINS + eb

    def to_json(self) -> str:
        return json.dumps({
            "r_edges": self.r_edges.tolist(),
            "phi_edges": self.phi_edges.tolist(),
            "eta_edges": self.eta_edges.tolist(),
            "sample_points": self.sample_points,
            "sample_events": self.sample_events,
            "sample_seed": self.sample_seed,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PartitionGrid":
        doc = json.loads(text)
        return cls(doc["r_edges"], doc["phi_edges"], doc["eta_edges"],
                   sample_points=doc.get("sample_points", 0),
                   sample_events=doc.get("sample_events", 0),
                   sample_seed=doc.get("sample_seed", 0))

    def to_dict(self) -> dict:
        return json.loads(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "PartitionGrid":
        return cls.from_json(json.dumps(doc))


@dataclass
class SerializedEvent:
    """A permutation of an event's point indices plus box assignments."""

    order: np.ndarray          # position -> original point index
    box_of_point: np.ndarray   # per original point index
    box_boundaries: np.ndarray  # start offset of each nonempty box segment


def _quantile_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    inner = np.quantile(values, qs)
    edges = np.concatenate([[0.0], inner, [1.0]])
    # guard against duplicate quantiles on degenerate samples
    for i in range(1, len(edges)):
        if edges[i] <= edges[i - 1]:
            edges[i] = np.nextafter(edges[i - 1], np.inf)
    return edges


def fit_partition(sample_events: list[Event], sample_seed: int = 0) -> PartitionGrid:
    """Frequency-based phi/eta edges from a pooled sample; fixed r edges."""
    coords = [e.coords_normalized() for e in sample_events if len(e) > 0]
    if not coords:
        raise ValueError("empty fitting sample")
    pooled = np.concatenate(coords, axis=0)
    if len(pooled) < MIN_FIT_POINTS:
        raise ValueError(
            f"need at least {MIN_FIT_POINTS} sample points, got {len(pooled)}")
    return PartitionGrid(
        r_edges=_r_edges_normalized(),
        phi_edges=_quantile_edges(pooled[:, 1], N_PHI_BINS),
        eta_edges=_quantile_edges(pooled[:, 2], N_ETA_BINS),
        sample_points=len(pooled),
        sample_events=len(coords),
        sample_seed=sample_seed,
    )


def serialize(event: Event, grid: PartitionGrid) -> SerializedEvent:
    """Deterministic raster-scan ordering; a pure function of the point multiset."""
    n = len(event.points)
    coords = event.coords_normalized()
    box = grid.box_ids(coords) if n else np.zeros(0, dtype=np.int64)
    if n:
        order = np.lexsort((np.arange(n), coords[:, 2], coords[:, 1],
                            coords[:, 0], box))
    else:
        order = np.zeros(0, dtype=np.int64)
    sorted_boxes = box[order]
    boundaries = (np.nonzero(np.diff(sorted_boxes) != 0)[0] + 1 if n else
                  np.zeros(0, dtype=np.int64))
    if n:
        boundaries = np.concatenate([[0], boundaries])
    return SerializedEvent(order=order, box_of_point=box,
                           box_boundaries=np.asarray(boundaries, dtype=np.int64))


def serialize_radial(event: Event) -> SerializedEvent:
    """Baseline: pure radial sort (ties by phi, eta, index), single box."""
    n = len(event.points)
    coords = event.coords_normalized()
    if n:
        order = np.lexsort((np.arange(n), coords[:, 2], coords[:, 1], coords[:, 0]))
    else:
        order = np.zeros(0, dtype=np.int64)
    return SerializedEvent(order=order,
                           box_of_point=np.zeros(n, dtype=np.int64),
                           box_boundaries=np.zeros(1 if n else 0, dtype=np.int64))


def locality_report(serialized: SerializedEvent, event: Event) -> dict:
    """Quantifies how well an ordering keeps tracks contiguous.

    Reports the mean normalized-space distance between sequence-adjacent
    points, the fraction of adjacent pairs that share a truth track, and the
    mean per-track spread of sequence positions (max - min).
    """
    order = serialized.order
    n = len(order)
    if n < 2:
        return {"mean_adjacent_distance": 0.0,
                "same_track_adjacency": 0.0,
                "mean_track_position_spread": 0.0}
    coords = event.coords_normalized()[order]
    dists = np.linalg.norm(np.diff(coords, axis=0), axis=1)
    labels = event.track_labels()[order]
    same = (labels[:-1] == labels[1:]) & (labels[:-1] >= 0)
    position = np.empty(n, dtype=np.int64)
    position[order] = np.arange(n)
    spreads = [float(position[t].max() - position[t].min())
               for t in event.tracks if t]
    return {
        "mean_adjacent_distance": float(dists.mean()),
        "same_track_adjacency": float(same.mean()),
        "mean_track_position_spread": float(np.mean(spreads)) if spreads else 0.0,
    }

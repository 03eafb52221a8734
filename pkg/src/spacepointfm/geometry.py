"""Detector coordinates: Cartesian to cylindrical-polar transforms, min-max
normalization onto [0, 1], and the sine/cosine positional encoding.

Conventions: r and z in cm, phi in (-pi, pi], eta is pseudorapidity. The
normalization ranges are fixed by the detector acceptance: r in [30, 78] cm,
phi in [-pi, pi], eta in [-2, 2].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

R_MIN = 30.0
R_MAX = 78.0
ETA_MIN = -2.0
ETA_MAX = 2.0
PHI_MIN = -math.pi
PHI_MAX = math.pi

NOISE_TRACK_ID = -1


class RangeError(ValueError):
    pass


class PidClass(enum.IntEnum):
    PION = 0
    KAON = 1
    PROTON = 2
    ELECTRON = 3
    OTHER = 4


@dataclass
class SpacePoint:
    """One detector hit: deposited energy, location, and truth labels."""

    energy: float
    x: float
    y: float
    z: float
    r: float
    phi: float
    eta: float
    r_hat: float
    phi_hat: float
    eta_hat: float
    track_id: int = NOISE_TRACK_ID
    pid_class: PidClass = PidClass.OTHER
    is_noise: bool = False

    @classmethod
    def from_cartesian(cls, energy, x, y, z, track_id=NOISE_TRACK_ID,
                       pid_class=PidClass.OTHER, is_noise=False, lenient=True):
        r, phi, eta = to_cylindrical(x, y, z)
        r_hat, phi_hat, eta_hat = normalize(r, phi, eta, lenient=lenient)
        return cls(energy, x, y, z, r, phi, eta, r_hat, phi_hat, eta_hat,
                   track_id=track_id, pid_class=PidClass(pid_class), is_noise=is_noise)


@dataclass
class Event:
    """A variable-size set of spacepoints plus the truth track index lists.

    tracks[j] lists the indices of the j-th truth track's points, sorted by
    ascending r; every non-noise point index appears in exactly one track.
    """

    event_id: int
    points: list[SpacePoint] = field(default_factory=list)
    tracks: list[list[int]] = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def validate(self) -> None:
        seen = set()
        for track in self.tracks:
            if len(track) == 0:
                raise ValueError("empty truth track")
            radii = [self.points[i].r for i in track]
            if any(b < a for a, b in zip(radii, radii[1:])):
                raise ValueError("track point list is not sorted by ascending r")
            for i in track:
                if i in seen:
                    raise ValueError(f"point {i} appears in more than one track")
                seen.add(i)
        for i, p in enumerate(self.points):
            if abs(p.r - math.hypot(p.x, p.y)) > 1e-9 * max(p.r, 1.0):
                raise ValueError(f"point {i}: r inconsistent with (x, y)")
            if p.is_noise:
                if i in seen:
                    raise ValueError(f"noise point {i} appears in a truth track")
            elif i not in seen:
                raise ValueError(f"non-noise point {i} missing from all tracks")

    def coords_normalized(self) -> np.ndarray:
        """(n, 3) array of (r_hat, phi_hat, eta_hat)."""
        return np.array([[p.r_hat, p.phi_hat, p.eta_hat] for p in self.points],
                        dtype=np.float64).reshape(len(self.points), 3)

    def features(self) -> np.ndarray:
        """(n, 4) array of (energy, r_hat, phi_hat, eta_hat), the model input."""
        return np.array(
            [[p.energy, p.r_hat, p.phi_hat, p.eta_hat] for p in self.points],
            dtype=np.float64).reshape(len(self.points), 4)

    def track_labels(self) -> np.ndarray:
        """(n,) truth track index per point, NOISE_TRACK_ID for noise."""
        labels = np.full(len(self.points), NOISE_TRACK_ID, dtype=np.int64)
        for j, track in enumerate(self.tracks):
            labels[track] = j
        return labels


def to_cylindrical(x, y, z):
    """(x, y, z) -> (r, phi, eta); undefined on the beam axis."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    r = np.sqrt(x * x + y * y)
    if np.any(r == 0.0):
        raise RangeError("phi is undefined at x = y = 0")
    phi = np.arctan2(y, x)
    theta = np.arctan2(r, z)
    eta = -np.log(np.tan(theta / 2.0))
    if x.ndim == 0:
        return float(r), float(phi), float(eta)
    return r, phi, eta


def _affine(v, lo, hi):
    return (np.asarray(v, dtype=np.float64) - lo) / (hi - lo)


def normalize(r, phi, eta, lenient=False):
    """Min-max map (r, phi, eta) onto [0, 1]^3.

    Out-of-range input raises in strict mode; lenient mode clamps to the
    boundary instead.
    """
    scalar = np.asarray(r).ndim == 0
    triples = [
        (np.asarray(r, dtype=np.float64), R_MIN, R_MAX, "r"),
        (np.asarray(phi, dtype=np.float64), PHI_MIN, PHI_MAX, "phi"),
        (np.asarray(eta, dtype=np.float64), ETA_MIN, ETA_MAX, "eta"),
    ]
    out = []
    for v, lo, hi, name in triples:
        if lenient:
            v = np.clip(v, lo, hi)
        elif np.any((v < lo) | (v > hi)):
            raise RangeError(f"{name} outside [{lo}, {hi}]")
        out.append(_affine(v, lo, hi))
    if scalar:
        return float(out[0]), float(out[1]), float(out[2])
    return tuple(out)


def denormalize(r_hat, phi_hat, eta_hat):
    """Inverse of normalize."""
    r = np.asarray(r_hat, dtype=np.float64) * (R_MAX - R_MIN) + R_MIN
    phi = np.asarray(phi_hat, dtype=np.float64) * (PHI_MAX - PHI_MIN) + PHI_MIN
    eta = np.asarray(eta_hat, dtype=np.float64) * (ETA_MAX - ETA_MIN) + ETA_MIN
    if np.asarray(r_hat).ndim == 0:
        return float(r), float(phi), float(eta)
    return r, phi, eta


def positional_encoding(p, levels: int) -> np.ndarray:
    """gamma(p) = (p, sin(2p), cos(2p), ..., sin(2^L p), cos(2^L p)) elementwise.

    p is one or more normalized coordinate triples; output dimension is
    3 * (1 + 2 * levels).
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    flat = p.reshape(-1, p.shape[-1])
    parts = [flat]
    for level in range(1, levels + 1):
        scaled = (2.0 ** level) * flat
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    out = np.concatenate(parts, axis=-1)
    return out[0] if single else out.reshape(p.shape[:-1] + (out.shape[-1],))


def encoding_dim(levels: int, n_coords: int = 3) -> int:
    return n_coords * (1 + 2 * levels)

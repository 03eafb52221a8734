"""Synthetic labeled collision events: helical charged tracks through a
48-layer cylindrical TPC plus low-momentum looper noise.

Charged particles in the axial field follow circular arcs in the transverse
plane; each track contributes one hit at its first crossing of every layer
it reaches. Hits are smeared in r*phi and z, carry a per-class long-tailed
energy deposit, and points drifting outside the eta acceptance are dropped.
Noise comes from sub-60-MeV/c secondaries spawned inside the gas volume,
which curl tightly and pepper a narrow radial band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ETA_MAX,
    ETA_MIN,
    NOISE_TRACK_ID,
    Event,
    PidClass,
    SpacePoint,
)

NOISE_MOMENTUM_CUTOFF = 0.060  # GeV/c; softer secondaries are labeled noise


def _group_radii(lo: float, hi: float, n: int) -> list[float]:
    # midpoints of n uniform sub-intervals, so no layer sits on a group edge
    step = (hi - lo) / n
    return [lo + step * (i + 0.5) for i in range(n)]


@dataclass
class DetectorConfig:
    b_field: float = 1.4                      # tesla
    r_min: float = 30.0                       # cm
    r_max: float = 78.0
    layers_per_group: int = 16
    group_edges: tuple = (30.0, 46.0, 62.0, 78.0)
    eta_acceptance: tuple = (ETA_MIN, ETA_MAX)
    sigma_rphi: float = 0.02                  # cm, along the pad row
    sigma_z: float = 0.05                     # cm

    def __post_init__(self):
        radii = []
        for lo, hi in zip(self.group_edges[:-1], self.group_edges[1:]):
            radii.extend(_group_radii(lo, hi, self.layers_per_group))
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("layer radii must be strictly increasing")
        if radii[0] < self.r_min or radii[-1] > self.r_max:
            raise ValueError("layer radii must lie within [r_min, r_max]")
        self.layer_radii = np.array(radii)

    @property
    def n_layers(self) -> int:
        return len(self.layer_radii)


# per-class Moyal (location, scale) for the energy deposit, arbitrary units
ENERGY_PARAMS = {
    PidClass.PION: (1.00, 0.22),
    PidClass.KAON: (1.35, 0.28),
    PidClass.PROTON: (1.70, 0.32),
    PidClass.ELECTRON: (0.72, 0.18),
    PidClass.OTHER: (1.10, 0.30),
}
NOISE_ENERGY_PARAMS = (0.50, 0.15)


@dataclass
class GenParams:
    seed: int = 0
    multiplicity_mean: float = 12.0
    multiplicity_shape: float = 1.0           # negative-binomial n
    multiplicity_range: tuple = (1, 100)
    pt_mean: float = 0.6                      # GeV/c, exponential tail
    pt_min: float = 0.1
    noise_fraction: float = 0.08              # target fraction of points
    pid_probs: tuple = (0.70, 0.07, 0.07, 0.05, 0.11)
    vertex_sigma_xy: float = 0.01             # cm
    vertex_sigma_z: float = 5.0
    noise_momentum_range: tuple = (0.010, 0.059)
    noise_points_range: tuple = (2, 8)

    def __post_init__(self):
        if abs(sum(self.pid_probs) - 1.0) > 1e-9:
            raise ValueError("pid class probabilities must sum to 1")
        lo, hi = self.multiplicity_range
        if not (1 <= lo <= hi <= 100):
            raise ValueError("multiplicity support must lie within [1, 100]")


@dataclass
class TruthParticle:
    pt: float
    eta: float
    phi0: float
    charge: int
    vertex: tuple
    pid_class: PidClass

    @property
    def momentum(self) -> float:
        return self.pt * math.cosh(self.eta)


def helix_radius(pt: float, b_field: float) -> float:
    """Transverse bending radius in cm for unit charge: 100 * pT / (0.3 * B)."""
    if pt <= 0 or b_field <= 0:
        raise ValueError("pt and b_field must be positive")
    return 100.0 * pt / (0.3 * b_field)


def moyal_sample(rng, size=None):
    """Moyal variate: -ln(Z^2) for standard normal Z (a Landau-like tail)."""
    z = rng.standard_normal(size)
    return -np.log(z * z)


def _draw_energies(rng, pid_class, n, is_noise=False):
    loc, scl = NOISE_ENERGY_PARAMS if is_noise else ENERGY_PARAMS[PidClass(pid_class)]
    return np.maximum(loc + scl * moyal_sample(rng, n), 1e-3)


def _first_crossings(cx, cy, radius, alpha0, turn_sign, layer_radii):
    """First crossing angle of each reachable layer circle, scanning outward.

    The trajectory is c + radius * (cos a, sin a) with a = alpha0 + turn_sign * s / radius.
    Returns (layer_indices, arc_lengths, angles) sorted by arc length.
    """
    empty = (np.array([], dtype=np.int64), np.array([]), np.array([]))
    d = math.hypot(cx, cy)
    if d < 1e-9:
        return empty
    beta = math.atan2(cy, cx)
    cosarg = (layer_radii ** 2 - d * d - radius * radius) / (2.0 * radius * d)
    ok = np.abs(cosarg) <= 1.0
    if not ok.any():
        return empty
    gamma = np.arccos(cosarg[ok])
    cands = np.stack([beta + gamma, beta - gamma], axis=1)
    delta = (turn_sign * (cands - alpha0)) % (2.0 * math.pi)
    pick = delta.argmin(axis=1)
    rows = np.arange(len(gamma))
    s = delta[rows, pick] * radius
    alpha = cands[rows, pick]
    order = np.argsort(s, kind="stable")
    return np.nonzero(ok)[0][order], s[order], alpha[order]


def _make_points(det, rng, layer_idx, s, alpha, cx, cy, radius, vz, dz_ds,
                 pid_class, track_id, is_noise):
    """Smear crossings, apply the eta acceptance, and build spacepoints."""
    n = len(layer_idx)
    if n == 0:
        return []
    rho = det.layer_radii[layer_idx]
    x = cx + radius * np.cos(alpha)
    y = cy + radius * np.sin(alpha)
    z = vz + s * dz_ds + rng.normal(0.0, det.sigma_z, n)
    phi = np.arctan2(y, x)
    if det.sigma_rphi > 0:
        phi = phi + rng.normal(0.0, det.sigma_rphi, n) / rho
    x = rho * np.cos(phi)
    y = rho * np.sin(phi)
    phi = np.arctan2(y, x)
    eta = np.arcsinh(z / rho)
    lo, hi = det.eta_acceptance
    keep = (eta >= lo) & (eta <= hi)
    energy = _draw_energies(rng, pid_class, n, is_noise=is_noise)
    r_hat = (rho - 30.0) / 48.0
    phi_hat = (phi + math.pi) / (2.0 * math.pi)
    eta_hat = (eta - ETA_MIN) / (ETA_MAX - ETA_MIN)
    points = []
    for i in range(n):
        if not keep[i]:
            continue
        points.append(SpacePoint(
            float(energy[i]), float(x[i]), float(y[i]), float(z[i]),
            float(rho[i]), float(phi[i]), float(eta[i]),
            float(r_hat[i]), float(phi_hat[i]), float(eta_hat[i]),
            track_id=track_id, pid_class=PidClass(pid_class),
            is_noise=is_noise))
    return points


def _helix_setup(particle: TruthParticle, b_field: float):
    radius = helix_radius(particle.pt, b_field)
    q = particle.charge
    vx, vy, vz = particle.vertex
    psi = particle.phi0 - q * (math.pi / 2.0)
    cx = vx + radius * math.cos(psi)
    cy = vy + radius * math.sin(psi)
    alpha0 = psi + math.pi
    return radius, cx, cy, alpha0, -q, vz


def propagate_track(particle: TruthParticle, det: DetectorConfig, rng,
                    track_id: int) -> list[SpacePoint]:
    """Spacepoints at the first helix crossing of each reachable layer.

    Returns an empty list when the helix never reaches the innermost layer;
    callers drop tracks with fewer than 3 surviving points.
    """
    radius, cx, cy, alpha0, sign, vz = _helix_setup(particle, det.b_field)
    dz_ds = math.sinh(particle.eta)
    layer_idx, s, alpha = _first_crossings(cx, cy, radius, alpha0, sign,
                                           det.layer_radii)
    points = _make_points(det, rng, layer_idx, s, alpha, cx, cy, radius, vz,
                          dz_ds, particle.pid_class, track_id, is_noise=False)
    points.sort(key=lambda p: p.r)
    return points


def _draw_particle(rng, params: GenParams) -> TruthParticle:
    pt = params.pt_min + rng.exponential(params.pt_mean)
    eta = rng.uniform(ETA_MIN, ETA_MAX)
    phi0 = rng.uniform(-math.pi, math.pi)
    charge = 1 if rng.random() < 0.5 else -1
    vertex = (rng.normal(0.0, params.vertex_sigma_xy),
              rng.normal(0.0, params.vertex_sigma_xy),
              rng.normal(0.0, params.vertex_sigma_z))
    pid = PidClass(int(rng.choice(len(params.pid_probs), p=params.pid_probs)))
    return TruthParticle(pt, eta, phi0, charge, vertex, pid)


def _draw_multiplicity(rng, params: GenParams) -> int:
    lo, hi = params.multiplicity_range
    n = params.multiplicity_shape
    p = n / (n + params.multiplicity_mean)
    for _ in range(1000):
        m = int(rng.negative_binomial(n, p))
        if lo <= m <= hi:
            return m
    return lo


def generate_noise(det: DetectorConfig, params: GenParams, rng,
                   n_points: int) -> list[SpacePoint]:
    """Tightly curled looper hits, trimmed to exactly n_points."""
    points: list[SpacePoint] = []
    attempts = 0
    while len(points) < n_points and attempts < 60 * (n_points + 1):
        attempts += 1
        p_tot = rng.uniform(*params.noise_momentum_range)
        costh = rng.uniform(-1.0, 1.0)
        sinth = math.sqrt(1.0 - costh * costh)
        pt = max(p_tot * sinth, 1e-4)
        eta_m = math.asinh(costh / max(sinth, 1e-6))
        phi_m = rng.uniform(-math.pi, math.pi)
        r0 = math.sqrt(rng.uniform(det.r_min ** 2, det.r_max ** 2))
        phi_s = rng.uniform(-math.pi, math.pi)
        z_cap = r0 * math.sinh(ETA_MAX) * 0.9
        z0 = rng.uniform(-z_cap, z_cap)
        origin = (r0 * math.cos(phi_s), r0 * math.sin(phi_s), z0)
        particle = TruthParticle(pt, eta_m, phi_m,
                                 1 if rng.random() < 0.5 else -1,
                                 origin, PidClass.OTHER)
        radius, cx, cy, alpha0, sign, vz = _helix_setup(particle, det.b_field)
        dz_ds = math.sinh(eta_m)
        n_here = int(rng.integers(*params.noise_points_range, endpoint=True))
        layer_idx, s, alpha = _first_crossings(cx, cy, radius, alpha0, sign,
                                               det.layer_radii)
        points.extend(_make_points(
            det, rng, layer_idx[:n_here], s[:n_here], alpha[:n_here],
            cx, cy, radius, vz, dz_ds, PidClass.OTHER, NOISE_TRACK_ID,
            is_noise=True))
    return points[:n_points]


def event_rng(seed: int, event_id: int) -> np.random.Generator:
    """Independent per-event stream, so any event set generates identically."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(event_id,)))


def generate_event(event_id: int, det: DetectorConfig, params: GenParams,
                   rng=None) -> Event:
    """One event, fully determined by (params.seed, event_id)."""
    if rng is None:
        rng = event_rng(params.seed, event_id)
    m = _draw_multiplicity(rng, params)
    points: list[SpacePoint] = []
    tracks: list[list[int]] = []
    attempts = 0
    while len(tracks) < m and attempts < 20 * m + 100:
        attempts += 1
        particle = _draw_particle(rng, params)
        track_points = propagate_track(particle, det, rng, track_id=len(tracks))
        if len(track_points) < 3:
            continue
        start = len(points)
        points.extend(track_points)
        tracks.append(list(range(start, start + len(track_points))))
    if params.noise_fraction > 0 and points:
        f = params.noise_fraction
        n_target = int(rng.poisson(f / (1.0 - f) * len(points)))
        points.extend(generate_noise(det, params, rng, n_target))
    return Event(event_id=event_id, points=points, tracks=tracks)


def generate_events(n_events: int, det: DetectorConfig, params: GenParams,
                    start_id: int = 0):
    for event_id in range(start_id, start_id + n_events):
        yield generate_event(event_id, det, params)

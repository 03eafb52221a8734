"""Streaming JSON-Lines event files.

One event per line: {"event_id": int, "points": [{"e", "x", "y", "z",
"track", "pid", "noise"}, ...]} with coordinates in cm and "track" null
exactly when "noise" is true. Files ending in .gz are handled transparently.
"""

from __future__ import annotations

import gzip
import hashlib
import json
from dataclasses import dataclass

from .geometry import NOISE_TRACK_ID, Event, PidClass, SpacePoint


def _open(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def event_to_json(event: Event) -> str:
    points = []
    for p in event.points:
        points.append({
            "e": p.energy, "x": p.x, "y": p.y, "z": p.z,
            "track": None if p.is_noise else int(p.track_id),
            "pid": int(p.pid_class), "noise": bool(p.is_noise),
        })
    return json.dumps({"event_id": event.event_id, "points": points},
                      separators=(",", ":"))


def event_from_json(line: str) -> Event:
    doc = json.loads(line)
    points = []
    by_track: dict[int, list[int]] = {}
    for i, q in enumerate(doc["points"]):
        noise = bool(q["noise"])
        track = q["track"]
        if noise != (track is None):
            raise ValueError(f"event {doc['event_id']}: 'track' must be null iff 'noise'")
        sp = SpacePoint.from_cartesian(
            q["e"], q["x"], q["y"], q["z"],
            track_id=NOISE_TRACK_ID if noise else int(track),
            pid_class=PidClass(q["pid"]), is_noise=noise, lenient=True)
        points.append(sp)
        if not noise:
            by_track.setdefault(int(track), []).append(i)
    tracks = []
    for tid in sorted(by_track):
        idx = sorted(by_track[tid], key=lambda i: (points[i].r, i))
        tracks.append(idx)
    # remap track ids to dense positions so Event.tracks indexes line up
    for j, idx in enumerate(tracks):
        for i in idx:
            points[i].track_id = j
    return Event(event_id=int(doc["event_id"]), points=points, tracks=tracks)


def iter_events(path):
    """Yield events one line at a time; never holds more than one in memory."""
    with _open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield event_from_json(line)


def read_events(path, limit=None) -> list[Event]:
    out = []
    for event in iter_events(path):
        out.append(event)
        if limit is not None and len(out) >= limit:
            break
    return out


@dataclass
class CorpusStats:
    events: int = 0
    total_points: int = 0
    noise_points: int = 0
    total_tracks: int = 0
    pid_counts: tuple = (0, 0, 0, 0, 0)
    sha256: str = ""


def write_events(path, events) -> CorpusStats:
    """Write events as JSONL, hashing the byte stream for the manifest."""
    digest = hashlib.sha256()
    stats = CorpusStats()
    pid_counts = [0] * len(PidClass)
    with _open(path, "w") as fh:
        for event in events:
            line = event_to_json(event) + "\n"
            fh.write(line)
            digest.update(line.encode("utf-8"))
            stats.events += 1
            stats.total_points += len(event.points)
            stats.total_tracks += len(event.tracks)
            for p in event.points:
                if p.is_noise:
                    stats.noise_points += 1
                pid_counts[int(p.pid_class)] += 1
    stats.pid_counts = tuple(pid_counts)
    stats.sha256 = digest.hexdigest()
    return stats


def manifest_dict(stats: CorpusStats, seed: int) -> dict:
    return {
        "seed": seed,
        "events": stats.events,
        "total_points": stats.total_points,
        "noise_points": stats.noise_points,
        "total_tracks": stats.total_tracks,
        "pid_counts": list(stats.pid_counts),
        "noise_fraction": (stats.noise_points / stats.total_points
                           if stats.total_points else 0.0),
        "sha256": stats.sha256,
    }

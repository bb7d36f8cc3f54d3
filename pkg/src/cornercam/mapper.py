"""Accumulate per-frame occluded-region estimates into a map of the hidden scene."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyInput
from .geometry import EdgeSpec


@dataclass
class MapSegment:
    """Vertical centerline of one occluded region."""

    x: float
    y: float
    height: float
    frame: int
    track: int
    azimuth: float


@dataclass
class MapPanel:
    """Planar panel joining consecutive centerlines of a track."""

    p1: tuple[float, float]
    p2: tuple[float, float]
    height: float
    frame: int
    track: int


@dataclass
class HiddenMap:
    segments: list[MapSegment]
    panels: list[MapPanel]

    def to_dict(self) -> dict:
        return {"segments": [asdict(s) for s in self.segments], "panels": [asdict(p) for p in self.panels]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        """One row per polyline vertex: track, order, x, y, height, frame."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["track", "order", "x", "y", "height", "frame"])
            for track in sorted({s.track for s in self.segments}):
                segs = [s for s in self.segments if s.track == track]
                for i, s in enumerate(segs):
                    w.writerow([track, i, f"{s.x:.6f}", f"{s.y:.6f}", f"{s.height:.6f}", s.frame])


def _entries(estimate):
    """(theta_mid, centerline point height inputs) per object of a frame estimate."""
    out = []
    for fg, oc in zip(estimate.foreground, estimate.occluded):
        mid = 0.5 * (fg["theta_min"] + fg["theta_max"])
        height = fg["height"] * oc["range"] / fg["range"]
        out.append((mid, oc["range"], height))
    return out


def accumulate_map(estimates, edge: EdgeSpec | None = None) -> HiddenMap:
    """Centerlines at each occluded region's range along its facet's mid azimuth.

    Occluded-region height scales the facet height by ``r_oc / r_fg``.
    Objects in a frame are matched to existing tracks by nearest azimuth;
    unmatched objects open new tracks. Each panel takes the height of the
    earlier of the two centerlines it joins.
    """
    edge = edge or EdgeSpec()
    if not estimates:
        raise EmptyInput("no frame estimates to map")
    segments: list[MapSegment] = []
    last: dict[int, float] = {}  # track -> latest azimuth
    for frame_index, est in enumerate(estimates):
        entries = _entries(est)
        if not entries:
            continue
        tracks = list(last)
        assignment: dict[int, int] = {}
        if tracks:
            cost = np.abs(np.array([[e[0] - last[t] for t in tracks] for e in entries]))
            rows, cols = linear_sum_assignment(cost)
            assignment = {int(r): tracks[c] for r, c in zip(rows, cols)}
        for i, (mid, r_oc, height) in enumerate(entries):
            track = assignment.get(i, max(last, default=-1) + 1)
            p = edge.base + r_oc * edge.direction(mid)
            segments.append(MapSegment(float(p[0]), float(p[1]), float(height), frame_index, track, float(mid)))
            last[track] = mid
    if not segments:
        raise EmptyInput("no frame contains an occluded-region estimate")
    panels = []
    for track in sorted({s.track for s in segments}):
        segs = [s for s in segments if s.track == track]
        for a, b in zip(segs, segs[1:]):
            panels.append(MapPanel((a.x, a.y), (b.x, b.y), a.height, a.frame, track))
    return HiddenMap(segments, panels)


def load_map(path) -> HiddenMap:
    d = json.loads(Path(path).read_text())
    segs = [MapSegment(**s) for s in d["segments"]]
    panels = [MapPanel(tuple(p["p1"]), tuple(p["p2"]), p["height"], p["frame"], p["track"]) for p in d["panels"]]
    return HiddenMap(segs, panels)

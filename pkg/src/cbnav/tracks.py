"""Closed-loop centerline tracks for the 2-D racing simulator.

A track is a closed polyline (first point == last point) with a constant
corridor half-width. The shipped `playground` track is a rounded
rectangle with a gentle S-chicane on each long straight, generated
deterministically and frozen as versioned CSV package data.
"""

from __future__ import annotations

import csv
import io
from importlib import resources
from pathlib import Path

import numpy as np

PLAYGROUND_CSV = "playground_v1.csv"


class TrackError(ValueError):
    pass


class Track:
    """Closed centerline polyline with projection utilities.

    Immutable after construction; safe to share across threads.
    """

    def __init__(self, centerline, half_width: float = 1.0, name: str = "track"):
        pts = np.asarray(centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
            raise TrackError(f"centerline must be (N>=4, 2), got {pts.shape}")
        if not np.allclose(pts[0], pts[-1], atol=1e-9):
            raise TrackError("centerline must be a closed loop (first == last)")
        if half_width <= 0:
            raise TrackError("half_width must be positive")
        seg_vec = np.diff(pts, axis=0)
        seg_len = np.hypot(seg_vec[:, 0], seg_vec[:, 1])
        if np.any(seg_len < 1e-9):
            raise TrackError("degenerate (zero-length) centerline segment")
        self.name = name
        self.centerline = pts
        self.half_width = float(half_width)
        self._seg_start = pts[:-1]
        self._seg_vec = seg_vec
        self._seg_len = seg_len
        self._seg_dir = seg_vec / seg_len[:, None]
        self._seg_angle = np.arctan2(seg_vec[:, 1], seg_vec[:, 0])
        self._cum_len = np.concatenate(([0.0], np.cumsum(seg_len)))
        self.length = float(self._cum_len[-1])

    def project(self, points: np.ndarray):
        """Project world points onto the centerline.

        Args:
            points: (K, 2) array of positions.
        Returns:
            arc: (K,) arclength of the nearest centerline point.
            lateral: (K,) signed offset, positive to the left of travel.
            tangent_angle: (K,) direction of the nearest segment.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = p[:, None, :] - self._seg_start[None, :, :]  # (K, S, 2)
        t = np.einsum("ksj,sj->ks", rel, self._seg_vec) / (self._seg_len**2)
        t = np.clip(t, 0.0, 1.0)
        closest = self._seg_start[None] + t[:, :, None] * self._seg_vec[None]
        diff = p[:, None, :] - closest
        d2 = np.einsum("ksj,ksj->ks", diff, diff)
        idx = np.argmin(d2, axis=1)
        k = np.arange(p.shape[0])
        ti = t[k, idx]
        off = diff[k, idx]
        dirs = self._seg_dir[idx]
        lateral = dirs[:, 0] * off[:, 1] - dirs[:, 1] * off[:, 0]
        arc = self._cum_len[idx] + ti * self._seg_len[idx]
        return arc, lateral, self._seg_angle[idx]

    def point_at(self, arc: float) -> np.ndarray:
        """Centerline point at a given arclength (wrapped)."""
        s = float(arc) % self.length
        i = int(np.searchsorted(self._cum_len, s, side="right")) - 1
        i = min(i, len(self._seg_len) - 1)
        frac = (s - self._cum_len[i]) / self._seg_len[i]
        return self._seg_start[i] + frac * self._seg_vec[i]

    def tangent_at(self, arc: float) -> float:
        s = float(arc) % self.length
        i = int(np.searchsorted(self._cum_len, s, side="right")) - 1
        i = min(i, len(self._seg_len) - 1)
        return float(self._seg_angle[i])

    def curvature_radius_min(self) -> float:
        """Smallest turning radius along the polyline (vertex estimate)."""
        d = self._seg_dir
        turn = np.abs(
            np.arctan2(
                d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0],
                np.einsum("ij,ij->i", d[:-1], d[1:]),
            )
        )
        step = 0.5 * (self._seg_len[:-1] + self._seg_len[1:])
        kappa = turn / step
        kmax = float(kappa.max()) if kappa.size else 0.0
        return 1.0 / kmax if kmax > 0 else np.inf


def save_track_csv(track: Track, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in track.centerline:
            w.writerow([f"{x:.9f}", f"{y:.9f}"])


def load_track_csv(path, half_width: float = 1.0, name: str | None = None) -> Track:
    path = Path(path)
    with open(path, newline="") as fh:
        return _parse_track_csv(fh, half_width, name or path.stem)


def _parse_track_csv(fh, half_width: float, name: str) -> Track:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:2]] != ["x", "y"]:
        raise TrackError("track CSV must start with header 'x,y'")
    pts = []
    for row in reader:
        if not row:
            continue
        try:
            pts.append((float(row[0]), float(row[1])))
        except (ValueError, IndexError):
            raise TrackError(f"bad track CSV row: {row!r}")
    return Track(np.array(pts), half_width=half_width, name=name)


def _rounded_rect_path(width, height, corner_r, step):
    """Perimeter samples of a rounded rectangle, counterclockwise from
    the bottom-left straight start."""
    w2, h2 = width / 2.0, height / 2.0
    sx = width - 2 * corner_r
    sy = height - 2 * corner_r
    pieces = []

    def straight(p0, p1):
        p0, p1 = np.asarray(p0), np.asarray(p1)
        n = max(2, int(np.ceil(np.hypot(*(p1 - p0)) / step)) + 1)
        t = np.linspace(0.0, 1.0, n)[:-1]
        pieces.append(p0 + t[:, None] * (p1 - p0))

    def arc(center, a0, a1):
        n = max(2, int(np.ceil(abs(a1 - a0) * corner_r / step)) + 1)
        a = np.linspace(a0, a1, n)[:-1]
        pieces.append(
            np.stack([center[0] + corner_r * np.cos(a), center[1] + corner_r * np.sin(a)], axis=1)
        )

    straight((-sx / 2, -h2), (sx / 2, -h2))
    arc((sx / 2, -h2 + corner_r), -np.pi / 2, 0.0)
    straight((w2, -sy / 2), (w2, sy / 2))
    arc((sx / 2, h2 - corner_r), 0.0, np.pi / 2)
    straight((sx / 2, h2), (-sx / 2, h2))
    arc((-sx / 2, h2 - corner_r), np.pi / 2, np.pi)
    straight((-w2, sy / 2), (-w2, -sy / 2))
    arc((-sx / 2, -h2 + corner_r), np.pi, 3 * np.pi / 2)
    return np.concatenate(pieces, axis=0)


def _chicane_profile(u: np.ndarray, amplitude: float) -> np.ndarray:
    # zero value and zero slope at both window ends
    return amplitude * np.sin(2 * np.pi * u) * 0.5 * (1 - np.cos(2 * np.pi * u))


def make_playground(step: float = 0.2) -> Track:
    """Deterministic playground loop: rounded rectangle, two S-chicanes."""
    width, height, corner_r = 18.0, 10.0, 2.5
    amp, window = 0.65, 11.0
    pts = _rounded_rect_path(width, height, corner_r, step)
    sx = width - 2 * corner_r
    for y0, sign in ((-height / 2, 1.0), (height / 2, -1.0)):
        on = (np.abs(pts[:, 1] - y0) < 1e-6) & (np.abs(pts[:, 0]) <= sx / 2 + 1e-9)
        x = pts[on, 0] * -sign  # travel direction along this straight
        u = (x + window / 2) / window
        inside = (u >= 0.0) & (u <= 1.0)
        bump = np.zeros_like(x)
        bump[inside] = _chicane_profile(u[inside], amp)
        pts[on, 1] += sign * bump
    pts = np.vstack([pts, pts[:1]])
    return Track(pts, half_width=1.0, name="playground")


def _packaged_track(filename: str, name: str) -> Track:
    data = resources.files("cbnav").joinpath("data").joinpath(filename).read_text()
    return _parse_track_csv(io.StringIO(data), half_width=1.0, name=name)


def builtin_tracks() -> dict[str, Track]:
    """Named, validated tracks shipped with the package."""
    return {"playground": _packaged_track(PLAYGROUND_CSV, "playground")}

"""Occupancy-grid vehicle simulator with a 720-beam planar range sensor.

Beam k leaves at heading + (k * 0.5deg - 180deg); each beam reports the
sensor-frame x, y of its first wall hit (clamped to max range when
nothing is hit). Raycasting walks grid cells with the Amanatides-Woo
DDA traversal, vectorized across all beams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridmap import OccupancyGrid
from .sim_f110 import wrap_angle

N_BEAMS = 720
BEAM_STEP_DEG = 0.5
STEER_LIMIT_MUSHR = 0.34

_REL_ANGLES = np.deg2rad(np.arange(N_BEAMS) * BEAM_STEP_DEG - 180.0)


class RaycastError(RuntimeError):
    pass


@dataclass(frozen=True)
class MushrParams:
    speed: float = 1.0
    wheelbase: float = 0.3
    dt: float = 0.1
    max_range: float = 10.0
    collision_radius: float = 0.2


@dataclass(frozen=True)
class PoseMushr:
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class LidarScan:
    points: np.ndarray       # (720, 2) sensor-frame hit coordinates
    distances: np.ndarray    # (720,) range per beam

    def min_distance(self) -> float:
        return float(self.distances.min())

    def as_obs(self) -> np.ndarray:
        return self.points.astype(np.float32).reshape(-1)


@dataclass(frozen=True)
class MushrStepResult:
    pose: PoseMushr
    scan: LidarScan
    crashed: bool
    steer_clipped: bool


def raycast(grid: OccupancyGrid, pose: PoseMushr, max_range: float = 10.0) -> LidarScan:
    """First-hit scan for all 720 beams from a free-cell pose."""
    if grid.is_occupied_world(pose.x, pose.y):
        raise RaycastError(f"raycast pose ({pose.x:.2f}, {pose.y:.2f}) is in an occupied cell")
    angles = pose.heading + _REL_ANGLES
    dists = _trace(grid, pose.x, pose.y, np.cos(angles), np.sin(angles), max_range)
    points = dists[:, None] * np.stack([np.cos(_REL_ANGLES), np.sin(_REL_ANGLES)], axis=1)
    return LidarScan(points, dists)


def _trace(grid, px, py, dirx, diry, max_range):
    """Vectorized grid DDA: distance to the first occupied cell per ray."""
    res = grid.resolution
    ox, oy = grid.origin
    n = dirx.shape[0]

    col = np.full(n, int(np.floor((px - ox) / res)))
    row = np.full(n, int(np.floor((py - oy) / res)))
    step_c = np.where(dirx >= 0, 1, -1)
    step_r = np.where(diry >= 0, 1, -1)

    with np.errstate(divide="ignore"):
        t_delta_x = np.abs(res / dirx)
        t_delta_y = np.abs(res / diry)
        next_cx = ox + (col + (step_c > 0)) * res
        next_cy = oy + (row + (step_r > 0)) * res
        t_max_x = (next_cx - px) / dirx
        t_max_y = (next_cy - py) / diry
    t_max_x = np.where(np.isfinite(t_max_x), t_max_x, np.inf)
    t_max_y = np.where(np.isfinite(t_max_y), t_max_y, np.inf)

    dist = np.full(n, max_range)
    active = np.ones(n, dtype=bool)
    h, w = grid.height, grid.width
    occ = grid.occupied

    while active.any():
        use_x = t_max_x <= t_max_y
        t_cross = np.where(use_x, t_max_x, t_max_y)
        col = np.where(active & use_x, col + step_c, col)
        row = np.where(active & ~use_x, row + step_r, row)
        t_max_x = np.where(active & use_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(active & ~use_x, t_max_y + t_delta_y, t_max_y)

        beyond = active & (t_cross >= max_range)
        active &= ~beyond

        inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
        hit = active & inside & occ[np.clip(row, 0, h - 1), np.clip(col, 0, w - 1)]
        dist[hit] = t_cross[hit]
        active &= ~hit
        active &= inside  # leaving the grid ends the ray at max_range

    return dist


def mushr_step(
    pose: PoseMushr,
    steer: float,
    grid: OccupancyGrid,
    params: MushrParams = MushrParams(),
) -> MushrStepResult:
    """Kinematic-bicycle step, then scan; crash on contact or close wall."""
    if not np.isfinite([pose.x, pose.y, pose.heading]).all():
        raise RaycastError("non-finite pose")
    clipped = abs(steer) > STEER_LIMIT_MUSHR
    s = float(np.clip(steer, -STEER_LIMIT_MUSHR, STEER_LIMIT_MUSHR))
    heading = wrap_angle(
        pose.heading + (params.speed / params.wheelbase) * np.tan(s) * params.dt
    )
    step = params.speed * params.dt
    nxt = PoseMushr(
        float(pose.x + step * np.cos(heading)),
        float(pose.y + step * np.sin(heading)),
        float(heading),
    )
    if grid.is_occupied_world(nxt.x, nxt.y):
        empty = LidarScan(np.zeros((N_BEAMS, 2)), np.zeros(N_BEAMS))
        return MushrStepResult(nxt, empty, True, clipped)
    scan = raycast(grid, nxt, params.max_range)
    crashed = scan.min_distance() < params.collision_radius
    return MushrStepResult(nxt, scan, crashed, clipped)

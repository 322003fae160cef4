"""2-D centerline racetrack simulator.

Constant-speed kinematic bicycle on a closed track; the agent observes
its signed distance to the centerline and its heading error, and steers
within [-1, 1] rad. A run crashes when |lateral offset| exceeds the
corridor half-width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tracks import Track, builtin_tracks

STEER_LIMIT = 1.0


class SimError(RuntimeError):
    pass


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - (np.pi - a) % (2.0 * np.pi)


@dataclass(frozen=True)
class F1Params:
    speed: float = 1.0       # m/s, constant
    wheelbase: float = 0.3   # m
    dt: float = 0.05         # s


@dataclass(frozen=True)
class CarStateF1:
    x: float
    y: float
    heading: float           # rad, (-pi, pi]
    arc_progress: float      # m along centerline

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ObsF1:
    lateral_offset: float    # m, positive left of travel
    rel_angle: float         # rad, heading minus centerline tangent

    def as_array(self) -> np.ndarray:
        return np.array([self.lateral_offset, self.rel_angle], dtype=np.float32)


@dataclass(frozen=True)
class F1StepResult:
    state: CarStateF1
    obs: ObsF1
    crashed: bool
    steer_clipped: bool


def f1_observe(state: CarStateF1, track: Track) -> ObsF1:
    """Signed centerline offset and wrapped heading error."""
    arc, lat, tang = track.project(np.array([[state.x, state.y]]))
    return ObsF1(float(lat[0]), float(wrap_angle(state.heading - tang[0])))


def f1_state(track: Track, x: float, y: float, heading: float) -> CarStateF1:
    arc, _, _ = track.project(np.array([[x, y]]))
    return CarStateF1(float(x), float(y), float(wrap_angle(heading)), float(arc[0]))


def f1_step(
    state: CarStateF1, steer: float, track: Track, params: F1Params = F1Params()
) -> F1StepResult:
    """Advance one step: heading update first, then displacement.

    heading += (speed / wheelbase) * tan(steer) * dt
    position += speed * dt * (cos heading, sin heading)
    """
    if not np.isfinite([state.x, state.y, state.heading]).all():
        raise SimError("non-finite car state")
    clipped = abs(steer) > STEER_LIMIT
    s = float(np.clip(steer, -STEER_LIMIT, STEER_LIMIT))
    heading = wrap_angle(
        state.heading + (params.speed / params.wheelbase) * np.tan(s) * params.dt
    )
    step = params.speed * params.dt
    x = state.x + step * np.cos(heading)
    y = state.y + step * np.sin(heading)
    arc, lat, tang = track.project(np.array([[x, y]]))
    obs = ObsF1(float(lat[0]), float(wrap_angle(heading - tang[0])))
    nxt = CarStateF1(float(x), float(y), float(heading), float(arc[0]))
    return F1StepResult(nxt, obs, abs(obs.lateral_offset) > track.half_width, clipped)


def f1_tracks() -> dict[str, Track]:
    return builtin_tracks()


# --- vectorized kernels used by the search-based expert -------------------


def f1_step_batch(states: np.ndarray, steers: np.ndarray, track: Track, params: F1Params):
    """Step K states at once. `states` is (K, 4): x, y, heading, arc.

    Returns (next_states (K, 4), lateral (K,), rel_angle (K,), crashed (K,)).
    """
    s = np.clip(steers, -STEER_LIMIT, STEER_LIMIT)
    heading = wrap_angle(
        states[:, 2] + (params.speed / params.wheelbase) * np.tan(s) * params.dt
    )
    step = params.speed * params.dt
    x = states[:, 0] + step * np.cos(heading)
    y = states[:, 1] + step * np.sin(heading)
    arc, lat, tang = track.project(np.stack([x, y], axis=1))
    out = np.stack([x, y, heading, arc], axis=1)
    rel = wrap_angle(heading - tang)
    return out, lat, rel, np.abs(lat) > track.half_width


def state_to_row(state: CarStateF1) -> np.ndarray:
    return np.array([state.x, state.y, state.heading, state.arc_progress])


def row_to_state(row: np.ndarray) -> CarStateF1:
    return CarStateF1(float(row[0]), float(row[1]), float(row[2]), float(row[3]))

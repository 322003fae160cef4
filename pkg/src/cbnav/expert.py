"""Search-based MPC expert for demonstration generation.

Beam search over a discrete steering grid: every branch is scored by
goal progress plus a positioning penalty, branches whose safety slack
goes negative count as violating, and the first action of the best safe
branch wins (falling back to the least-violating branch). Ties break
toward small |steer|, then small grid index.

Safe demonstrations keep a positive safety margin and wander laterally
so the data covers the corridor. "Degraded" runs shrink the margin
(often below zero) and aim just outside the allowed band, which ends in
a crash; runs are labeled purely by their outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import Trajectory, TrajectorySet
from .gridmap import OccupancyGrid, geodesic_field
from .sim_f110 import F1Params, f1_observe, f1_state, f1_step, f1_step_batch, state_to_row
from .sim_mushr import MushrParams, PoseMushr, mushr_step, raycast
from .tracks import Track

F110_ACTION_GRID = (-0.7, -0.3, -0.1, 0.0, 0.1, 0.3, 0.7)
MUSHR_ACTION_GRID = (-0.34, -0.2, -0.08, 0.0, 0.08, 0.2, 0.34)

F110_TRAJ_CAP = 100
MUSHR_TRAJ_CAP = 110


class ExpertError(RuntimeError):
    pass


@dataclass
class ExpertConfig:
    horizon: int = 5
    action_grid: tuple[float, ...] = F110_ACTION_GRID
    safety_margin: float = 0.2
    replan_every: int = 1
    beam_width: int = 12
    unsafe_mode: bool = False
    w_progress: float = 1.0
    w_position: float = 0.8
    position_target: float = 0.0   # preferred lateral offset (F1) in meters

    def __post_init__(self):
        if self.horizon < 1:
            raise ExpertError("horizon must be >= 1")
        if not self.action_grid:
            raise ExpertError("action grid must not be empty")


class F110ExpertWorld:
    """Planner-facing batch kernels for the racetrack simulator."""

    def __init__(self, track: Track, params: F1Params = F1Params()):
        self.track = track
        self.params = params

    def expand(self, rows: np.ndarray, steers: np.ndarray):
        nxt, lat, _, _ = f1_step_batch(rows, steers, self.track, self.params)
        return nxt, lat

    def slack(self, rows: np.ndarray, lat: np.ndarray, margin: float) -> np.ndarray:
        return (self.track.half_width - margin) - np.abs(lat)

    def position_cost(self, rows: np.ndarray, lat: np.ndarray, target: float) -> np.ndarray:
        return np.abs(lat - target)

    def potential(self, rows: np.ndarray, root_row: np.ndarray) -> np.ndarray:
        # negative forward arc progress, wrap-aware relative to the root
        delta = rows[:, 3] - root_row[3]
        half = self.track.length / 2.0
        delta = (delta + half) % self.track.length - half
        return -delta


class MushrExpertWorld:
    """Planner-facing batch kernels for the occupancy-grid simulator.

    Planning approximates the range sensor with the grid clearance field
    and measures progress with a coarse geodesic distance to the goal;
    the recorded observations still come from the real raycast.
    """

    def __init__(self, grid: OccupancyGrid, goal_xy, params: MushrParams = MushrParams()):
        self.grid = grid
        self.params = params
        self.goal = goal_xy
        self.field = geodesic_field(grid, goal_xy)
        self.clearance_pref = 0.7

    def expand(self, rows: np.ndarray, steers: np.ndarray):
        s = np.clip(steers, -0.34, 0.34)
        heading = rows[:, 2] + (self.params.speed / self.params.wheelbase) * np.tan(s) * self.params.dt
        step = self.params.speed * self.params.dt
        x = rows[:, 0] + step * np.cos(heading)
        y = rows[:, 1] + step * np.sin(heading)
        nxt = np.stack([x, y, heading], axis=1)
        clearance = self.grid.clearance_world(x, y)
        return nxt, clearance

    def slack(self, rows, clearance, margin: float) -> np.ndarray:
        return clearance - (self.params.collision_radius + margin)

    def position_cost(self, rows, clearance, target: float) -> np.ndarray:
        if target > 0:  # degraded mode: chase a tight clearance, nothing else
            return np.maximum(0.0, target - clearance)
        # stay inside the inflated-free zone the geodesic is defined on;
        # riding its smoothed fringe leads into door jambs and pockets
        pen = np.maximum(0.0, self.clearance_pref - clearance)
        return pen + 4.0 * np.maximum(0.0, 0.45 - clearance)

    def potential(self, rows: np.ndarray, root_row: np.ndarray) -> np.ndarray:
        d = self.field.distance(rows[:, 0], rows[:, 1])
        return np.where(np.isfinite(d), d, 1e6)


def plan_step(world, root_row: np.ndarray, cfg: ExpertConfig) -> float:
    """First steering action of the best branch from `root_row`.

    Branch ranking: zero-violation branches first, then accumulated
    cost, then |first steer|, then grid index.
    """
    actions = np.asarray(cfg.action_grid, dtype=float)
    n_act = len(actions)
    rows = np.repeat(root_row[None, :], n_act, axis=0)
    rows, feat = world.expand(rows, actions)
    slack = world.slack(rows, feat, cfg.safety_margin)
    violation = np.maximum(0.0, -slack)
    cost = cfg.w_position * world.position_cost(rows, feat, cfg.position_target)
    first = np.arange(n_act)

    for _ in range(cfg.horizon - 1):
        if len(rows) > cfg.beam_width:
            # stratified beam: keep the best continuations of EVERY first
            # action, otherwise near-tied shallow prefixes collapse the
            # beam onto one commitment before costs can differentiate
            score = cost + cfg.w_progress * world.potential(rows, root_row)
            per = max(1, cfg.beam_width // n_act)
            keep = []
            for a in range(n_act):
                grp = np.nonzero(first == a)[0]
                if len(grp):
                    best = np.lexsort((grp, score[grp], violation[grp]))[:per]
                    keep.append(grp[best])
            keep = np.concatenate(keep)
            rows, violation, cost, first = rows[keep], violation[keep], cost[keep], first[keep]
        k = len(rows)
        rows = np.repeat(rows, n_act, axis=0)
        steers = np.tile(actions, k)
        violation = np.repeat(violation, n_act)
        cost = np.repeat(cost, n_act)
        first = np.repeat(first, n_act)
        rows, feat = world.expand(rows, steers)
        slack = world.slack(rows, feat, cfg.safety_margin)
        violation = np.maximum(violation, np.maximum(0.0, -slack))
        cost = cost + cfg.w_position * world.position_cost(rows, feat, cfg.position_target)

    # constant-action branches are evaluated exactly and never pruned:
    # escape maneuvers are sustained turns, which beam pruning tends to
    # drop while their shallow prefixes still look expensive
    crows = np.repeat(root_row[None, :], n_act, axis=0)
    cviol = np.zeros(n_act)
    ccost = np.zeros(n_act)
    for _ in range(cfg.horizon):
        crows, cfeat = world.expand(crows, actions)
        cslack = world.slack(crows, cfeat, cfg.safety_margin)
        cviol = np.maximum(cviol, np.maximum(0.0, -cslack))
        ccost = ccost + cfg.w_position * world.position_cost(crows, cfeat, cfg.position_target)

    rows = np.concatenate([rows, crows])
    violation = np.concatenate([violation, cviol])
    cost = np.concatenate([cost, ccost])
    first = np.concatenate([first, np.arange(n_act)])

    score = cost + cfg.w_progress * world.potential(rows, root_row)
    order = np.lexsort((first, np.abs(actions[first]), score, violation))
    return float(actions[first[order[0]]])


# --- dataset generation -----------------------------------------------------


def _f110_start(track: Track, rng) -> "object":
    arc = rng.uniform(0.0, track.length)
    lat = rng.uniform(-0.3, 0.3)
    heading = track.tangent_at(arc) + rng.uniform(-0.25, 0.25)
    p = track.point_at(arc)
    tang = track.tangent_at(arc)
    normal = np.array([-np.sin(tang), np.cos(tang)])
    pos = p + lat * normal
    return f1_state(track, pos[0], pos[1], heading)


def _run_f110(track, params, cfg, rng, cap) -> Trajectory:
    world = F110ExpertWorld(track, params)
    state = _f110_start(track, rng)
    obs = f1_observe(state, track)
    crashed = abs(obs.lateral_offset) > track.half_width
    obs_rows, act_rows, pose_rows = [], [], []
    hold_action, hold_left = 0.0, 0
    wander_left = 0
    cfg = replace(cfg)
    while len(obs_rows) < cap:
        if crashed:
            obs_rows.append(obs.as_array())
            act_rows.append(np.zeros(1, dtype=np.float32))
            pose_rows.append(np.array([state.x, state.y, state.heading], dtype=np.float32))
            break
        if not cfg.unsafe_mode:
            if wander_left == 0:
                cfg.position_target = float(rng.uniform(-0.55, 0.55))
                wander_left = int(rng.integers(15, 35))
            wander_left -= 1
        if hold_left == 0:
            hold_action = plan_step(world, state_to_row(state), cfg)
            hold_left = cfg.replan_every
        hold_left -= 1
        obs_rows.append(obs.as_array())
        act_rows.append(np.array([hold_action], dtype=np.float32))
        pose_rows.append(np.array([state.x, state.y, state.heading], dtype=np.float32))
        res = f1_step(state, hold_action, track, params)
        state, obs, crashed = res.state, res.obs, res.crashed
    # crash is only attributed when the terminal state made it into the record
    final_crash = bool(crashed and abs(obs_rows[-1][0]) > track.half_width)
    return Trajectory(
        np.stack(obs_rows), np.stack(act_rows), np.stack(pose_rows), final_crash
    )


def _mushr_start(grid: OccupancyGrid, rng, min_clearance=0.8):
    w_m, h_m = grid.extent
    for _ in range(500):
        x = grid.origin[0] + rng.uniform(0.5, w_m - 0.5)
        y = grid.origin[1] + rng.uniform(0.5, h_m - 0.5)
        if grid.clearance_world(x, y) >= min_clearance:
            return x, y
    raise ExpertError("could not sample a free start cell")


def _mushr_heading(grid: OccupancyGrid, x, y, rng, field=None) -> float:
    # the car can't U-turn inside a doorway: require the next ~1.5 m ahead
    # clear, and prefer headings that are not sharply anti-goal
    fallback = None
    for _ in range(80):
        heading = rng.uniform(-np.pi, np.pi)
        probe = np.arange(0.3, 1.6, 0.3)
        xs = x + probe * np.cos(heading)
        ys = y + probe * np.sin(heading)
        if not (grid.clearance_world(xs, ys) >= 0.4).all():
            continue
        if fallback is None:
            fallback = heading
        if field is not None:
            ahead = float(field.distance(xs[-1], ys[-1]))
            here = float(field.distance(x, y))
            if np.isfinite(ahead) and ahead <= here + 0.3:
                return float(heading)
        else:
            return float(heading)
    return float(fallback if fallback is not None else rng.uniform(-np.pi, np.pi))


def _run_mushr(grid, params, cfg, rng, cap) -> Trajectory:
    sx, sy = _mushr_start(grid, rng)
    for _ in range(100):
        gx, gy = _mushr_start(grid, rng)
        if 8.0 <= np.hypot(gx - sx, gy - sy):
            try:
                world = MushrExpertWorld(grid, (gx, gy), params)
            except Exception:
                continue
            if np.isfinite(world.field.distance(sx, sy)):
                break
    else:
        raise ExpertError("could not sample a reachable goal")
    heading = _mushr_heading(grid, sx, sy, rng, world.field)
    pose = PoseMushr(sx, sy, heading)
    scan = raycast(grid, pose, params.max_range)
    crashed = scan.min_distance() < params.collision_radius
    obs_rows, act_rows, pose_rows = [], [], []
    hold_action, hold_left = 0.0, 0
    while len(obs_rows) < cap:
        if crashed:
            obs_rows.append(scan.as_obs())
            act_rows.append(np.zeros(1, dtype=np.float32))
            pose_rows.append(np.array([pose.x, pose.y, pose.heading], dtype=np.float32))
            break
        if hold_left == 0:
            hold_action = plan_step(world, np.array([pose.x, pose.y, pose.heading]), cfg)
            hold_left = cfg.replan_every
        hold_left -= 1
        obs_rows.append(scan.as_obs())
        act_rows.append(np.array([hold_action], dtype=np.float32))
        pose_rows.append(np.array([pose.x, pose.y, pose.heading], dtype=np.float32))
        res = mushr_step(pose, hold_action, grid, params)
        pose, scan, crashed = res.pose, res.scan, res.crashed
        if world.field.distance(pose.x, pose.y) < 1.0:
            break  # reached the goal neighborhood
    final_crash = bool(crashed and len(act_rows) > 0 and act_rows[-1][0] == 0.0)
    return Trajectory(
        np.stack(obs_rows), np.stack(act_rows), np.stack(pose_rows), final_crash
    )


def _degraded_cfg(cfg: ExpertConfig, rng, env: str) -> ExpertConfig:
    margin = float(rng.uniform(-0.2, 0.05))
    out = replace(cfg, safety_margin=margin, unsafe_mode=True)
    if env == "f110":
        allowed = 1.0 - margin
        out.position_target = float(rng.choice([-1.0, 1.0]) * (allowed + 0.15))
    else:
        # prefer clearances right at the (degraded) allowed band
        out.position_target = max(0.05, 0.2 + margin + 0.05)
    return out


MAX_DEGRADED_RETRIES = 20


def generate_dataset(
    env: str,
    n_traj: int,
    unsafe_fraction: float,
    seed: int,
    track: Track | None = None,
    grid: OccupancyGrid | None = None,
    cfg: ExpertConfig | None = None,
    cap: int | None = None,
) -> TrajectorySet:
    """Seeded expert runs; a chosen fraction is degraded until it crashes.

    Labels follow outcomes: a run is unsafe iff its recorded final state
    satisfies the crash predicate.
    """
    if n_traj < 1:
        raise ExpertError("n_traj must be >= 1")
    if not 0.0 <= unsafe_fraction <= 1.0:
        raise ExpertError("unsafe_fraction must be in [0, 1]")
    if env == "f110":
        if track is None:
            raise ExpertError("f110 needs a track")
        cfg = cfg or ExpertConfig()
        cap = cap or F110_TRAJ_CAP
        params = F1Params()
    elif env == "mushr":
        if grid is None:
            raise ExpertError("mushr needs a grid")
        # lookahead must exceed the 0.85 m turning radius at full steer
        cfg = cfg or ExpertConfig(
            action_grid=MUSHR_ACTION_GRID, horizon=14, beam_width=28, w_position=2.0
        )
        cap = cap or MUSHR_TRAJ_CAP
        params = MushrParams()
    else:
        raise ExpertError(f"unknown env {env!r}")

    root = np.random.SeedSequence(seed)
    child_seeds = root.spawn(n_traj)
    n_degraded = int(round(n_traj * unsafe_fraction))
    pick_rng = np.random.default_rng(root.spawn(1)[0])
    degraded_ids = set(pick_rng.permutation(n_traj)[:n_degraded].tolist())

    trajs = []
    for i in range(n_traj):
        rng = np.random.default_rng(child_seeds[i])
        degraded = i in degraded_ids
        attempts = MAX_DEGRADED_RETRIES if degraded else 1
        traj = None
        for _ in range(attempts):
            run_cfg = _degraded_cfg(cfg, rng, env) if degraded else replace(cfg)
            try:
                if env == "f110":
                    traj = _run_f110(track, params, run_cfg, rng, cap)
                else:
                    traj = _run_mushr(grid, params, run_cfg, rng, cap)
            except ExpertError:
                continue
            if not degraded or traj.crashed:
                break
        if traj is None:
            raise ExpertError(f"trajectory {i} failed to generate")
        trajs.append(traj)
    return TrajectorySet(trajs, env=env, seed=seed)

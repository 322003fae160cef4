"""Trajectory persistence, per-state safety labeling, and windowing.

On-disk layout: a `dataset.json` manifest plus one `traj_<id>.bin` per
trajectory. Each .bin is little-endian:

    magic    4 bytes  b"CBT1"
    t_len    uint32
    obs_dim  uint32
    act_dim  uint32
    pose_dim uint32
    crashed  uint8
    label    uint8    0 = safe, 1 = unsafe (always == crashed)
    has_tags uint8    1 when custom per-step tags follow the pose block
    reserved uint8
    obs      float32[t_len * obs_dim]   row-major
    act      float32[t_len * act_dim]
    pose     float32[t_len * pose_dim]  world x, y, heading per step
    tags     uint8[t_len]               only when has_tags = 1

Per-state labels: in a safe trajectory every state is safe. In a crashed
trajectory of length L under context length T, the first L - 2T states
are safe, the final state is unsafe, and the remainder are unlabeled.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CBT1"
FORMAT_VERSION = 1

TAG_SAFE = 0
TAG_UNSAFE = 1
TAG_UNLABELED = 2


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    observations: np.ndarray          # (L, obs_dim) float32
    actions: np.ndarray               # (L, act_dim) float32
    poses: np.ndarray                 # (L, 3) float32 world x, y, heading
    crashed: bool
    tags: np.ndarray | None = None    # (L,) uint8 custom labels, optional

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        self.poses = np.ascontiguousarray(self.poses, dtype=np.float32)
        if self.tags is not None:
            self.tags = np.ascontiguousarray(self.tags, dtype=np.uint8)
        n = len(self.observations)
        if len(self.actions) != n or len(self.poses) != n:
            raise DatasetError(
                f"length mismatch: obs {n}, act {len(self.actions)}, pose {len(self.poses)}"
            )
        if self.tags is not None and len(self.tags) != n:
            raise DatasetError("tags length mismatch")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def label(self) -> str:
        return "unsafe" if self.crashed else "safe"


@dataclass
class TrajectorySet:
    trajectories: list[Trajectory]
    env: str
    seed: int | None = None
    relabeled: str | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.trajectories[0].actions.shape[1]

    def counts(self) -> tuple[int, int]:
        unsafe = sum(1 for t in self.trajectories if t.crashed)
        return len(self.trajectories) - unsafe, unsafe


# --- persistence -----------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIBBBB")


def _traj_bytes(traj: Trajectory) -> bytes:
    has_tags = traj.tags is not None
    head = _HEADER.pack(
        MAGIC,
        len(traj),
        traj.observations.shape[1],
        traj.actions.shape[1],
        traj.poses.shape[1],
        int(traj.crashed),
        int(traj.crashed),
        int(has_tags),
        0,
    )
    parts = [
        head,
        traj.observations.astype("<f4").tobytes(),
        traj.actions.astype("<f4").tobytes(),
        traj.poses.astype("<f4").tobytes(),
    ]
    if has_tags:
        parts.append(traj.tags.tobytes())
    return b"".join(parts)


def _traj_from_bytes(raw: bytes) -> Trajectory:
    if len(raw) < _HEADER.size:
        raise DatasetError("trajectory file truncated (short header)")
    magic, t_len, obs_dim, act_dim, pose_dim, crashed, label, has_tags, _ = _HEADER.unpack(
        raw[: _HEADER.size]
    )
    if magic != MAGIC:
        raise DatasetError(f"bad trajectory magic {magic!r}")
    if label != crashed:
        raise DatasetError("label/crashed mismatch in trajectory header")
    need = _HEADER.size + 4 * t_len * (obs_dim + act_dim + pose_dim) + (t_len if has_tags else 0)
    if len(raw) != need:
        raise DatasetError(f"trajectory file has {len(raw)} bytes, expected {need}")
    off = _HEADER.size

    def block(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        return arr

    obs = block(t_len * obs_dim).reshape(t_len, obs_dim)
    act = block(t_len * act_dim).reshape(t_len, act_dim)
    pose = block(t_len * pose_dim).reshape(t_len, pose_dim)
    tags = None
    if has_tags:
        tags = np.frombuffer(raw, dtype=np.uint8, count=t_len, offset=off)
    return Trajectory(obs.copy(), act.copy(), pose.copy(), bool(crashed), None if tags is None else tags.copy())


def save_dataset(ts: TrajectorySet, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, traj in enumerate(ts.trajectories):
        name = f"traj_{i:05d}.bin"
        (out_dir / name).write_bytes(_traj_bytes(traj))
        entries.append(
            {"id": i, "file": name, "len": len(traj), "crashed": traj.crashed, "label": traj.label}
        )
    n_safe, n_unsafe = ts.counts()
    manifest = {
        "format_version": FORMAT_VERSION,
        "env": ts.env,
        "obs_dim": ts.obs_dim,
        "act_dim": ts.act_dim,
        "pose_dim": 3,
        "n_traj": len(ts),
        "n_safe": n_safe,
        "n_unsafe": n_unsafe,
        "seed": ts.seed,
        "relabeled": ts.relabeled,
        "extra": ts.extra,
        "trajectories": entries,
    }
    path = out_dir / "dataset.json"
    path.write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def load_dataset(path) -> TrajectorySet:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read dataset manifest {path}: {e}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')!r}")
    trajs = []
    for entry in manifest["trajectories"]:
        traj = _traj_from_bytes((path.parent / entry["file"]).read_bytes())
        if len(traj) != entry["len"] or traj.crashed != entry["crashed"]:
            raise DatasetError(f"manifest disagrees with {entry['file']}")
        trajs.append(traj)
    return TrajectorySet(
        trajs,
        env=manifest["env"],
        seed=manifest.get("seed"),
        relabeled=manifest.get("relabeled"),
        extra=manifest.get("extra", {}),
    )


# --- per-state labels ------------------------------------------------------


@dataclass
class LabeledStateSet:
    """Per-trajectory per-step tags in {safe, unsafe, unlabeled}."""

    tags: list[np.ndarray]

    def count(self, tag: int) -> int:
        return int(sum(int((t == tag).sum()) for t in self.tags))

    @property
    def n_safe(self) -> int:
        return self.count(TAG_SAFE)

    @property
    def n_unsafe(self) -> int:
        return self.count(TAG_UNSAFE)

    @property
    def n_unlabeled(self) -> int:
        return self.count(TAG_UNLABELED)


def build_safe_sets(ts: TrajectorySet, context_len: int) -> LabeledStateSet:
    """Tag every state of every trajectory.

    Safe runs contribute all states to the safe set. A crashed run of
    length L keeps its first L - 2*context_len states as safe, its final
    state as unsafe, and everything in between as unlabeled. Custom tags
    stored by `relabel` take precedence when present.
    """
    if context_len < 1:
        raise DatasetError("context_len must be >= 1")
    out = []
    for traj in ts:
        if traj.tags is not None:
            out.append(traj.tags.copy())
            continue
        n = len(traj)
        tags = np.full(n, TAG_SAFE, dtype=np.uint8)
        if traj.crashed:
            n_safe = max(n - 2 * context_len, 0)
            tags[n_safe:] = TAG_UNLABELED
            tags[n - 1] = TAG_UNSAFE
        out.append(tags)
    return LabeledStateSet(out)


# --- windowing --------------------------------------------------------------


@dataclass
class WindowBatch:
    obs: np.ndarray        # (B, T, obs_dim) float32, zero-padded
    act: np.ndarray        # (B, T, act_dim)
    next_obs: np.ndarray   # (B, T, obs_dim); zeros where has_next is False
    valid: np.ndarray      # (B, T) bool, step is real data
    has_next: np.ndarray   # (B, T) bool, next_obs is real data
    tags: np.ndarray       # (B, T) uint8
    traj_safe: np.ndarray  # (B,) bool
    traj_id: np.ndarray    # (B,) int32
    start: np.ndarray      # (B,) int32

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def enumerate_windows(ts: TrajectorySet, context_len: int, include_prefixes: bool = False):
    """(traj_id, start, length) for every window, in deterministic order."""
    spans = []
    for i, traj in enumerate(ts):
        n = len(traj)
        if n == 0:
            continue
        if n >= context_len:
            spans.extend((i, s, context_len) for s in range(n - context_len + 1))
            if include_prefixes:
                spans.extend((i, 0, k) for k in range(1, context_len))
        else:
            spans.append((i, 0, n))
            if include_prefixes:
                spans.extend((i, 0, k) for k in range(1, n))
    return spans


def window_iter(
    ts: TrajectorySet,
    context_len: int,
    batch_size: int,
    shuffle_seed: int | None = None,
    include_prefixes: bool = False,
    labels: LabeledStateSet | None = None,
):
    """Yield WindowBatch objects covering every window exactly once.

    Deterministic: a fixed seed gives an identical batch sequence.
    """
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    spans = enumerate_windows(ts, context_len, include_prefixes)
    if not spans:
        return
    if labels is None:
        labels = build_safe_sets(ts, context_len)
    order = np.arange(len(spans))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    obs_dim, act_dim = ts.obs_dim, ts.act_dim
    for chunk_start in range(0, len(order), batch_size):
        idx = order[chunk_start : chunk_start + batch_size]
        b = len(idx)
        batch = WindowBatch(
            obs=np.zeros((b, context_len, obs_dim), dtype=np.float32),
            act=np.zeros((b, context_len, act_dim), dtype=np.float32),
            next_obs=np.zeros((b, context_len, obs_dim), dtype=np.float32),
            valid=np.zeros((b, context_len), dtype=bool),
            has_next=np.zeros((b, context_len), dtype=bool),
            tags=np.full((b, context_len), TAG_UNLABELED, dtype=np.uint8),
            traj_safe=np.zeros(b, dtype=bool),
            traj_id=np.zeros(b, dtype=np.int32),
            start=np.zeros(b, dtype=np.int32),
        )
        for row, j in enumerate(idx):
            ti, s, k = spans[j]
            traj = ts.trajectories[ti]
            n = len(traj)
            batch.obs[row, :k] = traj.observations[s : s + k]
            batch.act[row, :k] = traj.actions[s : s + k]
            last = min(s + k, n - 1)
            n_next = last - s
            if n_next > 0:
                batch.next_obs[row, :n_next] = traj.observations[s + 1 : last + 1]
                batch.has_next[row, :n_next] = True
            batch.valid[row, :k] = True
            batch.tags[row, :k] = labels.tags[ti][s : s + k]
            batch.traj_safe[row] = not traj.crashed
            batch.traj_id[row] = ti
            batch.start[row] = s
        yield batch


# --- relabeling -------------------------------------------------------------


def relabel(ts: TrajectorySet, predicate, concept: str) -> TrajectorySet:
    """Attach new per-step tags; observations and actions are untouched.

    `predicate` maps a Trajectory to a (L,) uint8 tag array.
    """
    out = []
    for i, traj in enumerate(ts):
        try:
            tags = np.asarray(predicate(traj), dtype=np.uint8)
        except Exception as e:
            raise DatasetError(f"relabel predicate failed on trajectory {i}: {e}")
        if tags.shape != (len(traj),):
            raise DatasetError(
                f"relabel predicate returned shape {tags.shape} for trajectory {i} of length {len(traj)}"
            )
        out.append(
            Trajectory(
                traj.observations.copy(),
                traj.actions.copy(),
                traj.poses.copy(),
                traj.crashed,
                tags,
            )
        )
    return TrajectorySet(out, env=ts.env, seed=ts.seed, relabeled=concept, extra=dict(ts.extra))


def not_straight_predicate(min_run: int = 10, steer_eps: float = 0.02):
    """Ending a long straight-steering run is tagged unsafe.

    A maximal run of >= min_run consecutive steps with |steer| < steer_eps
    gets its final step tagged unsafe; all other steps stay safe.
    """

    def predicate(traj: Trajectory) -> np.ndarray:
        steer = traj.actions[:, 0]
        tags = np.full(len(traj), TAG_SAFE, dtype=np.uint8)
        run = 0
        for i, a in enumerate(steer):
            if abs(float(a)) < steer_eps:
                run += 1
            else:
                if run >= min_run:
                    tags[i - 1] = TAG_UNSAFE
                run = 0
        if run >= min_run:
            tags[len(traj) - 1] = TAG_UNSAFE
        return tags

    return predicate

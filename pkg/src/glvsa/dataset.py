"""Trajectory storage, expert data, sub-trajectory sampling and goal partitions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .maze import (ACTION_DIM, STATE_DIM, EnvConfig, MazeSpec, normalized_score, phi, reset,
                   step)

log = logging.getLogger(__name__)

EXPERT = "expert"
SYNTHETIC = "synthetic"
_MAGIC = "GLVSA-DATASET 1"


class GenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray   # (L+1, 4) float32
    actions: np.ndarray  # (L, 2) float32
    provenance: str = EXPERT
    iteration_born: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32).reshape(-1, STATE_DIM)
        self.actions = np.asarray(self.actions, dtype=np.float32).reshape(-1, ACTION_DIM)

    def __len__(self) -> int:
        return len(self.states)

    def validate(self) -> str | None:
        """Return a diagnostic string if the trajectory is malformed, else None."""
        if len(self.states) != len(self.actions) + 1:
            return f"{len(self.states)} states vs {len(self.actions)} actions"
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            return "non-finite values"
        return None


@dataclass
class SubTrajectory:
    states: np.ndarray   # (H+1, 4)
    actions: np.ndarray  # (H, 2)
    traj_index: int = -1
    offset: int = 0

    @property
    def horizon(self) -> int:
        return len(self.actions)


# -- goal partitions ---------------------------------------------------------


class ShiftLevel(str, Enum):
    NONE = "none"
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


@dataclass(frozen=True)
class ShiftConfig:
    level: ShiftLevel
    train_cells: tuple
    eval_cells: tuple

    def __post_init__(self):
        if not self.train_cells or not self.eval_cells:
            raise ValueError("goal regions must be nonempty")
        tr, ev = set(self.train_cells), set(self.eval_cells)
        if self.level is ShiftLevel.NONE and tr != ev:
            raise ValueError("no shift requires identical train and eval regions")
        if self.level is ShiftLevel.LARGE and tr & ev:
            raise ValueError("large shift requires disjoint regions")

    def overlap(self) -> float:
        """Fraction of eval cells that are also train cells."""
        return len(set(self.train_cells) & set(self.eval_cells)) / len(self.eval_cells)


def make_shift(spec: MazeSpec, level, anchor=(1, 1), train_fraction: float = 0.4,
               eval_fraction: float = 0.2) -> ShiftConfig:
    """Partition free cells into train/eval goal regions for a shift level.

    The train region is the block of cells nearest (by corridor distance) to
    ``anchor``. Eval regions move progressively away from it: half-overlapping
    (small), the adjacent ring (medium) and the farthest cells (large).
    """
    level = ShiftLevel(level)
    free = spec.free_cells()
    if tuple(anchor) not in free:
        raise ValueError(f"anchor {anchor} is not a free cell")
    d_anchor = spec.bfs_distances([anchor])
    ranked = sorted(free, key=lambda c: (d_anchor.get(c, 10**9), c))
    n_train = max(1, int(round(train_fraction * len(free))))
    train = ranked[:n_train]
    if level is ShiftLevel.NONE:
        return ShiftConfig(level, tuple(train), tuple(train))
    outside = [c for c in free if c not in set(train)]
    if not outside:
        raise ValueError("train region covers the whole maze; no room for a shift")
    k = max(2, int(round(eval_fraction * len(free))))
    k = min(k, len(outside))
    d_train = spec.bfs_distances(train)
    near = sorted(outside, key=lambda c: (d_train.get(c, 10**9), c))
    if level is ShiftLevel.SMALL:
        n_keep = (k + 1) // 2
        kept = sorted(train, key=lambda c: (-d_anchor[c], c))[:n_keep]
        return ShiftConfig(level, tuple(train), tuple(kept + near[: k - n_keep]))
    if level is ShiftLevel.MEDIUM:
        return ShiftConfig(level, tuple(train), tuple(near[:k]))
    far = sorted(outside, key=lambda c: (-d_train.get(c, -1), c))
    return ShiftConfig(level, tuple(train), tuple(far[:k]))


def sample_goal(spec: MazeSpec, cells, rng: np.random.Generator) -> np.ndarray:
    return spec.cell_center(cells[rng.integers(len(cells))])


def sample_start(spec: MazeSpec, goal, rng: np.random.Generator, min_dist: float = 1.0) -> np.ndarray:
    """Centre of a uniformly drawn free cell that is not already a success."""
    cells = [c for c in spec.free_cells()
             if np.sum((spec.cell_center(c) - goal) ** 2) > min_dist ** 2]
    if not cells:
        raise GenerationError("no admissible start cell for this goal")
    return spec.cell_center(cells[rng.integers(len(cells))])


# -- expert generation -------------------------------------------------------


def expert_trajectory(spec: MazeSpec, start, goal, horizon: int = 400, kp: float = 2.0,
                      kd: float = 1.5, switch_radius: float = 0.5, stop_radius: float = 0.2
                      ) -> Trajectory | None:
    """Grid shortest path followed by a PD tracker; None if the goal is not reached."""
    start = np.asarray(start, dtype=np.float32)
    goal = np.asarray(goal, dtype=np.float32)
    path = spec.shortest_path(spec.cell_of(start), spec.cell_of(goal))
    if path is None:
        return None
    waypoints = [spec.cell_center(c) for c in path[1:]]
    waypoints[-1:] = [goal] if waypoints else []
    if not waypoints:
        waypoints = [goal]
    s = reset(spec, start)
    states = [s.as_vector()]
    actions = []
    wi = 0
    for _ in range(horizon):
        if np.linalg.norm(s.position - goal) <= stop_radius:
            break
        if wi < len(waypoints) - 1 and np.linalg.norm(s.position - waypoints[wi]) < switch_radius:
            wi += 1
        a = np.clip(kp * (waypoints[wi] - s.position) - kd * s.velocity, -1.0, 1.0).astype(np.float32)
        s = step(spec, s, a)
        actions.append(a)
        states.append(s.as_vector())
    else:
        if np.linalg.norm(s.position - goal) > stop_radius:
            return None
    traj = Trajectory(np.array(states), np.array(actions).reshape(-1, ACTION_DIM))
    if normalized_score(traj.states[-1], goal) < 100.0:
        return None
    return traj


@dataclass
class DatasetStore:
    trajectories: list = field(default_factory=list)
    seed: int = 0
    horizon: int = 10
    maze_hash: str = ""
    synthetic_fraction: float | None = None  # None: uniform over all trajectories

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("skill horizon must be >= 1")

    def __len__(self) -> int:
        return len(self.trajectories)

    def counts(self) -> dict[str, int]:
        n_syn = sum(t.provenance == SYNTHETIC for t in self.trajectories)
        return {EXPERT: len(self) - n_syn, SYNTHETIC: n_syn}

    def copy(self) -> "DatasetStore":
        trajs = [Trajectory(t.states.copy(), t.actions.copy(), t.provenance, t.iteration_born)
                 for t in self.trajectories]
        return DatasetStore(trajs, self.seed, self.horizon, self.maze_hash, self.synthetic_fraction)


def generate_expert_dataset(spec: MazeSpec, shift: ShiftConfig, n: int, seed: int, horizon: int = 10,
                            env_cfg: EnvConfig | None = None, max_retries: int = 20) -> DatasetStore:
    if n < 1:
        raise ValueError("need at least one trajectory")
    env_cfg = env_cfg or EnvConfig()
    rng = np.random.default_rng(seed)
    train = list(shift.train_cells)
    trajs = []
    for _ in range(n):
        for _attempt in range(max_retries):
            goal = sample_goal(spec, train, rng)
            start = sample_start(spec, goal, rng)
            traj = expert_trajectory(spec, start, goal, horizon=env_cfg.horizon)
            if traj is not None:
                trajs.append(traj)
                break
        else:
            raise GenerationError("train goal region unreachable from sampled starts")
    return DatasetStore(trajs, seed=seed, horizon=horizon, maze_hash=spec.hash())


# -- sampling ----------------------------------------------------------------


def _eligible(store: DatasetStore, H: int) -> np.ndarray:
    return np.array([i for i, t in enumerate(store.trajectories) if len(t) >= H + 1], dtype=int)


def _pick_trajectory(store: DatasetStore, eligible: np.ndarray, rng: np.random.Generator) -> int:
    frac = store.synthetic_fraction
    if frac is not None:
        syn = np.array([store.trajectories[i].provenance == SYNTHETIC for i in eligible])
        if syn.any() and (~syn).any():
            pool = eligible[syn] if rng.random() < frac else eligible[~syn]
            return int(pool[rng.integers(len(pool))])
    return int(eligible[rng.integers(len(eligible))])


def _draw(store: DatasetStore, eligible: np.ndarray, H: int, rng: np.random.Generator) -> SubTrajectory:
    if len(eligible) == 0:
        raise SamplingError(f"no trajectory has at least {H + 1} states")
    i = _pick_trajectory(store, eligible, rng)
    traj = store.trajectories[i]
    t = int(rng.integers(len(traj) - H))
    return SubTrajectory(traj.states[t:t + H + 1].copy(), traj.actions[t:t + H].copy(), i, t)


def sample_subtrajectory(store: DatasetStore, H: int, rng: np.random.Generator) -> SubTrajectory:
    """Uniform trajectory (among those with >= H+1 states), then a uniform start offset."""
    return _draw(store, _eligible(store, H), H, rng)


def relabel_goal(traj: Trajectory, t: int, mode: str, H: int = 0,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Hindsight goal for offset ``t``: the final state, or a state at index >= t+H."""
    if not 0 <= t < len(traj):
        raise IndexError(f"offset {t} outside trajectory of length {len(traj)}")
    last = len(traj) - 1
    if mode == "final" or t + H > last:
        return phi(traj.states[last])
    if mode != "future":
        raise ValueError(f"unknown relabel mode {mode!r}")
    rng = rng or np.random.default_rng()
    return phi(traj.states[int(rng.integers(t + H, last + 1))])


@dataclass
class Batch:
    states: np.ndarray   # (B, H+1, 4)
    actions: np.ndarray  # (B, H, 2)
    goals: np.ndarray    # (B, 2)

    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]


def sample_batch(store: DatasetStore, H: int, batch_size: int, rng: np.random.Generator,
                 goal_mode: str = "future") -> Batch:
    eligible = _eligible(store, H)
    subs, goals = [], []
    for _ in range(batch_size):
        sub = _draw(store, eligible, H, rng)
        subs.append(sub)
        goals.append(relabel_goal(store.trajectories[sub.traj_index], sub.offset, goal_mode, H, rng))
    return Batch(np.stack([s.states for s in subs]), np.stack([s.actions for s in subs]),
                 np.stack(goals).astype(np.float32))


# -- growth ------------------------------------------------------------------


def append_synthetic(store: DatasetStore, trajs, iteration: int) -> list[str]:
    """Append validated synthetic trajectories; returns diagnostics for rejected ones."""
    rejected = []
    for k, traj in enumerate(trajs):
        problem = traj.validate()
        if problem is not None:
            rejected.append(f"trajectory {k}: {problem}")
            log.warning("rejected synthetic trajectory %d: %s", k, problem)
            continue
        traj.provenance = SYNTHETIC
        traj.iteration_born = iteration
        store.trajectories.append(traj)
    return rejected


def goal_coverage(store: DatasetStore, bin_size: float = 0.25) -> int:
    """Number of distinct square goal-space bins visited by any stored state."""
    if not store.trajectories:
        raise ValueError("goal coverage of an empty store")
    pts = np.concatenate([t.states[:, :2] for t in store.trajectories]).astype(np.float64)
    bins = np.floor(pts / bin_size).astype(np.int64)
    return len(np.unique(bins, axis=0))


# -- persistence -------------------------------------------------------------


def save_dataset(store: DatasetStore, path) -> None:
    """Text manifest, blank line, then little-endian float32 records in order."""
    lines = [
        _MAGIC,
        f"trajectories {len(store)}",
        f"H {store.horizon}",
        f"maze_hash {store.maze_hash or '-'}",
        f"seed {store.seed}",
        f"synthetic_fraction {'-' if store.synthetic_fraction is None else repr(store.synthetic_fraction)}",
        f"state_dim {STATE_DIM}",
        f"action_dim {ACTION_DIM}",
    ]
    for i, t in enumerate(store.trajectories):
        lines.append(f"record {i} {len(t)} {t.provenance} {t.iteration_born}")
    header = ("\n".join(lines) + "\n\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        for t in store.trajectories:
            fh.write(t.states.astype("<f4").tobytes())
            fh.write(t.actions.astype("<f4").tobytes())


def load_dataset(path) -> DatasetStore:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n\n")
    if cut < 0:
        raise DatasetFormatError("missing header terminator")
    lines = raw[:cut].decode().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise DatasetFormatError("not a dataset file")
    fields = {}
    records = []
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "record":
            records.append((int(parts[2]), parts[3], int(parts[4])))
        else:
            fields[parts[0]] = parts[1]
    if int(fields["trajectories"]) != len(records):
        raise DatasetFormatError("record count does not match header")
    payload = memoryview(raw)[cut + 2:]
    off = 0
    trajs = []
    for n_states, prov, born in records:
        ns = n_states * STATE_DIM * 4
        na = (n_states - 1) * ACTION_DIM * 4
        if off + ns + na > len(payload):
            raise DatasetFormatError("dataset payload truncated")
        states = np.frombuffer(payload[off:off + ns], dtype="<f4").reshape(n_states, STATE_DIM)
        off += ns
        actions = np.frombuffer(payload[off:off + na], dtype="<f4").reshape(n_states - 1, ACTION_DIM)
        off += na
        trajs.append(Trajectory(states.astype(np.float32), actions.astype(np.float32), prov, born))
    frac = fields.get("synthetic_fraction", "-")
    return DatasetStore(
        trajs, seed=int(fields["seed"]), horizon=int(fields["H"]),
        maze_hash="" if fields["maze_hash"] == "-" else fields["maze_hash"],
        synthetic_fraction=None if frac == "-" else float(frac),
    )

"""Deterministic continuous point maze.

The agent is a point mass on a grid of wall/free cells. Actions are
accelerations in [-1, 1]^2; velocity is clamped per component and walls are
resolved with an axis-separated sweep (x first, then y). Positions are in
length units with cell (row, col) covering ``[col, col+1) x [row, row+1)``
times ``cell_size``.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STATE_DIM = 4
ACTION_DIM = 2
_WALL_MARGIN = 1e-4

DEFAULT_LAYOUT = (
    "########",
    "#....#.#",
    "#.##.#.#",
    "#.#..#.#",
    "#.#.##.#",
    "#...#..#",
    "##.....#",
    "########",
)


class InvalidStartError(ValueError):
    pass


class MazeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MazeSpec:
    walls: np.ndarray = field(repr=False)  # bool, shape (rows, cols), True = wall
    cell_size: float = 1.0
    dt: float = 0.2
    max_speed: float = 2.0
    action_bound: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.walls, dtype=bool)
        object.__setattr__(self, "walls", w)
        if w.ndim != 2 or w.shape[0] < 3 or w.shape[1] < 3:
            raise MazeFormatError(f"maze grid must be at least 3x3, got {w.shape}")
        if not (w[0].all() and w[-1].all() and w[:, 0].all() and w[:, -1].all()):
            raise MazeFormatError("outer boundary of the maze must be wall")
        if not (~w).any():
            raise MazeFormatError("maze has no free cell")
        if self.max_speed * self.dt >= self.cell_size:
            raise MazeFormatError("max_speed * dt must stay below one cell per step")

    @classmethod
    def from_rows(cls, rows, **physics) -> "MazeSpec":
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise MazeFormatError("grid rows have unequal length")
        bad = set("".join(rows)) - {"#", "."}
        if bad:
            raise MazeFormatError(f"unknown grid characters {sorted(bad)}")
        walls = np.array([[c == "#" for c in r] for r in rows], dtype=bool)
        return cls(walls, **physics)

    @property
    def rows(self) -> int:
        return self.walls.shape[0]

    @property
    def cols(self) -> int:
        return self.walls.shape[1]

    @property
    def extent(self) -> np.ndarray:
        """(width, height) in length units."""
        return np.array([self.cols, self.rows], dtype=np.float32) * self.cell_size

    def free_cells(self) -> list[tuple[int, int]]:
        rs, cs = np.nonzero(~self.walls)
        return list(zip(rs.tolist(), cs.tolist()))

    def cell_of(self, pos) -> tuple[int, int]:
        x, y = float(pos[0]), float(pos[1])
        return int(np.floor(y / self.cell_size)), int(np.floor(x / self.cell_size))

    def cell_center(self, cell) -> np.ndarray:
        r, c = cell
        return np.array([(c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size], dtype=np.float32)

    def is_free(self, pos) -> bool:
        r, c = self.cell_of(pos)
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            return False
        return not self.walls[r, c]

    def to_rows(self) -> list[str]:
        return ["".join("#" if w else "." for w in row) for row in self.walls]

    def hash(self) -> str:
        text = "\n".join(self.to_rows()) + f"\n{self.cell_size!r} {self.dt!r} {self.max_speed!r} {self.action_bound!r}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # -- graph helpers ----------------------------------------------------
    def neighbors(self, cell) -> list[tuple[int, int]]:
        r, c = cell
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < self.rows and 0 <= cc < self.cols and not self.walls[rr, cc]:
                out.append((rr, cc))
        return out

    def bfs_distances(self, sources) -> dict[tuple[int, int], int]:
        """Corridor (4-connected) distance from the nearest source cell."""
        dist = {}
        q = deque()
        for s in sources:
            dist[tuple(s)] = 0
            q.append(tuple(s))
        while q:
            cur = q.popleft()
            for nb in self.neighbors(cur):
                if nb not in dist:
                    dist[nb] = dist[cur] + 1
                    q.append(nb)
        return dist

    def shortest_path(self, start, goal) -> list[tuple[int, int]] | None:
        start, goal = tuple(start), tuple(goal)
        prev = {start: None}
        q = deque([start])
        while q:
            cur = q.popleft()
            if cur == goal:
                break
            for nb in self.neighbors(cur):
                if nb not in prev:
                    prev[nb] = cur
                    q.append(nb)
        if goal not in prev:
            return None
        path = [goal]
        while path[-1] != start:
            path.append(prev[path[-1]])
        return path[::-1]


def default_maze() -> MazeSpec:
    return MazeSpec.from_rows(DEFAULT_LAYOUT)


def load_maze(path) -> MazeSpec:
    """Read a maze file: ``key = value`` physics lines, then ``[grid]`` and rows."""
    text = Path(path).read_text()
    return parse_maze(text)


def parse_maze(text: str) -> MazeSpec:
    physics: dict[str, float] = {}
    rows: list[str] = []
    in_grid = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line == "[grid]":
            in_grid = True
            continue
        if in_grid:
            rows.append(line)
            continue
        if "=" not in line:
            raise MazeFormatError(f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ("cell_size", "dt", "max_speed", "action_bound"):
            raise MazeFormatError(f"unknown maze field {key!r}")
        physics[key] = float(value)
    if not rows:
        raise MazeFormatError("maze file has no [grid] section")
    return MazeSpec.from_rows(rows, **physics)


def format_maze(spec: MazeSpec) -> str:
    head = [f"{k} = {getattr(spec, k)!r}" for k in ("cell_size", "dt", "max_speed", "action_bound")]
    return "\n".join(head + ["[grid]"] + spec.to_rows()) + "\n"


@dataclass(frozen=True)
class EnvConfig:
    gamma: float = 0.99
    horizon: int = 400
    success_radius: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.success_radius <= 0:
            raise ValueError("success radius must be positive")


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    velocity: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity]).astype(np.float32)

    @classmethod
    def from_vector(cls, v) -> "EnvState":
        v = np.asarray(v, dtype=np.float32)
        return cls(v[:2].copy(), v[2:4].copy())


def reset(spec: MazeSpec, start) -> EnvState:
    start = np.asarray(start, dtype=np.float32)
    if not spec.is_free(start):
        raise InvalidStartError(f"start {start.tolist()} is not in free space")
    return EnvState(start.copy(), np.zeros(2, dtype=np.float32))


def step_batch(spec: MazeSpec, pos: np.ndarray, vel: np.ndarray, action: np.ndarray):
    """Vectorised transition for ``N`` agents; returns new ``(pos, vel)``."""
    pos = np.asarray(pos, dtype=np.float32).reshape(-1, 2)
    vel = np.asarray(vel, dtype=np.float32).reshape(-1, 2)
    act = np.clip(np.asarray(action, dtype=np.float32).reshape(-1, 2), -spec.action_bound, spec.action_bound)
    dt = np.float32(spec.dt)
    cs = np.float32(spec.cell_size)
    vel = np.clip(vel + act * dt, -spec.max_speed, spec.max_speed).astype(np.float32)
    pos = pos.copy()
    for axis in (0, 1):
        moved = pos[:, axis] + vel[:, axis] * dt
        trial = pos.copy()
        trial[:, axis] = moved
        col = np.floor(trial[:, 0] / cs).astype(int)
        row = np.floor(trial[:, 1] / cs).astype(int)
        hit = spec.walls[row, col]
        if hit.any():
            idx = col if axis == 0 else row
            forward = vel[:, axis] > 0
            face = np.where(forward, idx * cs - _WALL_MARGIN, (idx + 1) * cs + _WALL_MARGIN).astype(np.float32)
            moved = np.where(hit, face, moved)
            vel[:, axis] = np.where(hit, np.float32(0.0), vel[:, axis])
        pos[:, axis] = moved
    return pos.astype(np.float32), vel.astype(np.float32)


def step(spec: MazeSpec, state: EnvState, action) -> EnvState:
    p, v = step_batch(spec, state.position[None], state.velocity[None], np.asarray(action)[None])
    return EnvState(p[0], v[0])


def phi(state) -> np.ndarray:
    """State-to-goal mapping: the position component."""
    if isinstance(state, EnvState):
        return state.position.copy()
    return np.asarray(state, dtype=np.float32)[..., :2].copy()


def reward(state_next, goal, cfg: EnvConfig) -> float:
    d = phi(state_next) - np.asarray(goal, dtype=np.float32)
    return 1.0 if float(np.sum(d.astype(np.float64) ** 2)) <= cfg.success_radius ** 2 else 0.0


def normalized_score(final_state, goal) -> float:
    d = phi(final_state) - np.asarray(goal, dtype=np.float32)
    return 100.0 if float(np.sum(d.astype(np.float64) ** 2)) <= 1.0 else 0.0


def success_mask(pos: np.ndarray, goals: np.ndarray, radius: float = 1.0) -> np.ndarray:
    d = pos.astype(np.float64) - goals.astype(np.float64)
    return np.sum(d * d, axis=-1) <= radius ** 2

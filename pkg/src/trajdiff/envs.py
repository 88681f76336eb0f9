"""Deterministic toy environments and the scripted controllers that generate data.

Environments are pure: ``step(state, action)`` returns the next state and
the reward ``r(s_t, a_t)`` without touching any internal state, so a logged
episode can be replayed exactly from its first state and its actions.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import TrajDiffError


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        return self.x0 < x < self.x1 and self.y0 < y < self.y1


@dataclass
class PointMassEnv:
    """2-D point mass, state ``(x, y, vx, vy)``, action = acceleration.

    Semi-implicit Euler with ``dt``: ``v += a dt`` then ``x += v dt``.
    Hitting the arena edge or a wall clamps the position to the boundary and
    zeroes velocity on the blocked axis. Reward is 1 while within
    ``goal_radius`` of the goal.
    """

    name: str = "pointmass-open"
    layout: tuple[str, ...] = ("...", "...", "...")
    half_size: float = 1.0
    dt: float = 0.1
    max_speed: float = 1.5
    max_accel: float = 2.0
    goal: tuple[float, float] = (2.0 / 3.0, -2.0 / 3.0)
    goal_radius: float = 0.1
    episode_length: int = 200
    walls: tuple[Rect, ...] = field(init=False)

    state_dim = 4
    action_dim = 2

    def __post_init__(self):
        rows, cols = len(self.layout), len(self.layout[0])
        walls = []
        for r, row in enumerate(self.layout):
            for c, ch in enumerate(row):
                if ch == "#":
                    x0, y0 = self.cell_origin(r, c)
                    walls.append(Rect(x0, y0, x0 + self.cell_w, y0 + self.cell_h))
        self.walls = tuple(walls)
        self._shape = (rows, cols)

    @property
    def cell_w(self) -> float:
        return 2 * self.half_size / len(self.layout[0])

    @property
    def cell_h(self) -> float:
        return 2 * self.half_size / len(self.layout)

    def cell_origin(self, row: int, col: int) -> tuple[float, float]:
        # row 0 is the top of the arena
        x0 = -self.half_size + col * self.cell_w
        y0 = self.half_size - (row + 1) * self.cell_h
        return x0, y0

    def cell_center(self, row: int, col: int) -> np.ndarray:
        x0, y0 = self.cell_origin(row, col)
        return np.array([x0 + self.cell_w / 2, y0 + self.cell_h / 2])

    def cell_of(self, pos) -> tuple[int, int]:
        rows, cols = self._shape
        col = int(np.clip((pos[0] + self.half_size) // self.cell_w, 0, cols - 1))
        row = int(np.clip((self.half_size - pos[1]) // self.cell_h, 0, rows - 1))
        return row, col

    def free_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.layout) for c, ch in enumerate(row) if ch != "#"]

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        h, v = self.half_size, self.max_speed
        return np.array([-h, -h, -v, -v]), np.array([h, h, v, v])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([self.sample_free_point(rng), np.zeros(2)])

    def sample_free_point(self, rng: np.random.Generator, margin: float = 0.05) -> np.ndarray:
        cells = self.free_cells()
        r, c = cells[rng.integers(len(cells))]
        x0, y0 = self.cell_origin(r, c)
        return np.array([
            rng.uniform(x0 + margin, x0 + self.cell_w - margin),
            rng.uniform(y0 + margin, y0 + self.cell_h - margin),
        ])

    def reward(self, state: np.ndarray, action: np.ndarray | None = None) -> float:
        return float(np.hypot(state[0] - self.goal[0], state[1] - self.goal[1]) <= self.goal_radius)

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        state = np.asarray(state, dtype=np.float64)
        a = np.clip(np.asarray(action, dtype=np.float64), -self.max_accel, self.max_accel)
        reward = self.reward(state, a)
        vel = np.clip(state[2:] + a * self.dt, -self.max_speed, self.max_speed)
        pos = state[:2].copy()
        # resolve one axis at a time so a blocked axis never drags the other
        for axis in (0, 1):
            moved = pos.copy()
            moved[axis] = pos[axis] + vel[axis] * self.dt
            limit = self._blocking_limit(pos, moved, axis)
            if limit is not None:
                moved[axis] = limit
                vel[axis] = 0.0
            pos = moved
        return np.concatenate([pos, vel]), reward

    def _blocking_limit(self, old: np.ndarray, new: np.ndarray, axis: int) -> float | None:
        h = self.half_size
        if new[axis] < -h:
            return -h
        if new[axis] > h:
            return h
        for w in self.walls:
            if w.contains(new[0], new[1]):
                lo, hi = (w.x0, w.x1) if axis == 0 else (w.y0, w.y1)
                return lo if old[axis] <= lo else hi
        return None

    def in_free_space(self, pos) -> bool:
        h = self.half_size
        if not (-h <= pos[0] <= h and -h <= pos[1] <= h):
            return False
        return not any(w.contains(pos[0], pos[1]) for w in self.walls)

    def route(self, start_pos, goal_pos) -> list[np.ndarray]:
        """Cell-center waypoints from ``start_pos`` to ``goal_pos`` (BFS over free cells)."""
        src, dst = self.cell_of(start_pos), self.cell_of(goal_pos)
        free = set(self.free_cells())
        prev = {src: None}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            if cur == dst:
                break
            r, c = cur
            for nxt in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if nxt in free and nxt not in prev:
                    prev[nxt] = cur
                    queue.append(nxt)
        path = []
        cur = dst if dst in prev else src
        while cur is not None:
            path.append(cur)
            cur = prev[cur]
        path.reverse()
        return [self.cell_center(*cell) for cell in path[1:-1]] + [np.asarray(goal_pos, dtype=np.float64)]

    def goal_state(self) -> np.ndarray:
        return np.array([self.goal[0], self.goal[1], 0.0, 0.0])

    def position(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state)[..., :2]


@dataclass
class IntegratorEnv:
    """1-D double integrator ``(x, v)`` with dense reward ``-|x - x_target|``."""

    name: str = "integrator-1d"
    dt: float = 0.1
    bound: float = 1.0
    max_speed: float = 1.0
    max_accel: float = 1.0
    target: float = 0.5
    episode_length: int = 64

    state_dim = 2
    action_dim = 1

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([-self.bound, -self.max_speed]), np.array([self.bound, self.max_speed])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-self.bound, self.bound), 0.0])

    def reward(self, state: np.ndarray, action: np.ndarray | None = None) -> float:
        return -abs(float(state[0]) - self.target)

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        state = np.asarray(state, dtype=np.float64)
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -self.max_accel, self.max_accel))
        reward = self.reward(state)
        v = float(np.clip(state[1] + a * self.dt, -self.max_speed, self.max_speed))
        x = state[0] + v * self.dt
        if x < -self.bound or x > self.bound:
            x = float(np.clip(x, -self.bound, self.bound))
            v = 0.0
        return np.array([x, v]), reward

    def sample_free_point(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-self.bound, self.bound)])

    def route(self, start_pos, goal_pos) -> list[np.ndarray]:
        return [np.asarray(goal_pos, dtype=np.float64)]

    def position(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state)[..., :1]


U_MAZE = ("...", ".#.", ".#.")

ENV_NAMES = ("pointmass-umaze", "pointmass-open", "integrator-1d")


def make_env(name: str, **overrides):
    if name == "pointmass-umaze":
        return PointMassEnv(name=name, layout=U_MAZE, **overrides)
    if name == "pointmass-open":
        return PointMassEnv(name=name, **overrides)
    if name == "integrator-1d":
        return IntegratorEnv(**overrides)
    raise TrajDiffError(f"unknown environment {name!r}; expected one of {', '.join(ENV_NAMES)}", name=name)


class WaypointPD:
    """Tracks randomly drawn targets through a route of waypoints with a PD law.

    After reaching a target (and slowing down) a new target is drawn, which
    gives undirected coverage of the free space.
    """

    def __init__(self, env, rng: np.random.Generator, kp: float = 8.0, kd: float = 4.0,
                 reach: float = 0.12, settle_speed: float = 0.15):
        self.env = env
        self.rng = rng
        self.kp, self.kd = kp, kd
        self.reach = reach
        self.settle_speed = settle_speed
        self.waypoints: list[np.ndarray] = []

    def __call__(self, state: np.ndarray) -> np.ndarray:
        dim = self.env.action_dim
        pos, vel = state[:dim], state[dim:]
        if not self.waypoints:
            self.waypoints = self.env.route(pos, self.env.sample_free_point(self.rng))
        target = self.waypoints[0]
        dist = np.linalg.norm(target - pos)
        final = len(self.waypoints) == 1
        if (not final and dist < self.reach) or (final and dist < self.reach / 2 and np.linalg.norm(vel) < self.settle_speed):
            self.waypoints.pop(0)
            if not self.waypoints:
                self.waypoints = self.env.route(pos, self.env.sample_free_point(self.rng))
            target = self.waypoints[0]
        a = self.kp * (target - pos) - self.kd * vel
        return np.clip(a, -self.env.max_accel, self.env.max_accel)


class RandomController:
    def __init__(self, env, rng: np.random.Generator):
        self.env = env
        self.rng = rng

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return self.rng.uniform(-self.env.max_accel, self.env.max_accel, size=self.env.action_dim)


def make_controller(kind: str, env, rng: np.random.Generator):
    if kind == "waypoint-pd":
        return WaypointPD(env, rng)
    if kind == "random":
        return RandomController(env, rng)
    raise TrajDiffError(f"unknown controller {kind!r}", kind=kind)


def track_action(env, state: np.ndarray, target: np.ndarray, planned_action: np.ndarray,
                 kp: float = 10.0, kd: float = 5.0) -> np.ndarray:
    """Planned action plus a PD correction toward the planned state."""
    dim = env.action_dim
    err_p = target[:dim] - state[:dim]
    err_v = target[dim:] - state[dim:]
    a = np.asarray(planned_action, dtype=np.float64) + kp * err_p + kd * err_v
    return np.clip(a, -env.max_accel, env.max_accel)

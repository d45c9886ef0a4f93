"""2D point-mass plane with scripted goal-reaching skills and task rewards.

Positions live in ``[-128, 128]^2`` and actions in ``[-10, 10]^2``. A skill code
``z`` in the unit hypercube picks a goal through an affine map onto the
workspace; the scripted policy is a saturated proportional controller toward
that goal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from irm.epic import Transitions

WORKSPACE = 128.0
REWARD_SCALE = 256.0


@dataclass(frozen=True)
class EnvConfig:
    """Episode settings.

    ``action_noise`` is the std of Gaussian noise added to scripted actions
    (before clamping); ``random_start`` draws each episode's start uniformly
    over the workspace instead of using ``start``.
    """

    horizon: int = 30
    start: tuple[float, float] = (0.0, 0.0)
    action_bound: float = 10.0
    bound: float = WORKSPACE
    action_noise: float = 0.0
    random_start: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.action_bound <= 0 or self.bound <= 0:
            raise ValueError("bounds must be positive")
        if self.action_noise < 0:
            raise ValueError("action_noise must be non-negative")

    @property
    def low(self) -> tuple[float, float]:
        return (-self.bound, -self.bound)

    @property
    def high(self) -> tuple[float, float]:
        return (self.bound, self.bound)


def step(state, action, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Move by the clamped action and clamp the result to the workspace."""
    action = np.clip(np.asarray(action, dtype=np.float64), -cfg.action_bound, cfg.action_bound)
    return np.clip(np.asarray(state, dtype=np.float64) + action, -cfg.bound, cfg.bound)


@dataclass(frozen=True)
class ScriptedSkillPolicy:
    """Proportional controller toward ``goal_map(z)``.

    For ``skill_dim == 2`` the goal map is coordinatewise affine. Higher
    dimensions first project ``z`` with a fixed row-stochastic ``2 x d`` matrix
    (seeded), which keeps the image inside the goal rectangle.
    """

    skill_dim: int = 2
    gain: float = 1.0
    goal_low: tuple[float, float] = (-WORKSPACE, -WORKSPACE)
    goal_high: tuple[float, float] = (WORKSPACE, WORKSPACE)
    projection_seed: int = 0
    projection: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.skill_dim < 1:
            raise ValueError("skill_dim must be positive")
        if self.skill_dim == 2:
            proj = np.eye(2)
        else:
            rng = np.random.default_rng(self.projection_seed)
            proj = rng.uniform(0.0, 1.0, size=(2, self.skill_dim))
            proj /= proj.sum(axis=1, keepdims=True)
        object.__setattr__(self, "projection", proj)

    def goal_map(self, z) -> np.ndarray:
        z = np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)
        if z.shape[-1] != self.skill_dim:
            raise ValueError(f"skill code has length {z.shape[-1]}, expected {self.skill_dim}")
        low, high = np.array(self.goal_low), np.array(self.goal_high)
        return low + (high - low) * (z @ self.projection.T)

    def action(self, state, z, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
        delta = self.gain * (self.goal_map(z) - np.asarray(state, dtype=np.float64))
        return np.clip(delta, -cfg.action_bound, cfg.action_bound)


def skill_policy_action(policy: ScriptedSkillPolicy, state, z, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    return policy.action(state, z, cfg)


def rollout_positions(
    policy: ScriptedSkillPolicy,
    skills,
    cfg: EnvConfig,
    rng: np.random.Generator | None = None,
    start=None,
) -> np.ndarray:
    """Simulate a batch of episodes; returns positions of shape ``(m, T + 1, 2)``.

    ``skills`` is ``(m, d)``, or ``(m, T, d)`` for a per-step skill schedule.
    ``start`` overrides the configured start (``(2,)`` or ``(m, 2)``).
    """
    skills = np.asarray(skills, dtype=np.float64)
    m = skills.shape[0]
    per_step = skills.ndim == 3
    if rng is None and (cfg.action_noise > 0 or cfg.random_start):
        raise ValueError("a random generator is required for noisy or random-start rollouts")
    if start is not None:
        pos = np.broadcast_to(np.asarray(start, dtype=np.float64), (m, 2)).copy()
    elif cfg.random_start:
        pos = rng.uniform(-cfg.bound, cfg.bound, size=(m, 2))
    else:
        pos = np.tile(np.asarray(cfg.start, dtype=np.float64), (m, 1))
    noise = rng.normal(0.0, cfg.action_noise, size=(m, cfg.horizon, 2)) if cfg.action_noise > 0 else None
    goals = policy.goal_map(skills)
    out = np.empty((m, cfg.horizon + 1, 2))
    out[:, 0] = pos
    for t in range(cfg.horizon):
        goal = goals[:, t] if per_step else goals
        action = policy.gain * (goal - pos)
        if noise is not None:
            action = action + noise[:, t]
        pos = step(pos, action, cfg)
        out[:, t + 1] = pos
    return out


def rollout(
    policy: ScriptedSkillPolicy,
    z,
    cfg: EnvConfig = EnvConfig(),
    rng: np.random.Generator | None = None,
    start=None,
) -> Transitions:
    """One episode of skill ``z`` as ``T`` transitions."""
    positions = rollout_positions(policy, np.asarray(z, dtype=np.float64)[None], cfg, rng, start)[0]
    return Transitions(positions[:-1], positions[1:])


def episode_returns(positions: np.ndarray, reward) -> np.ndarray:
    """Undiscounted return of each episode in a ``(m, T + 1, 2)`` batch."""
    m, t1, dim = positions.shape
    s = positions[:, :-1].reshape(-1, dim)
    s2 = positions[:, 1:].reshape(-1, dim)
    return np.asarray(reward(s, s2)).reshape(m, t1 - 1).sum(axis=1)


@dataclass(frozen=True)
class ShapedGoalReward:
    """Negative distance of the next state to ``goal``, divided by 256."""

    goal: tuple[float, float]

    def __call__(self, states, next_states) -> np.ndarray:
        return -np.linalg.norm(np.asarray(next_states) - np.asarray(self.goal), axis=-1) / REWARD_SCALE

    def to_dict(self) -> dict:
        return {"kind": "shaped", "goal": list(self.goal)}


@dataclass(frozen=True)
class SparseGoalReward:
    """1 when the next state is within ``tolerance`` of ``goal`` in unit-square scale."""

    goal: tuple[float, float]
    tolerance: float

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")

    def __call__(self, states, next_states) -> np.ndarray:
        dist = np.linalg.norm(np.asarray(next_states) - np.asarray(self.goal), axis=-1) / REWARD_SCALE
        return (dist <= self.tolerance).astype(np.float64)

    def to_dict(self) -> dict:
        return {"kind": "sparse", "goal": list(self.goal), "tolerance": self.tolerance}


@dataclass(frozen=True)
class ConstantReward:
    value: float = 0.0

    def __call__(self, states, next_states) -> np.ndarray:
        return np.full(np.shape(next_states)[0], float(self.value))

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": self.value}


def shaped_goal_reward(goal) -> ShapedGoalReward:
    _check_goal(goal)
    return ShapedGoalReward(tuple(float(g) for g in goal))


def sparse_goal_reward(goal, tolerance: float) -> SparseGoalReward:
    _check_goal(goal)
    return SparseGoalReward(tuple(float(g) for g in goal), float(tolerance))


def _check_goal(goal) -> None:
    if len(goal) != 2 or any(abs(float(g)) > WORKSPACE for g in goal):
        raise ValueError(f"goal {goal} is not a point of the workspace")


def reward_from_dict(data: dict):
    kind = data.get("kind")
    if kind == "shaped":
        return shaped_goal_reward(data["goal"])
    if kind == "sparse":
        return sparse_goal_reward(data["goal"], data["tolerance"])
    if kind == "constant":
        return ConstantReward(data.get("value", 0.0))
    raise ValueError(f"unknown reward kind {kind!r}")


def partition_horizon(horizon: int, n: int) -> list[tuple[int, int]]:
    """Split ``[0, horizon)`` into ``n`` segments of ``horizon // n`` steps; the last absorbs the rest."""
    if n < 1:
        raise ValueError("need at least one segment")
    if n > horizon:
        raise ValueError(f"cannot split a horizon of {horizon} into {n} segments")
    length = horizon // n
    bounds = [(k * length, (k + 1) * length) for k in range(n)]
    bounds[-1] = (bounds[-1][0], horizon)
    return bounds


@dataclass(frozen=True)
class WaypointTask:
    goals: tuple[tuple[float, float], ...]
    horizon: int = 50
    kind: str = "shaped"
    tolerance: float = 0.05

    def __post_init__(self):
        if len(self.goals) < 1:
            raise ValueError("need at least one waypoint")
        if len(self.goals) > self.horizon:
            raise ValueError("more waypoints than steps")

    def rewards(self) -> list:
        if self.kind == "shaped":
            return [shaped_goal_reward(g) for g in self.goals]
        if self.kind == "sparse":
            return [sparse_goal_reward(g, self.tolerance) for g in self.goals]
        raise ValueError(f"unknown reward kind {self.kind!r}")

    def segments(self) -> list[tuple[int, int]]:
        return partition_horizon(self.horizon, len(self.goals))


def waypoint_reward_schedule(task: WaypointTask, t: int):
    """Reward active at step ``t`` of the task."""
    if not 0 <= t < task.horizon:
        raise ValueError(f"step {t} outside [0, {task.horizon})")
    length = task.horizon // len(task.goals)
    return task.rewards()[min(t // length, len(task.goals) - 1)]


def write_trajectories_csv(path, positions: np.ndarray, skills: np.ndarray) -> None:
    """Dump ``(m, T + 1, 2)`` positions with their ``(m, d)`` skills to CSV."""
    skills = np.asarray(skills, dtype=np.float64)
    d = skills.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "t", "x", "y", "x_next", "y_next", *[f"z_{k}" for k in range(d)]])
        for ep in range(positions.shape[0]):
            for t in range(positions.shape[1] - 1):
                s, s2 = positions[ep, t], positions[ep, t + 1]
                writer.writerow([ep, t, *map(repr, map(float, (*s, *s2))), *map(repr, map(float, skills[ep]))])


def read_trajectories_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    episodes = sorted({int(r["episode"]) for r in rows})
    zcols = [k for k in rows[0] if k.startswith("z_")] if rows else []
    by_ep: dict[int, list[dict]] = {e: [] for e in episodes}
    for r in rows:
        by_ep[int(r["episode"])].append(r)
    positions, skills = [], []
    for e in episodes:
        ep_rows = sorted(by_ep[e], key=lambda r: int(r["t"]))
        pts = [[float(ep_rows[0]["x"]), float(ep_rows[0]["y"])]]
        pts += [[float(r["x_next"]), float(r["y_next"])] for r in ep_rows]
        positions.append(pts)
        skills.append([float(ep_rows[0][k]) for k in zcols])
    return np.array(positions), np.array(skills)


def skill_grid(resolution: int) -> np.ndarray:
    """``resolution**2`` skills on a regular grid of ``[0, 1]^2`` (row-major in z0)."""
    axis = np.linspace(0.0, 1.0, resolution)
    z0, z1 = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([z0.ravel(), z1.ravel()], axis=1)


def quadrant(point: Sequence[float]) -> tuple[int, int]:
    return (int(np.sign(point[0])), int(np.sign(point[1])))

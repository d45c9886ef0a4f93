"""Skill sequencing for a list of rewards over one horizon.

The horizon is cut into ``H // N`` step segments, one per reward. The first
skill is picked from the configured (environment-free) samples. Each later
skill is picked against transitions from the latter half of a rollout of the
skills already committed, so the comparison happens where the agent will
actually be when the switch occurs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from irm.discriminators import Discriminator
from irm.epic import Samples, Transitions, perturbed_canonical
from irm.planar import EnvConfig, ScriptedSkillPolicy, partition_horizon, reward_from_dict, rollout_positions
from irm.rng import stream
from irm.selection import IRM_METHODS, SelectionConfig, select

__all__ = [
    "Segment",
    "SequencePlan",
    "partition_horizon",
    "plan_schedule",
    "sequential_select",
    "env_sequential_baseline",
    "sequential_eval",
    "reversed_plan",
    "random_plan",
    "latter_half",
]


@dataclass
class Segment:
    start: int
    end: int
    reward: object
    z: np.ndarray
    loss: float | None = None

    @property
    def length(self) -> int:
        return self.end - self.start

    def to_dict(self) -> dict:
        reward = self.reward.to_dict() if hasattr(self.reward, "to_dict") else repr(self.reward)
        return {
            "start": self.start,
            "end": self.end,
            "reward": reward,
            "z": [float(v) for v in self.z],
            "loss": None if self.loss is None else float(self.loss),
        }


@dataclass
class SequencePlan:
    method: str
    segments: list[Segment]
    env_steps: int = 0
    seed: int = 0
    segment_returns: list[float] | None = None
    total_return: float | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        bounds = [(s.start, s.end) for s in self.segments]
        if not bounds or bounds[0][0] != 0 or any(a[1] != b[0] for a, b in zip(bounds, bounds[1:])):
            raise ValueError(f"segments must tile [0, H) without gaps: {bounds}")

    @property
    def horizon(self) -> int:
        return self.segments[-1].end

    @property
    def skills(self) -> np.ndarray:
        return np.stack([s.z for s in self.segments])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "env_steps": self.env_steps,
            "horizon": self.horizon,
            "segments": [s.to_dict() for s in self.segments],
            "segment_returns": self.segment_returns,
            "total_return": self.total_return,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SequencePlan":
        segments = [
            Segment(s["start"], s["end"], reward_from_dict(s["reward"]), np.asarray(s["z"], dtype=np.float64), s["loss"])
            for s in data["segments"]
        ]
        return cls(data["method"], segments, data["env_steps"], data["seed"],
                   data.get("segment_returns"), data.get("total_return"), data.get("notes", {}))


def plan_schedule(segments: list[Segment], horizon: int | None = None) -> np.ndarray:
    """Per-step skill schedule ``(T, d)`` for the first ``horizon`` steps of a plan."""
    horizon = segments[-1].end if horizon is None else horizon
    schedule = np.empty((horizon, len(segments[0].z)))
    for seg in segments:
        lo, hi = seg.start, min(seg.end, horizon)
        if lo < hi:
            schedule[lo:hi] = seg.z
    return schedule


def latter_half(positions: np.ndarray) -> Transitions:
    """Transitions from the last ``ceil(L / 2)`` steps of each ``(m, L + 1, 2)`` rollout."""
    length = positions.shape[1] - 1
    keep = math.ceil(length / 2)
    tail = positions[:, length - keep :]
    return Transitions(tail[:, :-1].reshape(-1, 2), tail[:, 1:].reshape(-1, 2))


def _reward_list(rewards) -> list:
    rewards = list(rewards)
    if not rewards:
        raise ValueError("need at least one reward")
    return rewards


def sequential_select(
    disc: Discriminator,
    rewards,
    policy: ScriptedSkillPolicy,
    env: EnvConfig,
    method: str = "irm_cem",
    cfg: SelectionConfig = SelectionConfig(),
    prefix_rollouts: int = 1,
    canonical_sigma: float = 1.0,
) -> SequencePlan:
    """Pick one skill per reward, committing to each before picking the next.

    ``env.horizon`` is the full task horizon. The first skill is selected
    exactly as single-task selection would select it. Later skills use the
    latter half of ``prefix_rollouts`` rollouts of the committed prefix as the
    Pearson batch and Gaussian jitter (std ``canonical_sigma``) of those
    transitions as the canonical batch.
    """
    if method not in IRM_METHODS:
        raise ValueError(f"sequential selection needs an IRM method, got {method!r}")
    if prefix_rollouts < 1:
        raise ValueError("prefix_rollouts must be positive")
    rewards = _reward_list(rewards)
    bounds = partition_horizon(env.horizon, len(rewards))
    first = select(method, rewards[0], cfg, disc)
    segments = [Segment(bounds[0][0], bounds[0][1], rewards[0], first.z, first.loss)]
    env_steps = 0
    pearson_counts = []
    for k in range(1, len(rewards)):
        start, end = bounds[k]
        if start < 2:
            raise ValueError(f"prefix rollout of {start} steps is too short to supply Pearson samples")
        prefix_env = replace(env, horizon=start)
        schedule = np.broadcast_to(plan_schedule(segments, start), (prefix_rollouts, start, disc.skill_dim))
        positions = rollout_positions(policy, schedule, prefix_env, stream(cfg.seed, f"sequence_prefix_{k}"))
        env_steps += prefix_rollouts * start
        pearson = latter_half(positions)
        pearson_counts.append(len(pearson))
        canon_rng = stream(cfg.seed, f"sequence_canonical_{k}")
        canonical = perturbed_canonical(pearson, cfg.sample_spec.n_canonical, canonical_sigma, canon_rng)
        samples = Samples(pearson, canonical, cfg.sample_spec.gamma)
        report = select(method, rewards[k], cfg, disc, samples=samples)
        segments.append(Segment(start, end, rewards[k], report.z, report.loss))
    notes = {"pearson_counts": pearson_counts, "prefix_rollouts": prefix_rollouts, "canonical_sigma": canonical_sigma}
    return SequencePlan(f"seq_{method}", segments, env_steps, cfg.seed, notes=notes)


def env_sequential_baseline(
    policy: ScriptedSkillPolicy,
    rewards,
    env: EnvConfig,
    cfg: SelectionConfig = SelectionConfig(),
    budget: int = 10,
) -> SequencePlan:
    """Per segment, roll out ``budget // N`` random skills from the segment's start and keep the best.

    Candidates are scored on their own segment only. The next segment starts
    where the committed candidate's rollout ended, so no extra steps are spent.
    """
    rewards = _reward_list(rewards)
    bounds = partition_horizon(env.horizon, len(rewards))
    n_candidates = budget // len(rewards)
    if n_candidates < 1:
        raise ValueError(f"a budget of {budget} rollouts cannot cover {len(rewards)} segments")
    start_state = np.asarray(env.start, dtype=np.float64)
    segments, env_steps = [], 0
    candidate_returns = []
    for k, ((lo, hi), reward) in enumerate(zip(bounds, rewards)):
        seg_env = replace(env, horizon=hi - lo, random_start=False)
        cands = stream(cfg.seed, f"env_seq_candidates_{k}").random((n_candidates, policy.skill_dim))
        positions = rollout_positions(policy, cands, seg_env, stream(cfg.seed, f"env_seq_rollouts_{k}"), start_state)
        returns = _segment_returns(positions, reward)
        env_steps += n_candidates * (hi - lo)
        best = int(np.argmax(returns))
        candidate_returns.append([float(r) for r in returns])
        segments.append(Segment(lo, hi, reward, cands[best], None))
        start_state = positions[best, -1]
    notes = {"candidates_per_segment": n_candidates, "candidate_returns": candidate_returns}
    return SequencePlan("env_seq", segments, env_steps, cfg.seed, notes=notes)


def _segment_returns(positions: np.ndarray, reward) -> np.ndarray:
    m, t1, dim = positions.shape
    values = reward(positions[:, :-1].reshape(-1, dim), positions[:, 1:].reshape(-1, dim))
    return np.asarray(values, dtype=np.float64).reshape(m, t1 - 1).sum(axis=1)


def sequential_eval(
    plan: SequencePlan,
    policy: ScriptedSkillPolicy,
    env: EnvConfig,
    seed: int = 0,
    episodes: int = 1,
) -> tuple[float, list[float]]:
    """Run the plan for its full horizon; returns the total and per-segment mean returns.

    With one segment this reproduces ``zero_shot_eval`` draw for draw.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    run_env = replace(env, horizon=plan.horizon)
    schedule = np.broadcast_to(plan_schedule(plan.segments), (episodes, plan.horizon, plan.segments[0].z.shape[0]))
    positions = rollout_positions(policy, schedule, run_env, stream(seed, "zero_shot"))
    per_segment = []
    for seg in plan.segments:
        piece = positions[:, seg.start : seg.end + 1]
        per_segment.append(float(np.mean(_segment_returns(piece, seg.reward))))
    return float(sum(per_segment)), per_segment


def reversed_plan(plan: SequencePlan) -> SequencePlan:
    """Same segments and rewards with the chosen skills in reverse order."""
    zs = [s.z for s in plan.segments][::-1]
    segments = [Segment(s.start, s.end, s.reward, z, None) for s, z in zip(plan.segments, zs)]
    return SequencePlan(plan.method + "_reversed", segments, plan.env_steps, plan.seed)


def random_plan(rewards, horizon: int, skill_dim: int, seed: int = 0) -> SequencePlan:
    """One uniform random skill per segment (no selection at all)."""
    rewards = _reward_list(rewards)
    bounds = partition_horizon(horizon, len(rewards))
    zs = stream(seed, "random_plan").random((len(rewards), skill_dim))
    segments = [Segment(lo, hi, r, z, None) for (lo, hi), r, z in zip(bounds, rewards, zs)]
    return SequencePlan("random_skill", segments, 0, seed)

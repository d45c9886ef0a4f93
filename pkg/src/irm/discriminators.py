"""Skill discriminators: the learned multitask intrinsic reward ``q(tau, z)``.

Two families are provided. The contrastive one scores a transition against a
skill by the inner product of two embeddings and is trained with a
CPC-style contrastive bound. The predictive one models the skill-conditioned
displacement with a unit-variance Gaussian and scores by log-density.
"""

from __future__ import annotations

import io
import json
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from irm import autodiff as ad
from irm.epic import Transitions
from irm.planar import EnvConfig, ScriptedSkillPolicy, episode_returns, rollout_positions

CHECKPOINT_FORMAT = "irm-discriminator"
CHECKPOINT_VERSION = 1


def clamp_skill(z, skill_dim: int | None = None) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)
    if skill_dim is not None and z.shape[-1] != skill_dim:
        raise ValueError(f"skill code has length {z.shape[-1]}, expected {skill_dim}")
    return z


def transition_features(states, next_states, state_scale: float, delta_scale: float):
    """``concat(s, s' - s)`` with each part divided by its scale."""
    s = np.asarray(states, dtype=np.float64)
    s2 = np.asarray(next_states, dtype=np.float64)
    return np.concatenate([s / state_scale, (s2 - s) / delta_scale], axis=-1)


@dataclass
class ContrastiveDiscriminator:
    transition_encoder: ad.Mlp
    skill_encoder: ad.Mlp
    state_scale: float = 128.0
    delta_scale: float = 10.0
    metadata: dict = field(default_factory=dict)

    family = "contrastive"

    def __post_init__(self):
        if self.transition_encoder.output_dim != self.skill_encoder.output_dim:
            raise ValueError("transition and skill embeddings must have the same width")

    @classmethod
    def init(
        cls,
        state_dim: int,
        skill_dim: int,
        rng: np.random.Generator,
        embed_dim: int = 16,
        hidden_dims: Sequence[int] = (64, 64),
        **kwargs,
    ) -> "ContrastiveDiscriminator":
        return cls(
            ad.Mlp.init(2 * state_dim, embed_dim, hidden_dims, rng),
            ad.Mlp.init(skill_dim, embed_dim, hidden_dims, rng),
            **kwargs,
        )

    @property
    def state_dim(self) -> int:
        return self.transition_encoder.input_dim // 2

    @property
    def skill_dim(self) -> int:
        return self.skill_encoder.input_dim

    @property
    def embed_dim(self) -> int:
        return self.skill_encoder.output_dim

    def _features(self, states, next_states) -> np.ndarray:
        feats = transition_features(states, next_states, self.state_scale, self.delta_scale)
        if feats.shape[-1] != self.transition_encoder.input_dim:
            raise ValueError(f"states must have dimension {self.state_dim}")
        return feats

    def embed_transitions(self, states, next_states) -> np.ndarray:
        return self.transition_encoder(self._features(states, next_states))

    def embed_skills(self, z) -> np.ndarray:
        return self.skill_encoder(clamp_skill(z, self.skill_dim))

    def intrinsic_reward(self, states, next_states, z) -> np.ndarray:
        """``q(tau, z)`` for every transition; ``z`` may be a batch ``(m, d)`` giving ``(n, m)``."""
        emb = self.embed_transitions(states, next_states)
        return emb @ self.embed_skills(z).T

    def reward_fn(self, z):
        z = clamp_skill(z, self.skill_dim)
        return lambda s, s2: self.intrinsic_reward(s, s2, z)

    def q_matrix(self, states, next_states, skills) -> ad.Node:
        """Graph node with entry ``[j, i] = q(tau_j, z_i)``."""
        f = self.transition_encoder.forward(self._features(states, next_states))
        g = self.skill_encoder.forward(clamp_skill(skills, self.skill_dim))
        return ad.matmul(f, ad.transpose(g))

    @property
    def params(self) -> list[ad.Node]:
        return self.transition_encoder.params + self.skill_encoder.params

    def copy(self) -> "ContrastiveDiscriminator":
        return ContrastiveDiscriminator(
            self.transition_encoder.copy(), self.skill_encoder.copy(), self.state_scale, self.delta_scale, dict(self.metadata)
        )

    def networks(self) -> dict[str, ad.Mlp]:
        return {"transition_encoder": self.transition_encoder, "skill_encoder": self.skill_encoder}


@dataclass
class PredictiveDiscriminator:
    delta_predictor: ad.Mlp
    log_variance: float = 0.0
    state_scale: float = 128.0
    delta_scale: float = 10.0
    metadata: dict = field(default_factory=dict)

    family = "predictive"

    @classmethod
    def init(
        cls,
        state_dim: int,
        skill_dim: int,
        rng: np.random.Generator,
        hidden_dims: Sequence[int] = (64, 64),
        **kwargs,
    ) -> "PredictiveDiscriminator":
        return cls(ad.Mlp.init(state_dim + skill_dim, state_dim, hidden_dims, rng), **kwargs)

    @property
    def state_dim(self) -> int:
        return self.delta_predictor.output_dim

    @property
    def skill_dim(self) -> int:
        return self.delta_predictor.input_dim - self.state_dim

    def _inputs(self, states, z) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if s.shape[-1] != self.state_dim:
            raise ValueError(f"states must have dimension {self.state_dim}")
        z = clamp_skill(z, self.skill_dim)
        z = np.broadcast_to(z, (len(s), self.skill_dim))
        return np.concatenate([s / self.state_scale, z], axis=-1)

    def predict_delta(self, states, z) -> np.ndarray:
        """Predicted mean displacement, in workspace units."""
        return self.delta_predictor(self._inputs(states, z)) * self.delta_scale

    def log_density(self, states, next_states, z, normalized: bool = False) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        delta = np.atleast_2d(np.asarray(next_states, dtype=np.float64)) - s
        err = (delta - self.predict_delta(s, z)) / self.delta_scale
        out = -0.5 * np.sum(err * err, axis=-1) * np.exp(-self.log_variance)
        if normalized:
            out = out - 0.5 * self.state_dim * (np.log(2 * np.pi) + self.log_variance)
        return out

    def intrinsic_reward(self, states, next_states, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            return self.log_density(states, next_states, z)
        return np.stack([self.log_density(states, next_states, zk) for zk in z], axis=1)

    def reward_fn(self, z):
        z = clamp_skill(z, self.skill_dim)
        return lambda s, s2: self.log_density(s, s2, z)

    def predict_delta_node(self, states, z) -> ad.Node:
        """Differentiable predicted displacement (normalized units) for skill node ``z``."""
        s = np.atleast_2d(np.asarray(states, dtype=np.float64)) / self.state_scale
        z = ad.as_node(z)
        inputs = ad.concat([ad.constant(s), ad.broadcast_rows(z, len(s))], axis=1)
        return self.delta_predictor.forward(inputs)

    @property
    def params(self) -> list[ad.Node]:
        return self.delta_predictor.params

    def copy(self) -> "PredictiveDiscriminator":
        return PredictiveDiscriminator(
            self.delta_predictor.copy(), self.log_variance, self.state_scale, self.delta_scale, dict(self.metadata)
        )

    def networks(self) -> dict[str, ad.Mlp]:
        return {"delta_predictor": self.delta_predictor}


Discriminator = ContrastiveDiscriminator | PredictiveDiscriminator


def intrinsic_reward(disc: Discriminator, states, next_states, z) -> np.ndarray:
    return disc.intrinsic_reward(states, next_states, z)


def dads_reward_from_log_densities(log_q, log_q_negatives) -> float:
    """``log q / sum_i q_i + log L`` from log-densities, computed stably."""
    log_q_negatives = np.asarray(log_q_negatives, dtype=np.float64)
    if log_q_negatives.size < 1:
        raise ValueError("need at least one negative skill")
    top = log_q_negatives.max()
    lse = top + np.log(np.sum(np.exp(log_q_negatives - top)))
    return float(log_q - lse + np.log(log_q_negatives.size))


def dads_full_reward(disc: PredictiveDiscriminator, state, next_state, z, negatives: Sequence) -> float:
    """Full DADS reward of one transition, normalizing against ``negatives``."""
    if len(negatives) < 1:
        raise ValueError("need at least one negative skill")
    s, s2 = np.atleast_2d(state), np.atleast_2d(next_state)
    log_q = disc.log_density(s, s2, z, normalized=True)[0]
    log_neg = [disc.log_density(s, s2, zi, normalized=True)[0] for zi in negatives]
    return dads_reward_from_log_densities(log_q, log_neg)


class DuplicatePointWarning(RuntimeWarning):
    pass


def particle_entropy(points, k: int = 1) -> float:
    """Sum of log distances from each point to its k-th nearest neighbour.

    Zero distances are clamped to 1e-12 with a :class:`DuplicatePointWarning`.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if not 1 <= k < len(pts):
        raise ValueError(f"need 1 <= k < number of points, got k={k}, n={len(pts)}")
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    kth = dist[:, k]
    if np.any(kth <= 0):
        warnings.warn("duplicate points give zero k-NN distance; clamped to 1e-12", DuplicatePointWarning)
        kth = np.maximum(kth, 1e-12)
    return float(np.sum(np.log(kth)))


@dataclass
class RolloutBuffer:
    """Per-episode skills ``(m, d)``, positions ``(m, T + 1, dim)`` and reward slots."""

    skills: np.ndarray
    positions: np.ndarray
    rewards: np.ndarray | None = None

    def __post_init__(self):
        self.skills = np.atleast_2d(np.asarray(self.skills, dtype=np.float64))
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[1] < 2:
            raise ValueError("positions must be (episodes, T + 1, dim) with T >= 1")
        if len(self.skills) != len(self.positions):
            raise ValueError("every trajectory needs exactly one skill")

    def __len__(self) -> int:
        return len(self.skills)

    @property
    def horizon(self) -> int:
        return self.positions.shape[1] - 1

    def transitions(self) -> tuple[Transitions, np.ndarray]:
        """All transitions and the episode index of each."""
        m, t1, dim = self.positions.shape
        trans = Transitions(self.positions[:, :-1].reshape(-1, dim), self.positions[:, 1:].reshape(-1, dim))
        return trans, np.repeat(np.arange(m), t1 - 1)

    def distinct_skills(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique skills in order of first appearance, and each episode's group index."""
        groups: dict[bytes, int] = {}
        inverse = np.empty(len(self), dtype=int)
        for i, z in enumerate(self.skills):
            inverse[i] = groups.setdefault(z.tobytes(), len(groups))
        firsts = {v: k for k, v in groups.items()}
        uniq = np.array([np.frombuffer(firsts[g]) for g in range(len(groups))])
        return uniq, inverse

    def save(self, path) -> None:
        """Write an ``.npz`` archive; entries carry a fixed timestamp so reruns give identical bytes."""
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as archive:
            for name, array in (("skills", self.skills), ("positions", self.positions)):
                payload = io.BytesIO()
                np.lib.format.write_array(payload, np.ascontiguousarray(array), allow_pickle=False)
                archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), payload.getvalue())

    @classmethod
    def load(cls, path) -> "RolloutBuffer":
        with np.load(path) as data:
            return cls(data["skills"], data["positions"])


def collect_buffer(
    policy: ScriptedSkillPolicy,
    skills,
    cfg: EnvConfig,
    rng: np.random.Generator,
    episodes_per_skill: int = 1,
) -> RolloutBuffer:
    skills = np.repeat(np.atleast_2d(skills), episodes_per_skill, axis=0)
    return RolloutBuffer(skills, rollout_positions(policy, skills, cfg, rng))


def contrastive_loss(q: ad.Node) -> ad.Node:
    """Negative contrastive bound for a square score matrix ``q[j, i] = q(tau_j, z_i)``.

    Per column ``i``: ``q_ii - log(mean_j exp(q_ji))``; the loss is minus the
    mean over columns.
    """
    n = q.shape[0]
    if q.value.ndim != 2 or q.shape[1] != n:
        raise ValueError("score matrix must be square")
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    positives = ad.sum(q * np.eye(n), axis=0)
    bound = positives - ad.logsumexp(q, axis=0) + np.log(n)
    return -ad.mean(bound)


def _adam_fit(params: list[ad.Node], loss_fn, steps: int, lr: float) -> list[float]:
    state = ad.AdamState(lr=lr)
    names = [p.name or f"#{k}" for k, p in enumerate(params)]
    losses = []
    for _ in range(steps):
        loss = loss_fn()
        grads = ad.backward(loss)
        values, state = ad.adam_step(
            [p.value for p in params], [grads.get(p, np.zeros_like(p.value)) for p in params], state, names
        )
        for p, v in zip(params, values):
            p.value = v
        losses.append(float(loss.value))
    return losses


def train_contrastive(
    disc: ContrastiveDiscriminator,
    buffer: RolloutBuffer,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 256,
    lr: float = 1e-3,
) -> tuple[ContrastiveDiscriminator, list[float]]:
    """Fit the contrastive discriminator on buffer transitions; the input is not modified."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    if len(buffer.distinct_skills()[0]) < 2:
        raise ValueError("contrastive training needs at least two distinct skills")
    out = disc.copy()
    trans, episode = buffer.transitions()

    def loss_fn():
        idx = rng.integers(0, len(trans), size=batch_size)
        q = out.q_matrix(trans.states[idx], trans.next_states[idx], buffer.skills[episode[idx]])
        return contrastive_loss(q)

    losses = _adam_fit(out.params, loss_fn, steps, lr)
    out.metadata = {**out.metadata, "steps": out.metadata.get("steps", 0) + steps}
    return out, losses


def train_predictive(
    disc: PredictiveDiscriminator,
    buffer: RolloutBuffer,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 256,
    lr: float = 1e-3,
) -> tuple[PredictiveDiscriminator, list[float]]:
    """Regress the skill-conditioned displacement (maximizes the unit-variance log-likelihood)."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    out = disc.copy()
    trans, episode = buffer.transitions()
    s_in = trans.states / out.state_scale
    target = (trans.next_states - trans.states) / out.delta_scale

    def loss_fn():
        idx = rng.integers(0, len(trans), size=batch_size)
        inputs = np.concatenate([s_in[idx], buffer.skills[episode[idx]]], axis=1)
        err = out.delta_predictor.forward(inputs) - target[idx]
        return ad.mean(ad.sum(ad.square(err), axis=1))

    losses = _adam_fit(out.params, loss_fn, steps, lr)
    out.metadata = {**out.metadata, "steps": out.metadata.get("steps", 0) + steps}
    return out, losses


def train(disc: Discriminator, buffer: RolloutBuffer, steps: int, rng: np.random.Generator, **kwargs):
    if isinstance(disc, ContrastiveDiscriminator):
        return train_contrastive(disc, buffer, steps, rng, **kwargs)
    return train_predictive(disc, buffer, steps, rng, **kwargs)


def contrastive_ranking_accuracy(disc: ContrastiveDiscriminator, trans: Transitions, skills: np.ndarray) -> float:
    """Fraction of skills whose own transition scores highest among the batch."""
    q = disc.intrinsic_reward(trans.states, trans.next_states, skills)
    return float(np.mean(np.argmax(q, axis=0) == np.arange(len(skills))))


def contrastive_margin(disc: ContrastiveDiscriminator, trans: Transitions, skills: np.ndarray) -> float:
    """Mean positive-pair score minus mean score against other skills."""
    q = disc.intrinsic_reward(trans.states, trans.next_states, skills)
    n = len(skills)
    pos = np.mean(np.diag(q))
    neg = (q.sum() - np.trace(q)) / (n * n - n)
    return float(pos - neg)


@dataclass(frozen=True)
class RelabelResult:
    skills: np.ndarray
    mean_returns: np.ndarray
    best_index: int

    @property
    def best_skill(self) -> np.ndarray:
        return self.skills[self.best_index]


def relabel_buffer(buffer: RolloutBuffer, reward) -> RelabelResult:
    """Score saved rollouts with ``reward``; best skill by mean return (lowest index on ties)."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    m, t1, dim = buffer.positions.shape
    s = buffer.positions[:, :-1].reshape(-1, dim)
    s2 = buffer.positions[:, 1:].reshape(-1, dim)
    buffer.rewards = np.asarray(reward(s, s2), dtype=np.float64).reshape(m, t1 - 1)
    returns = buffer.rewards.sum(axis=1)
    uniq, inverse = buffer.distinct_skills()
    means = np.array([returns[inverse == g].mean() for g in range(len(uniq))])
    return RelabelResult(uniq, means, int(np.argmax(means)))


def to_dict(disc: Discriminator) -> dict:
    dims = {"state_dim": disc.state_dim, "skill_dim": disc.skill_dim}
    if isinstance(disc, ContrastiveDiscriminator):
        dims["embed_dim"] = disc.embed_dim
    extra = {"log_variance": disc.log_variance} if isinstance(disc, PredictiveDiscriminator) else {}
    meta = {"seed": None, "steps": 0, "created_at": None, **disc.metadata}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "family": disc.family,
        "dims": dims,
        "state_scale": disc.state_scale,
        "delta_scale": disc.delta_scale,
        **extra,
        "networks": {name: net.to_dict() for name, net in disc.networks().items()},
        "metadata": meta,
    }


def from_dict(data: dict) -> Discriminator:
    if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a version-1 discriminator checkpoint")
    nets = {name: ad.Mlp.from_dict(net) for name, net in data["networks"].items()}
    common = {
        "state_scale": float(data["state_scale"]),
        "delta_scale": float(data["delta_scale"]),
        "metadata": dict(data.get("metadata", {})),
    }
    if data["family"] == "contrastive":
        return ContrastiveDiscriminator(nets["transition_encoder"], nets["skill_encoder"], **common)
    if data["family"] == "predictive":
        return PredictiveDiscriminator(nets["delta_predictor"], float(data["log_variance"]), **common)
    raise ValueError(f"unknown discriminator family {data['family']!r}")


def dumps(disc: Discriminator) -> str:
    return json.dumps(to_dict(disc), sort_keys=True)


def save_checkpoint(disc: Discriminator, path) -> None:
    Path(path).write_text(dumps(disc))


def load_checkpoint(path) -> Discriminator:
    return from_dict(json.loads(Path(path).read_text()))


def buffer_returns(buffer: RolloutBuffer, reward) -> np.ndarray:
    return episode_returns(buffer.positions, reward)

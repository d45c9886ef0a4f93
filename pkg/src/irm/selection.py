"""Single-task skill selection.

The IRM methods pick a skill by minimizing the EPIC loss between the
discriminator's intrinsic reward and the task reward, without touching the
environment. The baselines pick by episode return from environment rollouts
(or from saved pretraining rollouts, for relabeling).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from irm import autodiff as ad
from irm import epic
from irm.discriminators import (
    ContrastiveDiscriminator,
    Discriminator,
    PredictiveDiscriminator,
    RolloutBuffer,
    relabel_buffer,
)
from irm.epic import SampleSpec, Samples, canonicalize, draw_samples
from irm.planar import EnvConfig, ScriptedSkillPolicy, episode_returns, rollout_positions
from irm.rng import stream

IRM_METHODS = ("irm_random", "irm_cem", "irm_gd")
BASELINES = ("grid_search", "env_rollout", "env_rollout_cem", "relabel", "random_skill")
METHODS = IRM_METHODS + BASELINES
METRICS = ("epic",) + epic.ABLATION_KINDS


@dataclass(frozen=True)
class SelectionConfig:
    """Budgets for every method. CEM and GD defaults follow the published IRM settings."""

    method: str = "irm_cem"
    seed: int = 0
    sample_spec: SampleSpec = field(default_factory=SampleSpec)
    metric: str = "epic"
    resample: bool = False
    n_random: int = 100
    cem_iterations: int = 5
    cem_samples: int = 1000
    cem_elites: int = 100
    cem_init_std: float = 0.3
    gd_steps: int = 5000
    gd_lr: float = 5e-3
    gd_init: float = 0.5
    grid_points: int = 10
    env_candidates: int = 10
    env_cem_iterations: int = 5
    env_cem_samples: int = 32
    env_cem_elites: int = 4
    eval_episodes: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        positive = (
            "n_random", "cem_iterations", "cem_samples", "cem_elites", "gd_steps", "grid_points",
            "env_candidates", "env_cem_iterations", "env_cem_samples", "env_cem_elites", "eval_episodes",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.cem_elites >= self.cem_samples or self.env_cem_elites >= self.env_cem_samples:
            raise ValueError("CEM needs fewer elites than samples")
        if self.gd_lr <= 0 or self.cem_init_std <= 0:
            raise ValueError("learning rate and CEM std must be positive")


@dataclass
class SelectionReport:
    method: str
    z: np.ndarray
    loss: float | None
    trace: list[dict]
    env_steps: int
    zero_shot_return: float | None = None
    wall_time: float = 0.0
    loss_evaluations: int = 0
    metric: str = "epic"
    seed: int = 0

    def to_dict(self, timing: bool = True) -> dict:
        """Plain-JSON form; ``timing=False`` drops the wall time so files are reproducible."""
        out = asdict(self)
        out["z"] = [float(v) for v in self.z]
        if not timing:
            out.pop("wall_time")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_trace_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "best_loss", "mean_loss"])
            for row in self.trace:
                writer.writerow([row["iteration"], repr(float(row["best_loss"])), repr(float(row["mean_loss"]))])


class MatchingObjective:
    """EPIC (or ablation) loss of ``R_int(., z)`` against a task reward on fixed samples.

    Canonicalization is linear in the reward, so for the contrastive family the
    canonicalized transition embeddings are computed once and every candidate
    skill costs one matrix-vector product. The predictive family's canonical
    expectations reduce to first and second moments of the canonical batch.
    """

    def __init__(self, disc: Discriminator, reward, samples: Samples, metric: str = "epic", features=None):
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        self.disc = disc
        self.reward = reward
        self.samples = samples
        self.metric = metric
        self.evaluations = 0
        p, c = samples.pearson, samples.canonical
        if metric == "epic":
            self.target = canonicalize(reward, p.states, p.next_states, c.states, c.next_states, samples.gamma)
        else:
            self.target = np.asarray(reward(p.states, p.next_states), dtype=np.float64)
        if isinstance(disc, ContrastiveDiscriminator):
            self.features = features if features is not None else transition_features_for(disc, samples, metric)

    # values of the (canonicalized or raw) intrinsic reward, one column per skill
    def intrinsic_values(self, skills) -> np.ndarray:
        skills = np.atleast_2d(skills)
        if isinstance(self.disc, ContrastiveDiscriminator):
            return self.features @ self.disc.embed_skills(skills).T
        p = self.samples.pearson
        if self.metric != "epic":
            return self.disc.intrinsic_reward(p.states, p.next_states, skills)
        return np.stack([self._predictive_canonical(z) for z in skills], axis=1)

    def _predictive_parts(self, z):
        disc: PredictiveDiscriminator = self.disc
        p, c = self.samples.pearson, self.samples.canonical
        coef = np.exp(-disc.log_variance) / disc.delta_scale**2
        return disc, p, c, coef

    def _predictive_canonical(self, z) -> np.ndarray:
        disc, p, c, coef = self._predictive_parts(z)
        gamma = self.samples.gamma
        m1 = c.next_states.mean(axis=0)
        m2 = np.mean(np.sum(c.next_states**2, axis=1))

        def anchor(x):
            return x + disc.predict_delta(x, z)

        def expected(a):
            return -0.5 * coef * (m2 - 2 * a @ m1 + np.sum(a * a, axis=1))

        a_s, a_s2, a_c = anchor(p.states), anchor(p.next_states), anchor(c.states)
        base = -0.5 * coef * np.sum((p.next_states - a_s) ** 2, axis=1)
        const = np.mean(-0.5 * coef * np.sum((c.next_states - a_c) ** 2, axis=1))
        return base + gamma * expected(a_s2) - expected(a_s) - gamma * const

    def _predictive_canonical_node(self, z: ad.Node) -> ad.Node:
        disc, p, c, coef = self._predictive_parts(z)
        gamma = self.samples.gamma
        m1 = c.next_states.mean(axis=0)
        m2 = float(np.mean(np.sum(c.next_states**2, axis=1)))

        def anchor(x):
            return ad.add(x, disc.predict_delta_node(x, z) * disc.delta_scale)

        def expected(a):
            return (ad.sum(ad.square(a), axis=1) - 2.0 * ad.matmul(a, m1) + m2) * (-0.5 * coef)

        a_s, a_s2, a_c = anchor(p.states), anchor(p.next_states), anchor(c.states)
        base = ad.sum(ad.square(ad.sub(p.next_states, a_s)), axis=1) * (-0.5 * coef)
        const = ad.mean(ad.sum(ad.square(ad.sub(c.next_states, a_c)), axis=1)) * (-0.5 * coef)
        return base + gamma * expected(a_s2) - expected(a_s) - gamma * const

    def losses(self, skills, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
        """Loss per skill and a mask of degenerate (constant-reward) comparisons."""
        skills = np.atleast_2d(np.asarray(skills, dtype=np.float64))
        out = np.empty(len(skills))
        degenerate = np.zeros(len(skills), dtype=bool)
        for start in range(0, len(skills), chunk):
            block = self.intrinsic_values(skills[start : start + chunk])
            if self.metric == "epic":
                out[start : start + chunk], degenerate[start : start + chunk] = _pearson_columns(block, self.target)
            else:
                out[start : start + chunk] = epic.ablation_values(self.metric, block.T, self.target)
        self.evaluations += len(skills)
        return out, degenerate

    def loss(self, z) -> epic.EpicResult:
        values = self.intrinsic_values(np.atleast_2d(z))[:, 0]
        self.evaluations += 1
        return epic.pearson_distance(values, self.target)

    def loss_node(self, z: ad.Node) -> tuple[ad.Node, epic.EpicResult]:
        if self.metric != "epic":
            raise ValueError("gradients are only available for the EPIC loss")
        if isinstance(self.disc, ContrastiveDiscriminator):
            values = ad.matmul(self.features, self.disc.skill_encoder.forward(z))
        else:
            values = self._predictive_canonical_node(z)
        self.evaluations += 1
        return epic.pearson_distance_node(values, self.target)

    def loss_and_grad(self, z) -> tuple[float, np.ndarray, epic.EpicResult]:
        node = ad.parameter(np.asarray(z, dtype=np.float64), name="z")
        loss, flags = self.loss_node(node)
        grads = ad.backward(loss) if loss.requires_grad else {}
        return float(loss.value), grads.get(node, np.zeros_like(node.value)), flags


def transition_features_for(disc: ContrastiveDiscriminator, samples: Samples, metric: str = "epic") -> np.ndarray:
    """Transition embeddings on the Pearson batch, canonicalized for the EPIC metric."""
    p, c = samples.pearson, samples.canonical
    if metric != "epic":
        return disc.embed_transitions(p.states, p.next_states)
    return canonicalize(disc.embed_transitions, p.states, p.next_states, c.states, c.next_states, samples.gamma)


# Canonicalized embeddings depend on the discriminator and the samples but not on
# the task reward, and dominate setup cost. Entries hold the discriminator itself
# so a recycled id() can never produce a false hit.
_FEATURE_CACHE: dict = {}
_FEATURE_CACHE_SIZE = 16


def _cached_features(disc, samples: Samples, key, metric: str):
    if not isinstance(disc, ContrastiveDiscriminator):
        return None
    full_key = (id(disc), key, metric)
    hit = _FEATURE_CACHE.get(full_key)
    if hit is not None and hit[0] is disc:
        return hit[1]
    features = transition_features_for(disc, samples, metric)
    if len(_FEATURE_CACHE) >= _FEATURE_CACHE_SIZE:
        _FEATURE_CACHE.pop(next(iter(_FEATURE_CACHE)))
    _FEATURE_CACHE[full_key] = (disc, features)
    return features


def clear_feature_cache() -> None:
    _FEATURE_CACHE.clear()


def _pearson_columns(values: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson distance of every column of ``values`` against ``target``."""
    xc = values - values.mean(axis=0)
    yc = target - target.mean()
    vx = np.mean(xc * xc, axis=0)
    vy = float(np.mean(yc * yc))
    x_const = vx < epic.CONSTANT_VARIANCE
    y_const = vy < epic.CONSTANT_VARIANCE
    with np.errstate(divide="ignore", invalid="ignore"):
        xh = xc / np.sqrt(np.sum(xc * xc, axis=0))
        yh = yc / np.sqrt(np.sum(yc * yc))
        # same difference form as epic.pearson_distance
        dist = np.minimum(1.0, np.sqrt(np.sum((xh - yh[:, None]) ** 2, axis=0)) / 2.0)
    if y_const:
        dist = np.where(x_const, 0.0, 1.0)
    else:
        dist = np.where(x_const, 1.0, dist)
    return dist, x_const | y_const


def matching_objective(disc, reward, cfg: SelectionConfig, samples: Samples | None = None) -> MatchingObjective:
    if samples is not None:
        return MatchingObjective(disc, reward, samples, cfg.metric)
    key = (cfg.sample_spec, cfg.seed)
    samples = draw_samples(cfg.sample_spec, stream(cfg.seed, "samples"))
    try:
        hash(key)
    except TypeError:
        # replay buffers and list-valued bounds are unhashable; skip the cache
        return MatchingObjective(disc, reward, samples, cfg.metric)
    features = _cached_features(disc, samples, key, cfg.metric)
    return MatchingObjective(disc, reward, samples, cfg.metric, features)


def zero_shot_eval(
    policy: ScriptedSkillPolicy,
    z,
    reward,
    env: EnvConfig,
    episodes: int = 1,
    seed: int = 0,
    start=None,
) -> float:
    """Mean undiscounted return of skill ``z`` over ``episodes`` rollouts."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    skills = np.repeat(np.atleast_2d(z), episodes, axis=0)
    positions = rollout_positions(policy, skills, env, stream(seed, "zero_shot"), start)
    return float(np.mean(episode_returns(positions, reward)))


def _finish(report: SelectionReport, started: float, cfg, policy, env, reward) -> SelectionReport:
    if policy is not None and env is not None:
        report.zero_shot_return = zero_shot_eval(policy, report.z, reward, env, cfg.eval_episodes, cfg.seed)
    report.wall_time = time.perf_counter() - started
    report.seed = cfg.seed
    return report


def irm_random(
    disc, reward, cfg: SelectionConfig, policy=None, env=None, samples: Samples | None = None, candidates=None,
) -> SelectionReport:
    """Lowest-loss skill among ``n_random`` uniform candidates (or the given ones); ties go to the lowest index."""
    started = time.perf_counter()
    objective = matching_objective(disc, reward, cfg, samples)
    if candidates is None:
        candidates = stream(cfg.seed, "irm_random").random((cfg.n_random, disc.skill_dim))
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    losses, degenerate = objective.losses(candidates)
    if np.all(degenerate) and cfg.metric == "epic":
        raise ValueError("every candidate skill gives a degenerate (constant) comparison")
    best = int(np.argmin(losses))
    trace = [{"iteration": 0, "best_loss": float(losses[best]), "mean_loss": float(losses.mean())}]
    report = SelectionReport("irm_random", candidates[best], float(losses[best]), trace, 0,
                             loss_evaluations=objective.evaluations, metric=cfg.metric)
    return _finish(report, started, cfg, policy, env, reward)


def cem(
    score,
    dim: int,
    rng: np.random.Generator,
    iterations: int,
    samples: int,
    elites: int,
    init_std: float = 0.3,
    maximize: bool = False,
) -> tuple[np.ndarray, float, list[dict]]:
    """Diagonal-Gaussian cross-entropy method over ``[0, 1]^dim``.

    ``score`` maps an ``(n, dim)`` batch to ``n`` values. Returns the best
    candidate ever seen, its score and a per-iteration trace.
    """
    mean = np.full(dim, 0.5)
    var = np.full(dim, init_std**2)
    sign = -1.0 if maximize else 1.0
    best_z, best_val = None, np.inf
    trace = []
    for it in range(iterations):
        cand = np.clip(mean + np.sqrt(var) * rng.standard_normal((samples, dim)), 0.0, 1.0)
        vals = sign * np.asarray(score(cand), dtype=np.float64)
        order = np.argsort(vals, kind="stable")
        elite = cand[order[:elites]]
        if vals[order[0]] < best_val:
            best_val, best_z = float(vals[order[0]]), cand[order[0]].copy()
        trace.append({
            "iteration": it,
            "best_loss": sign * float(vals[order[0]]),
            "mean_loss": sign * float(vals.mean()),
            "elite_mean": sign * float(vals[order[:elites]].mean()),
        })
        mean = elite.mean(axis=0)
        elite_var = elite.var(axis=0)
        if np.max(elite_var) < 1e-12:
            break
        var = elite_var + 1e-6
    return best_z, sign * best_val, trace


def irm_cem(disc, reward, cfg: SelectionConfig, policy=None, env=None, samples: Samples | None = None) -> SelectionReport:
    started = time.perf_counter()
    objective = matching_objective(disc, reward, cfg, samples)
    rng = stream(cfg.seed, "irm_cem")
    if cfg.resample:
        sample_rng = stream(cfg.seed, "samples_resampled")
        state = {"objective": objective}

        def score(z):
            state["objective"] = MatchingObjective(disc, reward, draw_samples(cfg.sample_spec, sample_rng), cfg.metric)
            return state["objective"].losses(z)[0]
    else:
        def score(z):
            return objective.losses(z)[0]

    z, loss, trace = cem(score, disc.skill_dim, rng, cfg.cem_iterations, cfg.cem_samples, cfg.cem_elites, cfg.cem_init_std)
    evaluations = sum(1 for _ in trace) * cfg.cem_samples
    report = SelectionReport("irm_cem", z, loss, trace, 0, loss_evaluations=evaluations, metric=cfg.metric)
    return _finish(report, started, cfg, policy, env, reward)


def irm_gd(disc, reward, cfg: SelectionConfig, policy=None, env=None, samples: Samples | None = None) -> SelectionReport:
    """Adam on the EPIC loss with respect to ``z``, projected onto ``[0, 1]^d`` each step."""
    started = time.perf_counter()
    objective = matching_objective(disc, reward, cfg, samples)
    sample_rng = stream(cfg.seed, "samples_resampled")
    z = np.full(disc.skill_dim, cfg.gd_init)
    state = ad.AdamState(lr=cfg.gd_lr)
    trace = []
    loss = None
    for it in range(cfg.gd_steps):
        if cfg.resample and it:
            objective = MatchingObjective(disc, reward, draw_samples(cfg.sample_spec, sample_rng))
        loss, grad, _ = objective.loss_and_grad(z)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite EPIC loss at step {it}; trace so far: {trace[-5:]}")
        trace.append({"iteration": it, "best_loss": loss, "mean_loss": loss})
        (z,), state = ad.adam_step([z], [grad], state, names=["z"])
        z = np.clip(z, 0.0, 1.0)
    final = objective.loss(z).distance
    trace.append({"iteration": cfg.gd_steps, "best_loss": final, "mean_loss": final})
    report = SelectionReport("irm_gd", z, final, trace, 0, loss_evaluations=cfg.gd_steps + 1, metric=cfg.metric)
    return _finish(report, started, cfg, policy, env, reward)


def _episode_scores(policy, reward, env: EnvConfig, rng):
    def score(z):
        return episode_returns(rollout_positions(policy, np.atleast_2d(z), env, rng), reward)

    return score


def grid_search_baseline(policy, reward, env: EnvConfig, cfg: SelectionConfig) -> SelectionReport:
    """Diagonal sweep ``z_k = k / (n - 1) * 1``, one episode each."""
    started = time.perf_counter()
    n = cfg.grid_points
    candidates = np.repeat((np.arange(n) / max(n - 1, 1))[:, None], policy.skill_dim, axis=1)
    returns = _episode_scores(policy, reward, env, stream(cfg.seed, "grid_search"))(candidates)
    best = int(np.argmax(returns))
    trace = [{"iteration": 0, "best_loss": float(returns[best]), "mean_loss": float(returns.mean())}]
    report = SelectionReport("grid_search", candidates[best], None, trace, n * env.horizon)
    return _finish(report, started, cfg, policy, env, reward)


def env_rollout_baseline(policy, reward, env: EnvConfig, cfg: SelectionConfig, candidates=None) -> SelectionReport:
    started = time.perf_counter()
    if candidates is None:
        candidates = stream(cfg.seed, "env_rollout").random((cfg.env_candidates, policy.skill_dim))
    candidates = np.atleast_2d(candidates)
    returns = _episode_scores(policy, reward, env, stream(cfg.seed, "env_rollout_eval"))(candidates)
    best = int(np.argmax(returns))
    trace = [{"iteration": 0, "best_loss": float(returns[best]), "mean_loss": float(returns.mean())}]
    report = SelectionReport("env_rollout", candidates[best], None, trace, len(candidates) * env.horizon)
    return _finish(report, started, cfg, policy, env, reward)


def env_rollout_cem(policy, reward, env: EnvConfig, cfg: SelectionConfig) -> SelectionReport:
    """CEM with elites ranked by episode return; every candidate costs one episode."""
    started = time.perf_counter()
    score = _episode_scores(policy, reward, env, stream(cfg.seed, "env_rollout_cem_eval"))
    z, ret, trace = cem(
        score, policy.skill_dim, stream(cfg.seed, "env_rollout_cem"),
        cfg.env_cem_iterations, cfg.env_cem_samples, cfg.env_cem_elites, cfg.cem_init_std, maximize=True,
    )
    steps = len(trace) * cfg.env_cem_samples * env.horizon
    report = SelectionReport("env_rollout_cem", z, None, trace, steps)
    return _finish(report, started, cfg, policy, env, reward)


def random_skill(policy, reward, env: EnvConfig, cfg: SelectionConfig) -> SelectionReport:
    started = time.perf_counter()
    z = stream(cfg.seed, "random_skill").random(policy.skill_dim)
    return _finish(SelectionReport("random_skill", z, None, [], 0), started, cfg, policy, env, reward)


def relabel(buffer: RolloutBuffer, reward, cfg: SelectionConfig, policy=None, env=None) -> SelectionReport:
    """Best skill of the saved pretraining rollouts under the task reward."""
    started = time.perf_counter()
    result = relabel_buffer(buffer, reward)
    trace = [{
        "iteration": 0,
        "best_loss": float(result.mean_returns[result.best_index]),
        "mean_loss": float(result.mean_returns.mean()),
    }]
    report = SelectionReport("relabel", result.best_skill.copy(), None, trace, 0)
    return _finish(report, started, cfg, policy, env, reward)


def select(
    method: str,
    reward,
    cfg: SelectionConfig,
    disc: Discriminator | None = None,
    policy: ScriptedSkillPolicy | None = None,
    env: EnvConfig | None = None,
    buffer: RolloutBuffer | None = None,
    samples: Samples | None = None,
) -> SelectionReport:
    """Run ``method`` with ``cfg`` (whose own ``method`` field is overridden).

    ``samples`` replaces the batches drawn from ``cfg.sample_spec`` for IRM methods.
    """
    cfg = replace(cfg, method=method)
    if method in IRM_METHODS:
        if disc is None:
            raise ValueError(f"{method} needs a discriminator")
        return {"irm_random": irm_random, "irm_cem": irm_cem, "irm_gd": irm_gd}[method](disc, reward, cfg, policy, env, samples)
    if policy is None or env is None:
        raise ValueError(f"{method} needs a policy and an environment")
    if method == "relabel":
        if buffer is None:
            raise ValueError("relabel needs the pretraining rollout buffer")
        return relabel(buffer, reward, cfg, policy, env)
    return {
        "grid_search": grid_search_baseline,
        "env_rollout": env_rollout_baseline,
        "env_rollout_cem": env_rollout_cem,
        "random_skill": random_skill,
    }[method](policy, reward, env, cfg)

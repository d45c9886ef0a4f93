"""Seeded experiment harness: pretraining, selection, landscapes, sequencing and ablations.

A run is described by one JSON document (see ``RunConfig``). Every command
writes CSV (and JSON) files under the run's output directory; all randomness
comes from ``irm.rng.stream(seed, label)`` so a (config, seed) pair always
produces the same bytes.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from irm import discriminators as D
from irm.epic import SampleSpec
from irm.planar import EnvConfig, ScriptedSkillPolicy, reward_from_dict, skill_grid
from irm.rng import stream
from irm.selection import IRM_METHODS, METHODS, METRICS, SelectionConfig, matching_objective, select, zero_shot_eval
from irm import sequencing as Q

log = logging.getLogger("irm")

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class PolicyConfig:
    skill_dim: int = 2
    gain: float = 1.0
    projection_seed: int = 0


@dataclass(frozen=True)
class PretrainConfig:
    family: str = "contrastive"
    n_skills: int = 64
    episodes_per_skill: int = 8
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 256
    embed_dim: int = 32
    hidden_dims: tuple[int, ...] = (128, 128)
    state_scale: float = 128.0
    delta_scale: float = 128.0


@dataclass(frozen=True)
class SweepConfig:
    resolution: int = 32
    rewards: tuple = (
        {"name": "top_left", "kind": "shaped", "goal": [-64.0, 64.0]},
        {"name": "bottom_right", "kind": "shaped", "goal": [64.0, -64.0]},
        {"name": "sparse_tol_0.03", "kind": "sparse", "goal": [-64.0, 64.0], "tolerance": 0.03},
        {"name": "sparse_tol_0.07", "kind": "sparse", "goal": [-64.0, 64.0], "tolerance": 0.07},
    )


@dataclass(frozen=True)
class CorrelateConfig:
    n_skills: int = 100


@dataclass(frozen=True)
class SequenceConfig:
    goals: tuple = ((-64.0, 64.0), (64.0, 64.0))
    horizon: int = 50
    action_noise: float = 1.0
    methods: tuple[str, ...] = ("irm_cem",)
    prefix_rollouts: int = 1
    canonical_sigma: float = 1.0
    budget: int = 10


@dataclass(frozen=True)
class AblateMetricConfig:
    method: str = "irm_cem"
    metrics: tuple[str, ...] = METRICS


# (pearson source, canonical source, canonical sigma)
DISTRIBUTION_GRID = (
    ("workspace_uniform", "workspace_uniform", 1.0),
    ("workspace_uniform", "unit_uniform", 1.0),
    ("workspace_uniform", "gaussian_perturb", 1.0),
    ("workspace_uniform", "gaussian_perturb", 0.1),
    ("unit_uniform", "gaussian_perturb", 1.0),
    ("unit_uniform", "gaussian_perturb", 0.1),
)


@dataclass(frozen=True)
class AblateDistributionsConfig:
    method: str = "irm_cem"
    rows: tuple = DISTRIBUTION_GRID


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs"
    checkpoint_dir: str | None = None
    workers: int = 1
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    samples: SampleSpec = field(default_factory=lambda: SampleSpec(n_pearson=1024))
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    methods: tuple[str, ...] = METHODS
    task: dict = field(default_factory=lambda: {"kind": "shaped", "goal": [-64.0, 64.0]})
    sweep: SweepConfig = field(default_factory=SweepConfig)
    correlate: CorrelateConfig = field(default_factory=CorrelateConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    ablate_metric: AblateMetricConfig = field(default_factory=AblateMetricConfig)
    ablate_distributions: AblateDistributionsConfig = field(default_factory=AblateDistributionsConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def checkpoints(self) -> Path:
        return Path(self.checkpoint_dir) if self.checkpoint_dir is not None else self.out_dir / "checkpoints"

    def selection_config(self, seed: int, **overrides) -> SelectionConfig:
        return replace(self.selection, seed=seed, sample_spec=self.samples, **overrides)

    def make_policy(self) -> ScriptedSkillPolicy:
        p = self.policy
        return ScriptedSkillPolicy(skill_dim=p.skill_dim, gain=p.gain, projection_seed=p.projection_seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["selection"] = {k: v for k, v in out["selection"].items() if k not in _SELECTION_FIXED}
        out["samples"].pop("replay")
        return _jsonable(out)


_SELECTION_FIXED = ("method", "seed", "sample_spec")
_SECTIONS = {
    "env": (EnvConfig, ()),
    "policy": (PolicyConfig, ()),
    "pretrain": (PretrainConfig, ()),
    "samples": (SampleSpec, ("replay",)),
    "selection": (SelectionConfig, _SELECTION_FIXED),
    "sweep": (SweepConfig, ()),
    "correlate": (CorrelateConfig, ()),
    "sequence": (SequenceConfig, ()),
    "ablate_metric": (AblateMetricConfig, ()),
    "ablate_distributions": (AblateDistributionsConfig, ()),
}


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _section(cls, data, where: str, excluded=(), base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in fields(cls)} - set(excluded)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    values = {}
    for key, value in data.items():
        # reward dicts stay dicts; everything else list-valued becomes a tuple
        if key in ("rewards",):
            value = tuple(dict(v) for v in value)
        elif key == "rows":
            value = tuple(tuple(v) for v in value)
        else:
            value = _tuplify(value)
        values[key] = value
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    defaults = RunConfig()
    values = {}
    for key, value in data.items():
        if key in _SECTIONS:
            cls, excluded = _SECTIONS[key]
            values[key] = _section(cls, value, key, excluded, getattr(defaults, key))
        elif key == "task":
            values[key] = dict(value)
        else:
            values[key] = _tuplify(value)
    cfg = replace(defaults, **values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not cfg.seeds:
        raise ConfigError("seed list is empty")
    if any(not isinstance(s, int) or s < 0 for s in cfg.seeds):
        raise ConfigError("seeds must be non-negative integers")
    if cfg.workers < 1:
        raise ConfigError("workers must be positive")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad or not cfg.methods:
        raise ConfigError(f"unknown method(s) {bad}; expected a subset of {METHODS}")
    if cfg.pretrain.family not in ("contrastive", "predictive"):
        raise ConfigError(f"unknown discriminator family {cfg.pretrain.family!r}")
    for name in ("n_skills", "episodes_per_skill", "steps", "batch_size", "embed_dim"):
        if getattr(cfg.pretrain, name) < 1:
            raise ConfigError(f"pretrain.{name} must be positive")
    if cfg.pretrain.family == "contrastive" and cfg.pretrain.n_skills < 2:
        raise ConfigError("contrastive pretraining needs at least two skills")
    if len(cfg.samples.low) != 2:
        raise ConfigError("sample bounds must be two-dimensional for the planar environment")
    bad = [m for m in cfg.sequence.methods if m not in IRM_METHODS]
    if bad or not cfg.sequence.methods:
        raise ConfigError(f"sequence.methods must be IRM methods, got {list(cfg.sequence.methods)}")
    if not cfg.sequence.goals:
        raise ConfigError("sequence needs at least one waypoint")
    if cfg.ablate_metric.method not in ("irm_random", "irm_cem"):
        raise ConfigError("ablate_metric.method must be irm_random or irm_cem (gradients exist only for EPIC)")
    bad = [m for m in cfg.ablate_metric.metrics if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metric(s) {bad}")
    if cfg.ablate_distributions.method not in IRM_METHODS:
        raise ConfigError("ablate_distributions.method must be an IRM method")
    if cfg.sweep.resolution < 2 or cfg.correlate.n_skills < 2:
        raise ConfigError("sweep resolution and correlate n_skills must be at least 2")
    try:
        reward_from_dict(cfg.task)
        for r in cfg.sweep.rewards:
            if "name" not in r:
                raise ConfigError("every sweep reward needs a name")
            reward_from_dict({k: v for k, v in r.items() if k != "name"})
        for row in cfg.ablate_distributions.rows:
            SampleSpec(pearson_source=row[0], canonical_source=row[1], sigma=float(row[2]))
        for goal in cfg.sequence.goals:
            reward_from_dict({"kind": "shaped", "goal": list(goal)})
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid reward or sampling entry: {exc}") from exc
    if cfg.checkpoint_dir is not None and not Path(cfg.checkpoint_dir).is_dir():
        raise ConfigError(f"checkpoint_dir {cfg.checkpoint_dir!r} does not exist")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {str(path)!r} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------- output helpers


def write_csv(path, header, rows) -> Path:
    """CSV with a header row; floats are written with ``repr`` so they round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return value


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), sort_keys=True, indent=2) + "\n")
    return path


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error (sample std over sqrt(n)); the error is nan for one value."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float(values.mean()), float("nan")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values)))


def _created_at() -> str | None:
    # wall-clock stamps would make checkpoints differ between reruns
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()


def _map_seeds(fn, cfg: RunConfig, *args) -> list:
    """Apply ``fn(cfg, seed, *args)`` to every seed, in seed order."""
    if cfg.workers == 1 or len(cfg.seeds) == 1:
        return [fn(cfg, seed, *args) for seed in cfg.seeds]
    with ProcessPoolExecutor(max_workers=min(cfg.workers, len(cfg.seeds))) as pool:
        futures = [pool.submit(fn, cfg, seed, *args) for seed in cfg.seeds]
        return [f.result() for f in futures]


def _z_columns(d: int) -> list[str]:
    return [f"z_{k}" for k in range(d)]


# ---------------------------------------------------------------- pretraining


def pretrain_seed(cfg: RunConfig, seed: int):
    """Collect scripted-skill rollouts and fit a discriminator; returns ``(disc, buffer, losses)``."""
    p = cfg.pretrain
    policy = cfg.make_policy()
    skills = stream(seed, "pretrain_skills").random((p.n_skills, policy.skill_dim))
    buffer = D.collect_buffer(policy, skills, cfg.env, stream(seed, "pretrain_rollouts"), p.episodes_per_skill)
    init_rng = stream(seed, "discriminator_init")
    common = dict(hidden_dims=tuple(p.hidden_dims), state_scale=p.state_scale, delta_scale=p.delta_scale)
    if p.family == "contrastive":
        disc = D.ContrastiveDiscriminator.init(2, policy.skill_dim, init_rng, embed_dim=p.embed_dim, **common)
    else:
        disc = D.PredictiveDiscriminator.init(2, policy.skill_dim, init_rng, **common)
    disc, losses = D.train(disc, buffer, p.steps, stream(seed, "discriminator_train"), batch_size=p.batch_size, lr=p.lr)
    disc.metadata = {**disc.metadata, "seed": seed, "created_at": _created_at()}
    return disc, buffer, losses


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.checkpoints / f"seed_{seed}"


def _pretrain_one(cfg: RunConfig, seed: int) -> dict:
    started = time.perf_counter()
    disc, buffer, losses = pretrain_seed(cfg, seed)
    where = seed_dir(cfg, seed)
    where.mkdir(parents=True, exist_ok=True)
    D.save_checkpoint(disc, where / "discriminator.json")
    buffer.save(where / "buffer.npz")
    write_csv(where / "train_loss.csv", ["step", "loss"], enumerate(losses))
    return {"seed": seed, "final_loss": float(np.mean(losses[-50:])), "seconds": time.perf_counter() - started}


def cmd_pretrain(cfg: RunConfig) -> list[dict]:
    try:
        cfg.checkpoints.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {str(cfg.checkpoints)!r}: {exc}") from exc
    results = _map_seeds(_pretrain_one, cfg)
    write_csv(cfg.checkpoints / "pretrain_summary.csv", ["seed", "final_loss"],
              [(r["seed"], r["final_loss"]) for r in results])
    for r in results:
        log.info("seed %d: final training loss %.4f (%.1fs)", r["seed"], r["final_loss"], r["seconds"])
    return results


def load_seed(cfg: RunConfig, seed: int):
    """Checkpointed discriminator and buffer for ``seed``."""
    where = seed_dir(cfg, seed)
    ckpt, buf = where / "discriminator.json", where / "buffer.npz"
    for path in (ckpt, buf):
        if not path.is_file():
            raise ConfigError(f"missing checkpoint {str(path)!r}; run `irm pretrain` with this config first")
    return D.load_checkpoint(ckpt), D.RolloutBuffer.load(buf)


# ---------------------------------------------------------------- selection


def _select_one(cfg: RunConfig, seed: int, methods) -> list[dict]:
    disc, buffer = load_seed(cfg, seed)
    policy, reward = cfg.make_policy(), reward_from_dict(cfg.task)
    out = cfg.out_dir / "select" / f"seed_{seed}"
    rows = []
    for method in methods:
        report = select(method, reward, cfg.selection_config(seed), disc, policy, cfg.env, buffer)
        write_json(out / f"{method}.json", report.to_dict(timing=False))
        report.write_trace_csv(out / f"{method}_trace.csv")
        log.info("seed %d %-16s return %.4f env steps %d (%.1fs)",
                 seed, method, report.zero_shot_return, report.env_steps, report.wall_time)
        rows.append({"method": method, "seed": seed, "z": report.z, "loss": report.loss,
                     "env_steps": report.env_steps, "zero_shot_return": report.zero_shot_return})
    return rows


def _summaries(out: Path, rows: list[dict], key: str, value: str, seeds) -> list[dict]:
    """Write a wide ``key x seed`` table with mean and standard error; returns its rows."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], {})[r["seed"]] = r[value]
    table = []
    for name, by_seed in groups.items():
        mean, se = mean_se([by_seed[s] for s in seeds if s in by_seed])
        table.append({key: name, **{f"seed_{s}": by_seed.get(s) for s in seeds}, "mean": mean, "se": se})
    header = [key, *[f"seed_{s}" for s in seeds], "mean", "se"]
    write_csv(out, header, [[t[h] for h in header] for t in table])
    return table


def cmd_select(cfg: RunConfig, methods=None) -> dict:
    methods = tuple(methods or cfg.methods)
    rows = [r for per_seed in _map_seeds(_select_one, cfg, methods) for r in per_seed]
    d = cfg.policy.skill_dim
    out = cfg.out_dir / "select"
    write_csv(out / "summary.csv", ["method", "seed", *_z_columns(d), "loss", "env_steps", "zero_shot_return"],
              [[r["method"], r["seed"], *r["z"], r["loss"], r["env_steps"], r["zero_shot_return"]] for r in rows])
    table = _summaries(out / "table.csv", rows, "method", "zero_shot_return", cfg.seeds)
    return {"rows": rows, "table": table}


# ---------------------------------------------------------------- landscapes


def sweep_losses(disc, reward, cfg: RunConfig, seed: int, resolution: int):
    """Loss matrix ``(resolution, resolution)`` indexed ``[i0, i1]`` and its degenerate mask."""
    if disc.skill_dim != 2:
        raise ConfigError(f"sweeps need a 2-D skill space (got d={disc.skill_dim}); use `correlate` for a scatter instead")
    grid = skill_grid(resolution)
    losses, degenerate = matching_objective(disc, reward, cfg.selection_config(seed)).losses(grid)
    return grid, losses.reshape(resolution, resolution), degenerate.reshape(resolution, resolution)


def _iqr(values) -> float:
    q75, q25 = np.percentile(values, [75, 25])
    return float(q75 - q25)


def _sweep_one(cfg: RunConfig, seed: int, resolution: int) -> list[dict]:
    disc, _ = load_seed(cfg, seed)
    out = cfg.out_dir / "sweep" / f"seed_{seed}"
    rows = []
    for spec in cfg.sweep.rewards:
        reward = reward_from_dict({k: v for k, v in spec.items() if k != "name"})
        grid, losses, degenerate = sweep_losses(disc, reward, cfg, seed, resolution)
        flat, flags = losses.ravel(), degenerate.ravel()
        write_csv(out / f"{spec['name']}.csv", ["z0", "z1", "epic_loss", "degenerate"],
                  [(z[0], z[1], v, f) for z, v, f in zip(grid, flat, flags)])
        best = int(np.argmin(flat))
        rows.append({"seed": seed, "reward": spec["name"], "min_loss": float(flat[best]),
                     "argmin_z0": float(grid[best, 0]), "argmin_z1": float(grid[best, 1]),
                     "iqr": _iqr(flat), "degenerate": int(flags.sum()), "losses": losses})
    return rows


def cmd_sweep(cfg: RunConfig, resolution: int | None = None) -> list[dict]:
    resolution = cfg.sweep.resolution if resolution is None else resolution
    if cfg.policy.skill_dim != 2:
        raise ConfigError(f"sweeps need a 2-D skill space (got d={cfg.policy.skill_dim}); use `correlate` instead")
    rows = [r for per_seed in _map_seeds(_sweep_one, cfg, resolution) for r in per_seed]
    header = ["seed", "reward", "min_loss", "argmin_z0", "argmin_z1", "iqr", "degenerate"]
    write_csv(cfg.out_dir / "sweep" / "summary.csv", header, [[r[h] for h in header] for r in rows])
    return rows


def _correlate_one(cfg: RunConfig, seed: int, n_skills: int) -> dict:
    disc, _ = load_seed(cfg, seed)
    policy, reward = cfg.make_policy(), reward_from_dict(cfg.task)
    skills = stream(seed, "correlate").random((n_skills, policy.skill_dim))
    losses, degenerate = matching_objective(disc, reward, cfg.selection_config(seed)).losses(skills)
    returns = np.array([zero_shot_eval(policy, z, reward, cfg.env, cfg.selection.eval_episodes, seed) for z in skills])
    write_csv(cfg.out_dir / "correlate" / f"seed_{seed}.csv", [*_z_columns(policy.skill_dim), "epic_loss", "zero_shot_return"],
              [[*z, l, r] for z, l, r in zip(skills, losses, returns)])
    flagged = bool(degenerate.any()) or np.std(losses) < 1e-12 or np.std(returns) < 1e-12
    rho = None if flagged else float(np.corrcoef(losses, returns)[0, 1])
    return {"seed": seed, "correlation": rho, "degenerate": flagged}


def cmd_correlate(cfg: RunConfig, n_skills: int | None = None) -> list[dict]:
    n_skills = cfg.correlate.n_skills if n_skills is None else n_skills
    rows = _map_seeds(_correlate_one, cfg, n_skills)
    write_csv(cfg.out_dir / "correlate" / "summary.csv", ["seed", "correlation", "degenerate"],
              [[r["seed"], r["correlation"], r["degenerate"]] for r in rows])
    for r in rows:
        if r["degenerate"]:
            print(f"seed {r['seed']}: degenerate comparison (constant reward); correlation omitted")
        else:
            print(f"seed {r['seed']}: pearson(EPIC loss, zero-shot return) = {r['correlation']:.4f}")
    return rows


# ---------------------------------------------------------------- sequencing


def sequence_env(cfg: RunConfig) -> EnvConfig:
    s = cfg.sequence
    return replace(cfg.env, horizon=s.horizon, action_noise=s.action_noise)


def _sequence_one(cfg: RunConfig, seed: int, goals, methods) -> list[dict]:
    disc, _ = load_seed(cfg, seed)
    policy, env = cfg.make_policy(), sequence_env(cfg)
    rewards = [reward_from_dict({"kind": "shaped", "goal": list(g)}) for g in goals]
    s = cfg.sequence
    sel = cfg.selection_config(seed)
    plans = []
    for method in methods:
        plan = Q.sequential_select(disc, rewards, policy, env, method, sel, s.prefix_rollouts, s.canonical_sigma)
        plans.append(plan)
        plans.append(Q.reversed_plan(plan))
    plans.append(Q.random_plan(rewards, env.horizon, policy.skill_dim, seed))
    plans.append(Q.env_sequential_baseline(policy, rewards, env, sel, s.budget))
    out = cfg.out_dir / "sequence" / f"seed_{seed}"
    rows = []
    for plan in plans:
        total, per_segment = Q.sequential_eval(plan, policy, env, seed, cfg.selection.eval_episodes)
        plan.total_return, plan.segment_returns = total, per_segment
        write_json(out / f"{plan.method}.json", plan.to_dict())
        rows.append({"method": plan.method, "seed": seed, "env_steps": plan.env_steps,
                     "total_return": total, "segment_returns": per_segment, "skills": plan.skills})
    return rows


def cmd_sequence(cfg: RunConfig, waypoints=None, methods=None) -> dict:
    goals = tuple(tuple(float(v) for v in g) for g in (waypoints or cfg.sequence.goals))
    if not goals:
        raise ConfigError("sequence needs at least one waypoint")
    methods = tuple(methods or cfg.sequence.methods)
    bad = [m for m in methods if m not in IRM_METHODS]
    if bad:
        raise ConfigError(f"sequence methods must be IRM methods, got {bad}")
    rows = [r for per_seed in _map_seeds(_sequence_one, cfg, goals, methods) for r in per_seed]
    n, d = len(goals), cfg.policy.skill_dim
    header = ["method", "seed", "env_steps", "total_return", *[f"segment_{k}_return" for k in range(n)],
              *[f"segment_{k}_z_{j}" for k in range(n) for j in range(d)]]
    out = cfg.out_dir / "sequence"
    write_csv(out / "returns.csv", header,
              [[r["method"], r["seed"], r["env_steps"], r["total_return"], *r["segment_returns"], *r["skills"].ravel()]
               for r in rows])
    table = _summaries(out / "table.csv", rows, "method", "total_return", cfg.seeds)
    return {"rows": rows, "table": table}


# ---------------------------------------------------------------- ablations


def _ablate_metric_one(cfg: RunConfig, seed: int, method: str) -> list[dict]:
    disc, _ = load_seed(cfg, seed)
    policy, reward = cfg.make_policy(), reward_from_dict(cfg.task)
    rows = []
    for metric in cfg.ablate_metric.metrics:
        report = select(method, reward, cfg.selection_config(seed, metric=metric), disc, policy, cfg.env)
        rows.append({"metric": metric, "seed": seed, "z": report.z, "loss": report.loss,
                     "zero_shot_return": report.zero_shot_return})
    return rows


def cmd_ablate_metric(cfg: RunConfig, method: str | None = None) -> dict:
    method = method or cfg.ablate_metric.method
    if method not in ("irm_random", "irm_cem"):
        raise ConfigError("metric ablation runs with irm_random or irm_cem")
    rows = [r for per_seed in _map_seeds(_ablate_metric_one, cfg, method) for r in per_seed]
    out = cfg.out_dir / "ablate_metric"
    write_csv(out / "results.csv", ["metric", "seed", *_z_columns(cfg.policy.skill_dim), "loss", "zero_shot_return"],
              [[r["metric"], r["seed"], *r["z"], r["loss"], r["zero_shot_return"]] for r in rows])
    table = _summaries(out / "table.csv", rows, "metric", "zero_shot_return", cfg.seeds)
    return {"rows": rows, "table": table}


def _row_name(row) -> str:
    pearson, canonical, sigma = row
    return f"{pearson}|{canonical}" + (f"|sigma={sigma!r}" if canonical == "gaussian_perturb" else "")


def _ablate_distributions_one(cfg: RunConfig, seed: int, method: str) -> list[dict]:
    disc, _ = load_seed(cfg, seed)
    policy, reward = cfg.make_policy(), reward_from_dict(cfg.task)
    rows = []
    for row in cfg.ablate_distributions.rows:
        pearson, canonical, sigma = row
        spec = replace(cfg.samples, pearson_source=pearson, canonical_source=canonical, sigma=float(sigma))
        sel = replace(cfg.selection_config(seed), sample_spec=spec)
        report = select(method, reward, sel, disc, policy, cfg.env)
        rows.append({"row": _row_name(row), "pearson": pearson, "canonical": canonical, "sigma": float(sigma),
                     "seed": seed, "z": report.z, "loss": report.loss, "zero_shot_return": report.zero_shot_return})
    return rows


def cmd_ablate_distributions(cfg: RunConfig, method: str | None = None) -> dict:
    method = method or cfg.ablate_distributions.method
    if method not in IRM_METHODS:
        raise ConfigError("distribution ablation needs an IRM method")
    rows = [r for per_seed in _map_seeds(_ablate_distributions_one, cfg, method) for r in per_seed]
    out = cfg.out_dir / "ablate_distributions"
    write_csv(out / "results.csv",
              ["pearson", "canonical", "sigma", "seed", *_z_columns(cfg.policy.skill_dim), "loss", "zero_shot_return"],
              [[r["pearson"], r["canonical"], r["sigma"], r["seed"], *r["z"], r["loss"], r["zero_shot_return"]]
               for r in rows])
    table = _summaries(out / "table.csv", rows, "row", "zero_shot_return", cfg.seeds)
    return {"rows": rows, "table": table}


__all__ = [
    "ConfigError", "RunConfig", "PolicyConfig", "PretrainConfig", "SweepConfig", "CorrelateConfig",
    "SequenceConfig", "AblateMetricConfig", "AblateDistributionsConfig", "DISTRIBUTION_GRID",
    "config_from_dict", "load_config", "validate", "write_csv", "read_csv", "mean_se",
    "pretrain_seed", "load_seed", "sweep_losses", "sequence_env",
    "cmd_pretrain", "cmd_select", "cmd_sweep", "cmd_correlate", "cmd_sequence",
    "cmd_ablate_metric", "cmd_ablate_distributions",
]

"""EPIC pseudometric between action-independent reward functions.

A reward function here is any callable ``r(states, next_states) -> values``
evaluated on batches: ``states`` and ``next_states`` are ``(n, dim)`` arrays and
the result is an ``(n,)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from irm import autodiff as ad

RewardFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

CONSTANT_VARIANCE = 1e-12
DEFAULT_GAMMA = 0.99

__all__ = [
    "RewardFunction",
    "Transitions",
    "SampleSpec",
    "Samples",
    "EpicResult",
    "draw_samples",
    "canonicalize",
    "pearson_distance",
    "pearson_distance_node",
    "epic_distance",
    "ablation_metric",
    "ABLATION_KINDS",
]


@dataclass(frozen=True)
class Transitions:
    """A batch of ``(state, next_state)`` pairs."""

    states: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        s2 = np.atleast_2d(np.asarray(self.next_states, dtype=np.float64))
        if s.shape != s2.shape:
            raise ValueError(f"state shape {s.shape} != next_state shape {s2.shape}")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "next_states", s2)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def __getitem__(self, index) -> "Transitions":
        return Transitions(self.states[index], self.next_states[index])


Source = Literal["workspace_uniform", "unit_uniform", "replay", "gaussian_perturb"]


@dataclass(frozen=True)
class SampleSpec:
    """Where Pearson transitions and canonical state batches come from.

    ``pearson_source`` is one of ``workspace_uniform``, ``unit_uniform`` or
    ``replay`` (then ``replay`` holds the transitions to draw from).
    ``canonical_source`` is one of ``workspace_uniform``, ``unit_uniform`` or
    ``gaussian_perturb`` (Pearson states plus isotropic noise of std ``sigma``).
    """

    pearson_source: Source = "workspace_uniform"
    canonical_source: Source = "workspace_uniform"
    n_pearson: int = 256
    n_canonical: int = 1024
    gamma: float = DEFAULT_GAMMA
    low: tuple[float, ...] = (-128.0, -128.0)
    high: tuple[float, ...] = (128.0, 128.0)
    sigma: float = 1.0
    replay: Transitions | None = None

    def __post_init__(self):
        if self.pearson_source not in ("workspace_uniform", "unit_uniform", "replay"):
            raise ValueError(f"unknown pearson source {self.pearson_source!r}")
        if self.canonical_source not in ("workspace_uniform", "unit_uniform", "gaussian_perturb"):
            raise ValueError(f"unknown canonical source {self.canonical_source!r}")
        if self.n_pearson < 2 or self.n_canonical < 2:
            raise ValueError("sample counts must be at least 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if len(self.low) != len(self.high) or any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("workspace bounds need low < high in every dimension")
        if self.canonical_source == "gaussian_perturb" and self.sigma <= 0:
            raise ValueError("sigma must be positive for gaussian_perturb")


@dataclass(frozen=True)
class Samples:
    pearson: Transitions
    canonical: Transitions
    gamma: float


@dataclass(frozen=True)
class EpicResult:
    distance: float
    pearson_correlation: float
    a_constant: bool = False
    b_constant: bool = False

    @property
    def degenerate(self) -> bool:
        return self.a_constant or self.b_constant


def draw_samples(spec: SampleSpec, rng: np.random.Generator) -> Samples:
    dim = len(spec.low)
    low, high = np.array(spec.low), np.array(spec.high)

    def uniform(kind: str, n: int) -> np.ndarray:
        if kind == "workspace_uniform":
            return rng.uniform(low, high, size=(n, dim))
        return rng.uniform(0.0, 1.0, size=(n, dim))

    if spec.pearson_source == "replay":
        if spec.replay is None or len(spec.replay) == 0:
            raise ValueError("replay Pearson source needs a nonempty transition buffer")
        idx = rng.integers(0, len(spec.replay), size=spec.n_pearson)
        pearson = spec.replay[idx]
    else:
        pearson = Transitions(
            uniform(spec.pearson_source, spec.n_pearson),
            uniform(spec.pearson_source, spec.n_pearson),
        )

    if spec.canonical_source == "gaussian_perturb":
        canonical = perturbed_canonical(pearson, spec.n_canonical, spec.sigma, rng)
    else:
        canonical = Transitions(
            uniform(spec.canonical_source, spec.n_canonical),
            uniform(spec.canonical_source, spec.n_canonical),
        )
    return Samples(pearson, canonical, spec.gamma)


def perturbed_canonical(
    pearson: Transitions, n: int, sigma: float, rng: np.random.Generator
) -> Transitions:
    """Canonical batches made by jittering Pearson states (cycled to length ``n``)."""
    idx = np.arange(n) % len(pearson)
    noise = rng.normal(0.0, sigma, size=(2, n, pearson.dim))
    return Transitions(pearson.states[idx] + noise[0], pearson.next_states[idx] + noise[1])


def _checked(values: np.ndarray, states: np.ndarray, next_states: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        row = (bad // int(np.prod(values.shape[1:], dtype=int))) % len(states)
        raise FloatingPointError(
            f"reward returned {values.ravel()[bad]} at transition "
            f"s={states[row].tolist()}, s'={next_states[row].tolist()}"
        )
    return values


def _mean_against(reward: RewardFunction, anchors: np.ndarray, targets: np.ndarray, chunk: int) -> np.ndarray:
    """``mean_j reward(anchor_i, target_j)`` for every anchor row ``i``."""
    n, m = len(anchors), len(targets)
    rows = max(1, chunk // m)
    blocks = []
    for start in range(0, n, rows):
        a = anchors[start : start + rows]
        s = np.repeat(a, m, axis=0)
        s2 = np.tile(targets, (len(a), 1))
        vals = _checked(reward(s, s2), s, s2)
        blocks.append(vals.reshape(len(a), m, *vals.shape[1:]).mean(axis=1))
    return np.concatenate(blocks, axis=0)


def canonicalize(
    reward: RewardFunction,
    states,
    next_states,
    canon_states,
    canon_next_states,
    gamma: float = DEFAULT_GAMMA,
    include_constant: bool = True,
    chunk: int = 1 << 18,
):
    """Canonically shaped reward at each ``(s, s')`` pair.

    ``C(R)(s, s') = R(s, s') + mean_j[gamma R(s', S'_j) - R(s, S'_j) - gamma R(S_j, S'_j)]``
    with the canonical batches ``S`` and ``S'``. The last term is the same for
    every pair; ``include_constant=False`` drops it. A single transition
    (1-D ``states``) returns a float. Vector-valued ``reward`` outputs of
    shape ``(n, k)`` are canonicalized componentwise.
    """
    single = np.ndim(states) == 1
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    cs = np.atleast_2d(np.asarray(canon_states, dtype=np.float64))
    cs2 = np.atleast_2d(np.asarray(canon_next_states, dtype=np.float64))
    if len(cs) == 0 or len(cs2) == 0:
        raise ValueError("canonical batches must be nonempty")

    value = _checked(reward(s, s2), s, s2)
    value = value + gamma * _mean_against(reward, s2, cs2, chunk) - _mean_against(reward, s, cs2, chunk)
    if include_constant:
        value = value - gamma * _checked(reward(cs, cs2), cs, cs2).mean(axis=0)
    if single:
        return float(value[0]) if value.ndim == 1 else value[0]
    return value


def _pearson_parts(x: np.ndarray, y: np.ndarray) -> EpicResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length 1-D arrays, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least two samples")
    xc, yc = x - x.mean(), y - y.mean()
    vx, vy = np.mean(xc * xc), np.mean(yc * yc)
    a_const, b_const = bool(vx < CONSTANT_VARIANCE), bool(vy < CONSTANT_VARIANCE)
    if a_const and b_const:
        return EpicResult(0.0, 1.0, True, True)
    if a_const or b_const:
        return EpicResult(1.0, 0.0, a_const, b_const)
    # (1 - rho) / 2 = |xh - yh|^2 / 4 for unit-norm centered xh, yh; the
    # difference form keeps full precision when rho is within rounding of 1
    xh, yh = xc / np.linalg.norm(xc), yc / np.linalg.norm(yc)
    rho = float(np.clip(xh @ yh, -1.0, 1.0))
    return EpicResult(float(min(1.0, np.linalg.norm(xh - yh) / 2.0)), rho)


def pearson_distance(x, y) -> EpicResult:
    """``sqrt((1 - rho) / 2)`` with zero-variance inputs flagged.

    Both constant gives distance 0; exactly one constant gives distance 1.
    """
    return _pearson_parts(x, y)


def pearson_distance_node(x: ad.Node, y: np.ndarray) -> tuple[ad.Node, EpicResult]:
    """Differentiable Pearson distance of a graph node against fixed values."""
    flags = _pearson_parts(x.value, y)
    if flags.degenerate:
        return ad.constant(flags.distance), flags
    xc = x - ad.mean(x)
    yc = np.asarray(y) - np.mean(y)
    xh = xc / ad.sqrt(ad.sum(ad.square(xc)))
    yh = yc / np.linalg.norm(yc)
    return ad.sqrt(ad.sum(ad.square(xh - yh))) * 0.5, flags


def epic_distance(r_a: RewardFunction, r_b: RewardFunction, samples: Samples, include_constant: bool = True) -> EpicResult:
    p, c = samples.pearson, samples.canonical
    ca = canonicalize(r_a, p.states, p.next_states, c.states, c.next_states, samples.gamma, include_constant)
    cb = canonicalize(r_b, p.states, p.next_states, c.states, c.next_states, samples.gamma, include_constant)
    return pearson_distance(ca, cb)


ABLATION_KINDS = ("L1", "L2", "L1+scale", "L2+scale")


def best_scale_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Non-negative scale minimising ``mean((alpha * a - b) ** 2)`` along the last axis."""
    num = np.sum(a * b, axis=-1)
    den = np.sum(a * a, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(den > 0, num / den, 0.0)
    return np.maximum(alpha, 0.0)


def best_scale_l1(
    a: np.ndarray,
    b: np.ndarray,
    log_bounds: tuple[float, float] = (np.log(1e-6), np.log(1e6)),
    iters: int = 80,
) -> np.ndarray:
    """Golden-section search over ``log(alpha)`` for ``mean|alpha * a - b|``.

    Works on the last axis, so a stack of rows is searched in parallel. The
    objective is convex in alpha, hence unimodal in log-alpha.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    shape = np.broadcast_shapes(a.shape, b.shape)[:-1]
    lo = np.full(shape, log_bounds[0])
    hi = np.full(shape, log_bounds[1])
    ratio = (np.sqrt(5.0) - 1.0) / 2.0

    def f(t):
        return np.mean(np.abs(np.exp(t)[..., None] * a - b), axis=-1)

    x1, x2 = hi - ratio * (hi - lo), lo + ratio * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        left = f1 < f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        x2n = np.where(left, x1, lo + ratio * (hi - lo))
        x1n = np.where(left, hi - ratio * (hi - lo), x2)
        new = f(np.where(left, x1n, x2n))
        f1, f2 = np.where(left, new, f2), np.where(left, f1, new)
        x1, x2 = x1n, x2n
    return np.exp((lo + hi) / 2.0)


def ablation_values(kind: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matching loss of raw reward values ``a`` (rows allowed) against ``b``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if kind == "L1":
        return np.mean(np.abs(a - b), axis=-1)
    if kind == "L2":
        return np.mean((a - b) ** 2, axis=-1)
    if kind == "L1+scale":
        alpha = best_scale_l1(a, b)
        loss = np.mean(np.abs(alpha[..., None] * a - b), axis=-1)
        # alpha -> 0 is the boundary of the search interval
        return np.minimum(loss, np.mean(np.abs(b), axis=-1))
    if kind == "L2+scale":
        alpha = best_scale_l2(a, b)
        return np.mean((alpha[..., None] * a - b) ** 2, axis=-1)
    raise ValueError(f"unknown ablation metric {kind!r}; expected one of {ABLATION_KINDS}")


def ablation_metric(kind: str, r_a: RewardFunction, r_b: RewardFunction, samples: Samples) -> float:
    """L1/L2 losses (optionally with a fitted scale on ``r_a``) at the Pearson transitions."""
    p = samples.pearson
    a = _checked(r_a(p.states, p.next_states), p.states, p.next_states)
    b = _checked(r_b(p.states, p.next_states), p.states, p.next_states)
    return float(ablation_values(kind, a, b))


def reward_sum(rewards: Sequence[RewardFunction], weights: Sequence[float]) -> RewardFunction:
    def combined(s, s2):
        return sum(w * r(s, s2) for r, w in zip(rewards, weights))

    return combined

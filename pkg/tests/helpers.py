"""Shared builders for tests: random MLP rewards, potentials and small trained discriminators."""

import functools
import time

import numpy as np

from irm import autodiff as ad


def mlp_reward(rng, state_only=False, dim=2, hidden=(16,)):
    """Random tanh MLP reward of ``(s, s')`` (or of ``s`` only, for potentials)."""
    net = ad.Mlp.init(dim if state_only else 2 * dim, 1, hidden, rng)
    if state_only:
        return lambda s: net(np.asarray(s))[:, 0]
    return lambda s, s2: net(np.concatenate([s, s2], axis=1))[:, 0]


def potential_shaping(reward, potential, gamma):
    """``R'(s, s') = R(s, s') + gamma * phi(s') - phi(s)``."""
    return lambda s, s2: reward(s, s2) + gamma * potential(s2) - potential(s)


PRETRAIN_SECONDS: dict = {}


@functools.lru_cache(maxsize=None)
def pretrained(seed: int):
    """Default-config discriminator, buffer and losses for ``seed``, trained once per session."""
    from irm import experiments

    started = time.perf_counter()
    out = experiments.pretrain_seed(experiments.RunConfig(), seed)
    PRETRAIN_SECONDS[seed] = time.perf_counter() - started
    return out


ACCEPTANCE_LINES: list = []


def report(criterion: int, passed: bool, detail: str) -> bool:
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed

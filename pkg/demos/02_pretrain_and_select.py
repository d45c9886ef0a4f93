"""
Pretrain a discriminator, then pick a skill without touching the environment
============================================================================

Scripted planar skills drive toward ``goal_map(z)``. A contrastive
discriminator learns which skill produced each transition. For a new task
reward, IRM picks the skill whose intrinsic reward is EPIC-closest to the
task reward. The baselines instead spend environment rollouts.
"""

import time

import numpy as np

from irm import experiments as X
from irm import selection as S
from irm.planar import shaped_goal_reward, skill_grid, rollout_positions, episode_returns

cfg = X.RunConfig()
seed = 0

started = time.perf_counter()
disc, buffer, losses = X.pretrain_seed(cfg, seed)
print(f"pretrained in {time.perf_counter() - started:.1f}s, "
      f"InfoNCE loss {np.mean(losses[:50]):.3f} -> {np.mean(losses[-50:]):.3f}")

policy, env = cfg.make_policy(), cfg.env
task = shaped_goal_reward((-64.0, 64.0))
sel = cfg.selection_config(seed, gd_steps=1000)

print(f"\n{'method':<16}{'return':>10}{'env steps':>12}   z")
for method in S.METHODS:
    rep = S.select(method, task, sel, disc, policy, env, buffer)
    print(f"{method:<16}{rep.zero_shot_return:>10.3f}{rep.env_steps:>12d}   {np.round(rep.z, 3)}")

# where does that sit among all skills?
grid = skill_grid(64)
returns = episode_returns(rollout_positions(policy, grid, env), task)
print(f"\nbest possible return on a 64x64 skill grid: {returns.max():.3f}")
print(f"90th percentile of grid returns:            {np.percentile(returns, 90):.3f}")

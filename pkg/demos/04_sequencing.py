"""
Sequencing skills for a two-waypoint task
=========================================

The horizon is split in half. The first skill is chosen with no
environment samples. The second is matched on transitions from one rollout
of the first, since that is where the agent will be when it switches.
"""

import numpy as np

from irm import experiments as X
from irm import sequencing as Q
from irm.planar import shaped_goal_reward

cfg = X.RunConfig()
env = X.sequence_env(cfg)
policy = cfg.make_policy()
rewards = [shaped_goal_reward(g) for g in cfg.sequence.goals]

for seed in (0, 1):
    disc, _, _ = X.pretrain_seed(cfg, seed)
    plan = Q.sequential_select(disc, rewards, policy, env, "irm_cem", cfg.selection_config(seed))
    plans = [plan, Q.reversed_plan(plan), Q.random_plan(rewards, env.horizon, 2, seed),
             Q.env_sequential_baseline(policy, rewards, env, cfg.selection_config(seed))]
    print(f"\nseed {seed}")
    for p in plans:
        total, parts = Q.sequential_eval(p, policy, env, seed)
        goals = [np.round(policy.goal_map(s.z)).tolist() for s in p.segments]
        print(f"  {p.method:<22} return {total:8.3f}  env steps {p.env_steps:4d}  heads for {goals}")

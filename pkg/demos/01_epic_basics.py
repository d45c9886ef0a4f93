"""
EPIC distance between rewards
=============================

Two rewards that differ only by potential shaping, or by a positive affine
map, induce the same optimal policies. EPIC sees them as identical.
"""

import numpy as np

from irm import epic
from irm.planar import shaped_goal_reward

rng = np.random.default_rng(0)
samples = epic.draw_samples(epic.SampleSpec(n_pearson=512, n_canonical=1024), rng)
gamma = samples.gamma

goal = shaped_goal_reward((-64.0, 64.0))

# a potential: squared distance to an arbitrary point, rescaled
def phi(s):
    return np.sum((s - np.array([30.0, -10.0])) ** 2, axis=1) / 1e4

def shaped(s, s2):
    return goal(s, s2) + gamma * phi(s2) - phi(s)

def scaled(s, s2):
    return 3.0 * goal(s, s2) + 7.0

print("D(goal, goal + shaping) =", epic.epic_distance(goal, shaped, samples).distance)
print("D(goal, 3 goal + 7)     =", epic.epic_distance(goal, scaled, samples).distance)
print("D(goal, -goal)          =", epic.epic_distance(goal, lambda s, s2: -goal(s, s2), samples).distance)

# opposite corners are far apart, nearby goals are close
for other in [(-60.0, 60.0), (0.0, 0.0), (64.0, -64.0)]:
    d = epic.epic_distance(goal, shaped_goal_reward(other), samples).distance
    print(f"D(goal at (-64, 64), goal at {other}) = {d:.4f}")

# a constant reward carries no information: the comparison is flagged, not NaN
flat = epic.epic_distance(goal, lambda s, s2: np.ones(len(s)), samples)
print("constant reward:", flat)

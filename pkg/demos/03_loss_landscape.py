"""
EPIC loss landscapes over the skill square
==========================================

Sweeping z over a grid shows which skills match a task. Opposite-corner
goals give roughly mirror-image landscapes. A tighter sparse-goal tolerance
gives a flatter, less informative one.
"""

import numpy as np

from irm import experiments as X
from irm.planar import shaped_goal_reward, sparse_goal_reward

cfg = X.RunConfig()
disc, _, _ = X.pretrain_seed(cfg, 0)

SHADES = " .:-=+*#%@"


def show(losses):
    # low loss is dark; rows run from z1 = 1 (top) to z1 = 0
    lo, hi = losses.min(), losses.max()
    levels = ((hi - losses) / (hi - lo + 1e-12) * (len(SHADES) - 1)).round().astype(int)
    for row in levels.T[::-1]:
        print("  " + "".join(SHADES[k] * 2 for k in row))


rewards = {
    "top left (-64, 64)": shaped_goal_reward((-64.0, 64.0)),
    "bottom right (64, -64)": shaped_goal_reward((64.0, -64.0)),
}
mats = {}
for name, reward in rewards.items():
    _, mats[name], _ = X.sweep_losses(disc, reward, cfg, 0, 24)
    print(f"\n{name}: min loss {mats[name].min():.3f}")
    show(mats[name])

a, b = mats.values()
print("\ncell-wise correlation of the two landscapes:", round(float(np.corrcoef(a.ravel(), b.ravel())[0, 1]), 3))

for tol in (0.03, 0.07):
    _, m, _ = X.sweep_losses(disc, sparse_goal_reward((-64.0, 64.0), tol), cfg, 0, 24)
    q75, q25 = np.percentile(m, [75, 25])
    print(f"sparse goal, tolerance {tol}: loss IQR {q75 - q25:.4f}")

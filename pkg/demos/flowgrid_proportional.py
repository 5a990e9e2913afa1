"""Train a GFlowNet on a two-mode grid and compare it with a reward maximizer.

The GFlowNet should sample terminal cells in proportion to their reward, so
both modes show up.  The maximizer collapses onto the taller one.

    python demos/flowgrid_proportional.py
"""
import numpy as np

from stepflow.envs import FlowGridEnv
from stepflow.gfn import (
    BaselineConfig,
    GFNConfig,
    GridReward,
    PolicyModel,
    entropy,
    l1_distance,
    terminal_distribution,
    train_baseline_maximizer,
    train_gfn,
)

env = FlowGridEnv(2, 8)
problem = env.problems()[0]
target = env.target_distribution()

gfn = PolicyModel(env, hash_dim=0)
cfg = GFNConfig(lam=1.0, learning_rate=0.05, k=16, batch_size=16, temperature=1.0, iterations=2000, lr_schedule="cosine")
train_gfn(env.problems(), gfn, GridReward(env), cfg, np.random.default_rng(0))

base = PolicyModel(env, hash_dim=0)
train_baseline_maximizer(env.problems(), base, GridReward(env), BaselineConfig(learning_rate=0.05, batch_size=64, iterations=100), np.random.default_rng(0))

print(f"target entropy {entropy(target):.3f}")
for name, pol in (("gfn", gfn), ("baseline", base)):
    dist = terminal_distribution(pol, env, problem)
    top = sorted(dist.items(), key=lambda kv: -kv[1])[:3]
    print(f"{name:>8}: L1 to target {l1_distance(dist, target):.4f}, entropy {entropy(dist):.3f}, top cells {top}")

"""Estimate distance-to-solution without the tree, from uniform rollouts.

d_hat = 1 - (successes / K). For a state whose true success probability is p,
the estimate is binomial with sd sqrt(p(1-p)/K), at most 1/(2 sqrt K).

Run: python3 demos/04_monte_carlo.py
"""

import numpy as np

from treeball.nn import Rng
from treeball.stage1 import McConfig, mc_estimate, success_count, uniform_behavior
from treeball.tasks import generate_instance, get_engine


def exact_success(eng, inst, s, steps):
    if eng.is_goal(inst, s):
        return 1.0
    ops = eng.ops(inst, s)
    if not ops or steps == 0:
        return 0.0
    return float(np.mean([exact_success(eng, inst, eng.apply(inst, s, o), steps - 1) for o in ops]))


eng = get_engine("gc")
inst = generate_instance("gc", None, 12)
p = exact_success(eng, inst, inst.init_state, eng.max_depth)
print(inst.prompt)
print(f"exact uniform-walk success probability from the start: {p:.3f}")

rng = Rng(0)
for K in (8, 32, 128):
    est = [1 - success_count(inst, inst.init_state, uniform_behavior, K, rng.child(K, r), eng.max_depth) / K for r in range(200)]
    print(f"K={K:4d}: mean d_hat {np.mean(est):.3f}  sd {np.std(est, ddof=1):.4f}  (binomial {np.sqrt(p * (1 - p) / K):.4f})")

# the rollouts form a prefix trie; every trie node gets its own estimate
res = mc_estimate(inst, uniform_behavior, McConfig(K=32), Rng(1))
print(f"\ntrie: {len(res.states)} states, depth up to {res.depth.max()}")
for k in np.argsort(res.depth)[:6]:
    print(f"   depth {res.depth[k]}  d_hat {res.d_hat[k]:.3f}")

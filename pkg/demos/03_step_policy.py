"""Train the step policy with and without the ball signal on Game of 24.

The policy scores each admissible op from the current context, the op's own
features and a lifted ball embedding of the state that op leads to. With the
signal off the lifted vector is zero. DAgger mixes oracle and learner
rollouts; offline SFT only ever sees oracle traces.

Run: python3 demos/03_step_policy.py   (about five minutes)
"""

import numpy as np

from treeball.eval import evaluate, signal_divergence
from treeball.stage1 import HeadConfig, embed_graph, graph_from_tree, train_head
from treeball.stage2 import PolicyConfig, dagger_train, infer, mean_embedding, offline_sft_train
from treeball.tasks import generate_instance, get_engine
from treeball.tree import enumerate_tree

trees = [enumerate_tree(generate_instance("g24", None, s)) for s in range(80)]
test = [generate_instance("g24", None, 50_000 + s) for s in range(150)]
head, _ = train_head(trees, HeadConfig(seed=0))

print("random  ", evaluate("random", None, test).accuracy)
policies = {}
for name in ("on", "off", "sft"):
    cfg = PolicyConfig(seed=0, signal_mode="off" if name == "off" else "on")
    train = offline_sft_train if name == "sft" else dagger_train
    policies[name], curves = train(trees, head, cfg)
    print(f"{name:8s}", round(evaluate(policies[name], head, test).accuracy, 3), f"(final train loss {curves[-1]['loss']:.3f})")

# one decode with the signal on
eng = get_engine("g24")
res = infer(test[0], policies["on"], head)
print("\n" + test[0].prompt)
for op, r in zip(res.ops, res.d_origin):
    print(f"   d(0,z)={r:.2f}  ->  {eng.render_op(op)}")
print("   solved" if res.success else "   not solved")

# how much does swapping the signal for the mean embedding move each decision?
Z = np.concatenate([embed_graph(head, graph_from_tree(t)) for t in trees])
rows, rho = signal_divergence(policies["on"], head, test[:60], mean_embedding(Z, head.c))
kl = np.array([r["kl"] for r in rows])
print(f"\nKL(signal || mean signal): median {np.median(kl):.3f}, max {kl.max():.3f}; Spearman with d(0,z) {rho:+.3f}")

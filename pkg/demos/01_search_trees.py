"""Search trees for the five tasks: shape, dead ends, and what the oracle says.

Run: python3 demos/01_search_trees.py
"""

import numpy as np

from treeball.tasks import generate_instance, get_engine
from treeball.tree import distance_to_solution, enumerate_tree, oracle, tree_stats

# one Game-of-24 instance, start to finish
inst = generate_instance("g24", None, 3)
eng = get_engine("g24")
print(inst.prompt)
tree = enumerate_tree(inst)
d = distance_to_solution(tree)
print(f"{len(tree)} nodes, d(root) = {d[0]}, solved leaves = {int(tree.success.sum())}")

# follow the oracle down from the root
node, steps = 0, []
while list(tree.children(node)):
    ops = oracle(tree, d, node)
    steps.append(eng.render_op(ops[0]))
    node = tree.child_by_op(node, ops[0])
print("oracle trace:", " | ".join(steps))

# how much of the tree is useless?
leaves = np.array([not list(tree.children(i)) for i in range(len(tree))])
print(f"leaves: {leaves.sum()}, of which dead: {(leaves & ~tree.success).sum()}")

# aggregate statistics over small samples of every task
print()
for task, params in [("g24", None), ("nq", {"n": 8}), ("gc", None), ("rc", None), ("bw", None)]:
    trees = [enumerate_tree(generate_instance(task, params, s)) for s in range(20)]
    st = tree_stats(trees)
    print(f"{task:4s} branching {st.avg_branching:5.2f}  max depth {st.max_depth:2d}  dead-end {st.dead_end_ratio:6.1%}  ({st.dead_end_kind})")

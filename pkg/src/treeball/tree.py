"""Exhaustive search trees over task states.

Nodes are numbered in BFS order, so the children of a node occupy a contiguous
id range and every parent precedes its children. Transpositions (the same
canonical state reached along different paths) stay distinct nodes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .tasks import get_engine

INF = np.inf
DEFAULT_NODE_CAP = 5_000_000


class TreeBudgetExceeded(RuntimeError):
    pass


@dataclass
class SearchTree:
    instance: object
    states: list
    parent: np.ndarray
    op: list  # op that produced the node (None at the root)
    depth: np.ndarray
    child_start: np.ndarray
    child_count: np.ndarray
    success: np.ndarray
    depth_cap: int
    _anc: np.ndarray | None = field(default=None, repr=False)

    @property
    def engine(self):
        return get_engine(self.instance.task_id)

    def __len__(self):
        return len(self.states)

    @property
    def root(self) -> int:
        return 0

    def children(self, i: int) -> range:
        s = int(self.child_start[i])
        return range(s, s + int(self.child_count[i]))

    def child_by_op(self, i: int, op) -> int:
        for c in self.children(i):
            if self.op[c] == op:
                return c
        raise KeyError(f"op {op!r} is not an edge out of node {i}")

    @property
    def leaves(self) -> np.ndarray:
        return self.child_count == 0

    def ancestors(self) -> np.ndarray:
        """``anc[i, k]`` is the depth-k ancestor of node i (``-1`` below its depth)."""
        if self._anc is None:
            n, dmax = len(self), int(self.depth.max())
            anc = np.full((n, dmax + 1), -1, dtype=np.int64)
            anc[0, 0] = 0
            for i in range(1, n):
                p = self.parent[i]
                anc[i] = anc[p]
                anc[i, self.depth[i]] = i
            self._anc = anc
        return self._anc

    def path_to(self, i: int) -> list:
        path = []
        while i >= 0:
            path.append(i)
            i = int(self.parent[i])
        return path[::-1]


def enumerate_tree(instance, depth_cap: int | None = None, node_cap: int = DEFAULT_NODE_CAP) -> SearchTree:
    """Expand every admissible op breadth-first up to ``depth_cap``.

    Goal states and states without admissible ops are leaves; nodes at
    ``depth_cap`` are leaves too. An op that immediately undoes the op leading
    into its node is not expanded (only Blocksworld has such pairs).
    """
    eng = get_engine(instance.task_id)
    cap = eng.tree_depth_cap(instance) if depth_cap is None else int(depth_cap)
    states = [instance.init_state]
    parent = [-1]
    ops = [None]
    depth = [0]
    child_start = []
    child_count = []
    success = []
    i = 0
    while i < len(states):
        s = states[i]
        goal = eng.is_goal(instance, s)
        success.append(goal)
        child_start.append(len(states))
        if goal or depth[i] >= cap:
            child_count.append(0)
        else:
            kids = [op for op in eng.ops(instance, s) if not eng.is_inverse(ops[i], op)]
            child_count.append(len(kids))
            if len(states) + len(kids) > node_cap:
                raise TreeBudgetExceeded(f"{instance.task_id}: more than {node_cap} nodes")
            for op in kids:
                states.append(eng.apply(instance, s, op))
                parent.append(i)
                ops.append(op)
                depth.append(depth[i] + 1)
        i += 1
    return SearchTree(
        instance=instance,
        states=states,
        parent=np.array(parent, dtype=np.int64),
        op=ops,
        depth=np.array(depth, dtype=np.int64),
        child_start=np.array(child_start, dtype=np.int64),
        child_count=np.array(child_count, dtype=np.int64),
        success=np.array(success, dtype=bool),
        depth_cap=cap,
    )


def distance_to_solution(tree: SearchTree) -> np.ndarray:
    """Minimum number of downward edges to a successful leaf; ``inf`` if none.

    Backward induction: children carry larger ids than their parent.
    """
    d = np.where(tree.success, 0.0, INF)
    for i in range(len(tree) - 1, 0, -1):
        p = tree.parent[i]
        if d[i] + 1 < d[p]:
            d[p] = d[i] + 1
    return d


def tree_distance(tree: SearchTree, i: int, j) -> np.ndarray | int:
    """Edge count of the tree path between node ``i`` and node(s) ``j``."""
    anc = tree.ancestors()
    j_arr = np.atleast_1d(np.asarray(j, dtype=np.int64))
    same = (anc[j_arr] == anc[i][None, :]) & (anc[i][None, :] >= 0)
    lca_depth = same.sum(axis=1) - 1
    out = tree.depth[i] + tree.depth[j_arr] - 2 * lca_depth
    return int(out[0]) if np.ndim(j) == 0 else out


def oracle(tree: SearchTree, dmap: np.ndarray, i: int) -> list:
    """Ops at node ``i`` whose child still reaches a successful leaf."""
    return [tree.op[c] for c in tree.children(i) if dmap[c] < INF]


def oracle_label(tree: SearchTree, dmap: np.ndarray, i: int):
    """Lexicographically smallest oracle op (children are stored in op order), or None."""
    for c in tree.children(i):
        if dmap[c] < INF:
            return tree.op[c]
    return None


# ---------------------------------------------------------------------------
# statistics


@dataclass
class TreeStats:
    task_id: str
    n_trees: int
    internal_nodes: int
    avg_branching: float
    max_depth: int
    dead_end_ratio: float
    dead_end_kind: str


def _plan_edge_counts(tree: SearchTree) -> tuple[int, int]:
    """(edges, edges whose action does not shorten the BFS goal distance)."""
    eng = tree.engine
    h = [eng.goal_distance(tree.instance, s) for s in tree.states]
    edges = off = 0
    for i in range(1, len(tree)):
        edges += 1
        hp, hc = h[tree.parent[i]], h[i]
        if hp is None or hc is None or hc != hp - 1:
            off += 1
    return edges, off


def tree_stats(trees: list) -> TreeStats:
    """Aggregate statistics, pooled over all trees.

    Branching is edges / internal nodes. Depth is the longest root-to-success
    path. Dead-end ratio is failed leaves / leaves, except for Blocksworld
    (reversible actions) where it is the share of actions that do not lie on a
    shortest plan to the goal.
    """
    if not trees:
        raise ValueError("need at least one tree")
    task = trees[0].instance.task_id
    internal = edges = leaves = failed = 0
    max_depth = 0
    plan_edges = plan_off = 0
    for t in trees:
        inner = t.child_count > 0
        internal += int(inner.sum())
        edges += int(t.child_count.sum())
        leaf = ~inner
        leaves += int(leaf.sum())
        failed += int((leaf & ~t.success).sum())
        if t.success.any():
            max_depth = max(max_depth, int(t.depth[t.success].max()))
        if task == "bw":
            e, o = _plan_edge_counts(t)
            plan_edges += e
            plan_off += o
    branching = edges / internal if internal else 0.0
    if task == "bw":
        ratio, kind = (plan_off / plan_edges if plan_edges else 0.0), "off_shortest_plan_actions"
    else:
        ratio, kind = (failed / leaves if leaves else 0.0), "failed_leaves"
    return TreeStats(task, len(trees), internal, branching, max_depth, ratio, kind)


STATS_COLUMNS = ["task", "n_trees", "internal_nodes", "avg_branching", "max_depth", "dead_end_ratio", "dead_end_kind"]


def stats_csv(rows: list, meta: dict | None = None) -> str:
    buf = io.StringIO()
    if meta:
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    for r in rows:
        w.writerow([r.task_id, r.n_trees, r.internal_nodes, f"{r.avg_branching:.4f}", r.max_depth, f"{r.dead_end_ratio:.4f}", r.dead_end_kind])
    return buf.getvalue()


def dump_tree(tree: SearchTree, dmap: np.ndarray | None = None):
    """Yield one JSON line per node: id, parent, op, depth, d, success."""
    eng = tree.engine
    if dmap is None:
        dmap = distance_to_solution(tree)
    for i in range(len(tree)):
        op = tree.op[i]
        rec = {
            "id": i,
            "parent": int(tree.parent[i]),
            "op": None if op is None else eng.render_op(op),
            "depth": int(tree.depth[i]),
            "d": None if not np.isfinite(dmap[i]) else int(dmap[i]),
            "success": bool(tree.success[i]),
        }
        yield json.dumps(rec, ensure_ascii=False)


def dedup_report(tree: SearchTree) -> dict:
    """How many tree nodes share a canonical state with an earlier node."""
    seen = set()
    dup = 0
    for s in tree.states:
        if s in seen:
            dup += 1
        else:
            seen.add(s)
    return {"nodes": len(tree), "distinct_states": len(seen), "transpositions": dup}


# ---------------------------------------------------------------------------
# task-agnostic augmentation


@dataclass
class ContextGoalPair:
    node: int
    state: object
    context: str
    goal: object


def _context_text(tree: SearchTree, i: int) -> str:
    eng = tree.engine
    steps = [eng.render_op(tree.op[k]) for k in tree.path_to(i)[1:]]
    state = eng.render_state(tree.instance, tree.states[i])
    return f"state: {state}" + (f" | so far: {'; '.join(steps)}" if steps else "")


def augment_pairs(tree: SearchTree, dmap: np.ndarray | None = None, seed: int = 0, exclude: set | None = None) -> list:
    """(context, goal) pairs harvested from internal solution-bearing nodes.

    State-reduction tasks (G24): the goal is a terminal value reachable below the
    node, drawn with a per-node seeded RNG; the root always keeps the instance's
    own target. State-expansion tasks (RC): the goal is a fact derivable below
    the node that is not yet known there. ``exclude`` holds context strings
    already present in held-out splits; matching pairs are dropped.
    """
    from .tasks.base import derive_seed

    if dmap is None:
        dmap = distance_to_solution(tree)
    task = tree.instance.task_id
    exclude = exclude or set()
    out = []
    n = len(tree)
    # terminal values / derivable facts below each node, gathered bottom-up
    below: list = [None] * n
    for i in range(n - 1, -1, -1):
        s = tree.states[i]
        if task == "g24":
            acc = {s[0]} if tree.child_count[i] == 0 and len(s) == 1 else set()
        else:
            acc = set(s)
        for c in tree.children(i):
            acc |= below[c]
        below[i] = acc
    for i in range(n):
        if tree.child_count[i] == 0 or not np.isfinite(dmap[i]):
            continue
        if task == "g24":
            options = sorted(below[i])
        else:
            options = sorted(below[i] - set(tree.states[i]))
        if not options:
            continue
        if i == 0 and tree.instance.goal in options:
            goal = tree.instance.goal
        else:
            rng = np.random.default_rng(derive_seed(seed, tree.instance.seed, i))
            goal = options[int(rng.integers(len(options)))]
        ctx = _context_text(tree, i)
        if ctx in exclude:
            continue
        out.append(ContextGoalPair(i, tree.states[i], ctx, goal))
    return out

"""Four-action STRIPS Blocksworld with BFS-optimal reference plans."""

from __future__ import annotations

from collections import deque
from dataclasses import replace

import numpy as np

from .base import GenerationExhausted, ProblemInstance, TaskEngine, Trace, Unsolvable, op_sort_key

PALETTE = ("red", "orange", "yellow", "green", "blue", "purple")
N_MAX = 5
TABLE = "table"
HAND = "hand"


def make_state(support: dict) -> tuple:
    return tuple(sorted(support.items()))


def clear_blocks(state) -> set:
    sup = dict(state)
    covered = {v for v in sup.values() if v not in (TABLE, HAND)}
    return {b for b, v in sup.items() if b not in covered and v != HAND}


def holding(state):
    for b, v in state:
        if v == HAND:
            return b
    return None


def on_facts(state) -> frozenset:
    return frozenset((b, v) for b, v in state if v not in (TABLE, HAND))


def describe(state) -> str:
    sup = dict(state)
    clear = sorted(clear_blocks(state))
    held = holding(state)
    parts = []
    if clear:
        parts.append(", ".join(clear) + (" is" if len(clear) == 1 else " are") + " clear")
    parts.append("the hand is empty" if held is None else f"the hand holds {held}")
    for b, v in sorted(sup.items()):
        if v not in (TABLE, HAND):
            parts.append(f"{b} is on top of {v}")
    table = sorted(b for b, v in sup.items() if v == TABLE)
    if table:
        parts.append(", ".join(table) + (" is" if len(table) == 1 else " are") + " on the table")
    return "; ".join(parts) + "."


class Blocksworld(TaskEngine):
    task_id = "bw"
    max_depth = 16
    feature_dim = N_MAX * (N_MAX + 2) * 2
    op_feature_dim = 4 + N_MAX * 2

    default_params = {"n_choices": [4, 5], "min_plan": 3}
    tree_slack = 4

    def ops(self, inst, state):
        if self.is_goal(inst, state):
            return []
        sup = dict(state)
        clear = clear_blocks(state)
        held = holding(state)
        ops = []
        if held is None:
            for b in clear:
                if sup[b] == TABLE:
                    ops.append(("pick-up", b, None))
                else:
                    ops.append(("unstack", b, sup[b]))
        else:
            ops.append(("put-down", held, None))
            for c in clear:
                ops.append(("stack", held, c))
        return sorted(ops, key=lambda o: op_sort_key(self.render_op(o)))

    def apply(self, inst, state, op):
        kind, b, c = op
        sup = dict(state)
        if kind in ("pick-up", "unstack"):
            sup[b] = HAND
        elif kind == "put-down":
            sup[b] = TABLE
        else:
            sup[b] = c
        return make_state(sup)

    def is_goal(self, inst, state, goal=None):
        goal = inst.goal if goal is None else goal
        return holding(state) is None and goal <= on_facts(state)

    def render_op(self, op):
        kind, b, c = op
        if kind == "pick-up":
            return f"pick up {b}"
        if kind == "put-down":
            return f"put down {b}"
        if kind == "stack":
            return f"stack {b} on {c}"
        return f"unstack {b} from {c}"

    def render_state(self, inst, state):
        return describe(state)

    # features --------------------------------------------------------------
    def _index(self, inst):
        return {b: i for i, b in enumerate(inst.data["blocks"])}

    def _support_matrix(self, inst, sup_items):
        idx = self._index(inst)
        m = np.zeros((N_MAX, N_MAX + 2))
        for b, v in sup_items:
            col = N_MAX if v == TABLE else N_MAX + 1 if v == HAND else idx[v]
            m[idx[b], col] = 1.0
        return m.ravel()

    def featurize(self, inst, state, goal=None):
        goal = inst.goal if goal is None else goal
        return np.concatenate([self._support_matrix(inst, state), self._support_matrix(inst, goal)])

    def op_features(self, inst, state, op):
        kinds = ("pick-up", "put-down", "stack", "unstack")
        idx = self._index(inst)
        kind, b, c = op
        a = np.zeros(N_MAX)
        a[idx[b]] = 1.0
        t = np.zeros(N_MAX)
        if c is not None:
            t[idx[c]] = 1.0
        return np.concatenate([[1.0 if kind == k else 0.0 for k in kinds], a, t])

    # planning --------------------------------------------------------------
    def state_graph(self, inst):
        """Reachable states, adjacency, and BFS goal distance ``h`` (cached)."""
        cache = inst.data.get("_graph")
        if cache is not None:
            return cache
        start = inst.init_state
        adj = {}
        queue = deque([start])
        adj[start] = None
        order = []
        while queue:
            s = queue.popleft()
            order.append(s)
            nbrs = [self.apply(inst, s, op) for op in self._raw_ops(s)]
            adj[s] = nbrs
            for t in nbrs:
                if t not in adj:
                    adj[t] = None
                    queue.append(t)
        h = {s: 0 for s in order if self.is_goal(inst, s)}
        queue = deque(h)
        while queue:
            s = queue.popleft()
            for t in adj[s]:  # actions are reversible, so the graph is symmetric
                if t not in h:
                    h[t] = h[s] + 1
                    queue.append(t)
        inst.data["_graph"] = (adj, h)
        return adj, h

    def _raw_ops(self, state):
        sup = dict(state)
        clear = clear_blocks(state)
        held = holding(state)
        if held is None:
            return [("pick-up", b, None) if sup[b] == TABLE else ("unstack", b, sup[b]) for b in clear]
        return [("put-down", held, None)] + [("stack", held, c) for c in clear]

    def is_inverse(self, prev_op, op):
        if prev_op is None:
            return False
        kind, b, c = prev_op
        undo = {"pick-up": "put-down", "put-down": "pick-up", "unstack": "stack", "stack": "unstack"}[kind]
        return op == (undo, b, c)

    def tree_depth_cap(self, inst):
        """Optimal plan length plus a fixed slack, never beyond ``max_depth``."""
        return min(self.max_depth, self.goal_distance(inst, inst.init_state) + self.tree_slack)

    def goal_distance(self, inst, state):
        return self.state_graph(inst)[1].get(state)

    def solve(self, inst, goal=None):
        if goal is not None and goal != inst.goal:
            return super().solve(inst, goal)
        _, h = self.state_graph(inst)
        s = inst.init_state
        if s not in h:
            raise Unsolvable("bw: goal unreachable")
        states, ops = [s], []
        while h[s] > 0:
            for op in self.ops(inst, s):
                t = self.apply(inst, s, op)
                if h.get(t) == h[s] - 1:
                    s = t
                    states.append(t)
                    ops.append(op)
                    break
        return Trace(states, ops, True)

    # generation ------------------------------------------------------------
    @staticmethod
    def random_config(blocks, rng) -> dict:
        order = list(rng.permutation(len(blocks)))
        sup = {}
        tops = []
        for i in order:
            b = blocks[i]
            k = int(rng.integers(len(tops) + 1))
            if k == len(tops):
                sup[b] = TABLE
                tops.append(b)
            else:
                sup[b] = tops[k]
                tops[k] = b
        return sup

    def make_instance(self, blocks, init_support, goal_on, params=None, seed=0):
        init = make_state(dict(init_support))
        goal = frozenset(tuple(x) for x in goal_on)
        goal_text = ", ".join(f"{b} on {c}" for b, c in sorted(goal))
        init_text = describe(init)
        return ProblemInstance(
            task_id=self.task_id,
            params=dict(params or {}),
            seed=int(seed),
            init_state=init,
            goal=goal,
            data={
                "blocks": list(blocks),
                "init": [list(x) for x in init],
                "goal_on": [list(x) for x in sorted(goal)],
            },
            prompt=f"Initial state: {init_text} Goal: {goal_text}.",
            init_state_text=init_text,
        )

    def generate(self, params, seed):
        params = {**self.default_params, **(params or {})}
        rng = np.random.default_rng(seed)
        for _ in range(1000):
            n = int(params["n"]) if "n" in params else int(rng.choice(params["n_choices"]))
            blocks = [PALETTE[i] for i in sorted(rng.choice(len(PALETTE), size=n, replace=False))]
            init = self.random_config(blocks, rng)
            target = self.random_config(blocks, rng)
            goal = on_facts(make_state(target))
            if not goal:
                continue
            inst = self.make_instance(blocks, init.items(), goal, params, seed)
            h0 = self.goal_distance(inst, inst.init_state)
            if h0 is None or h0 < params["min_plan"]:
                continue
            return replace(inst, answer_label=self.render_trace(inst, self.solve(inst)))
        raise GenerationExhausted("bw: no instance with a long enough optimal plan")

    def from_record(self, rec):
        inst = self.make_instance(rec["blocks"], [tuple(x) for x in rec["init"]], rec["goal_on"], rec["params"], rec["seed"])
        return replace(inst, answer_label=self.render_trace(inst, self.solve(inst)))

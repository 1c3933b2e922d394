"""Graph 3-coloring on small Erdos-Renyi graphs, vertices colored in index order."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .base import GenerationExhausted, ProblemInstance, TaskEngine, op_sort_key

COLORS = ("R", "G", "B")
N_MAX = 8


def consistent(edges_of, state, vertex, color) -> bool:
    return all(state[u] != color for u in edges_of[vertex] if u < len(state))


class GraphColoring(TaskEngine):
    task_id = "gc"
    max_depth = 8
    feature_dim = N_MAX * (N_MAX - 1) // 2 + N_MAX * 3 + 1
    op_feature_dim = 3 + 2

    default_params = {"n_choices": [7, 8], "p_choices": [0.4, 0.5, 0.6], "colors": 3}

    def _adj(self, inst):
        # cache neighbour lists on the instance data dict (immutable after creation)
        adj = inst.data.get("_adj")
        if adj is None:
            n = inst.data["n"]
            adj = [[] for _ in range(n)]
            for u, v in inst.data["edges"]:
                adj[u].append(v)
                adj[v].append(u)
            adj = tuple(tuple(sorted(a)) for a in adj)
            inst.data["_adj"] = adj
        return adj

    def ops(self, inst, state):
        n = inst.data["n"]
        v = len(state)
        if v >= n:
            return []
        adj = self._adj(inst)
        ops = [(v, c) for c in range(len(COLORS)) if consistent(adj, state, v, c)]
        return sorted(ops, key=lambda o: op_sort_key(self.render_op(o)))

    def apply(self, inst, state, op):
        return tuple(state) + (op[1],)

    def is_goal(self, inst, state, goal=None):
        n = inst.data["n"]
        if len(state) != n:
            return False
        return all(state[u] != state[v] for u, v in inst.data["edges"])

    def render_op(self, op):
        return f"V{op[0]}={COLORS[op[1]]}"

    def render_state(self, inst, state):
        return ", ".join(f"V{i}={COLORS[c]}" for i, c in enumerate(state))

    def featurize(self, inst, state, goal=None):
        n = inst.data["n"]
        edges = set(map(tuple, inst.data["edges"]))
        tri = [1.0 if (u, v) in edges else 0.0 for u in range(N_MAX) for v in range(u + 1, N_MAX)]
        colors = np.zeros((N_MAX, 3))
        for i, c in enumerate(state):
            colors[i, c] = 1.0
        return np.concatenate([tri, colors.ravel(), [len(state) / n]])

    def op_features(self, inst, state, op):
        v, c = op
        adj = self._adj(inst)
        onehot = [1.0 if c == k else 0.0 for k in range(3)]
        later = [u for u in adj[v] if u > v]
        # later neighbours that lose their last free colour after this move
        child = self.apply(inst, state, op)
        blocked = 0
        for u in later:
            used = {child[w] for w in adj[u] if w < len(child)}
            blocked += len(used) >= 3
        n = inst.data["n"]
        return np.array(onehot + [len(later) / n, blocked / n])

    def make_instance(self, n, edges, params=None, seed=0):
        edges = sorted((min(u, v), max(u, v)) for u, v in edges)
        etext = ", ".join(f"(V{u},V{v})" for u, v in edges)
        prompt = f"Color vertices V0..V{n - 1} with R, G, B so that no edge joins equal colors. Edges: {etext}."
        return ProblemInstance(
            task_id=self.task_id,
            params=dict(params or {}),
            seed=int(seed),
            init_state=(),
            goal=None,
            data={"n": n, "edges": [list(e) for e in edges]},
            prompt=prompt,
            init_state_text=f"vertices {n}; edges {etext}",
        )

    def generate(self, params, seed):
        params = {**self.default_params, **(params or {})}
        rng = np.random.default_rng(seed)
        for _ in range(1000):
            n = int(params["n"]) if "n" in params else int(rng.choice(params["n_choices"]))
            p = float(params["p"]) if "p" in params else float(rng.choice(params["p_choices"]))
            edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
            if not edges:
                continue
            inst = self.make_instance(n, edges, params, seed)
            try:
                trace = self.solve(inst)
            except Exception:
                continue
            return replace(inst, answer_label=self.render_trace(inst, trace))
        raise GenerationExhausted("gc: no 3-colorable graph within retry budget")

    def from_record(self, rec):
        inst = self.make_instance(rec["n"], rec["edges"], rec["params"], rec["seed"])
        return replace(inst, answer_label=self.render_trace(inst, self.solve(inst)))

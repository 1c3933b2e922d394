"""N-Queens, one row per step."""

from __future__ import annotations

from dataclasses import replace
from functools import lru_cache

import numpy as np

from .base import GenerationExhausted, ProblemInstance, TaskEngine, op_sort_key

N_MAX = 8


def attacks(placed, col) -> bool:
    row = len(placed)
    for r, c in enumerate(placed):
        if c == col or abs(c - col) == row - r:
            return True
    return False


@lru_cache(maxsize=None)
def all_solutions(n: int) -> tuple:
    out = []

    def rec(placed):
        if len(placed) == n:
            out.append(tuple(placed))
            return
        for col in range(1, n + 1):
            if not attacks(placed, col):
                placed.append(col)
                rec(placed)
                placed.pop()

    rec([])
    return tuple(out)


class NQueens(TaskEngine):
    task_id = "nq"
    max_depth = 8
    feature_dim = N_MAX + 2
    op_feature_dim = N_MAX + 3

    default_params = {"n": 7, "k_choices": [0, 1, 2, 3, 4]}

    def _n(self, inst):
        return inst.data["n"]

    def ops(self, inst, state):
        n = self._n(inst)
        if len(state) >= n:
            return []
        row = len(state) + 1
        ops = [(row, c) for c in range(1, n + 1) if not attacks(state, c)]
        return sorted(ops, key=lambda o: op_sort_key(self.render_op(o)))

    def apply(self, inst, state, op):
        return tuple(state) + (op[1],)

    def is_goal(self, inst, state, goal=None):
        return len(state) == self._n(inst)

    def render_op(self, op):
        return f"row {op[0]} col {op[1]}"

    def render_state(self, inst, state):
        return "[" + ",".join(str(c) for c in state) + "]"

    def featurize(self, inst, state, goal=None):
        n = self._n(inst)
        cols = [c / n for c in state] + [0.0] * (N_MAX - len(state))
        return np.array(cols + [n / N_MAX, len(state) / N_MAX])

    def op_features(self, inst, state, op):
        n = self._n(inst)
        onehot = [0.0] * N_MAX
        onehot[op[1] - 1] = 1.0
        child = self.apply(inst, state, op)
        # free squares left in the next row after this placement
        free = sum(not attacks(child, c) for c in range(1, n + 1)) if len(child) < n else 0
        return np.array(onehot + [op[1] / n, op[0] / n, free / n])

    def make_instance(self, n, prefix, params=None, seed=0):
        params = dict(params or {"n": n})
        prefix = tuple(int(c) for c in prefix)
        text = ",".join(str(c) for c in prefix)
        prompt = (
            f"Place {n} non-attacking queens on a {n}x{n} board, one per row. "
            f"Rows 1-{len(prefix)} already hold queens in columns [{text}]."
            if prefix
            else f"Place {n} non-attacking queens on a {n}x{n} board, one per row."
        )
        return ProblemInstance(
            task_id=self.task_id,
            params=params,
            seed=int(seed),
            init_state=prefix,
            goal=n,
            data={"n": n, "prefix": list(prefix)},
            prompt=prompt,
            init_state_text=f"[{text}]",
        )

    def generate(self, params, seed):
        params = {**self.default_params, **(params or {})}
        rng = np.random.default_rng(seed)
        n = int(params["n"])
        k = int(params["k"]) if "k" in params else int(rng.choice(params["k_choices"]))
        sols = all_solutions(n)
        if not sols:
            raise GenerationExhausted(f"nq: no solutions for n={n}")
        sol = sols[int(rng.integers(len(sols)))]
        inst = self.make_instance(n, sol[:k], params, seed)
        return replace(inst, answer_label=self.render_trace(inst, self.solve(inst)))

    def from_record(self, rec):
        inst = self.make_instance(rec["n"], rec["prefix"], rec["params"], rec["seed"])
        return replace(inst, answer_label=self.render_trace(inst, self.solve(inst)))

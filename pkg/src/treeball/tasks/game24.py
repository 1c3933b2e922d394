"""Game of 24 over exact rationals."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .base import GenerationExhausted, ProblemInstance, TaskEngine, op_sort_key

OPS = ("+", "-", "×", "÷")


def fmt(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def fmt_operand(x: Fraction, second: bool) -> str:
    s = fmt(x)
    if x.denominator != 1 or (second and x < 0):
        return f"({s})"
    return s


def combine(x: Fraction, sym: str, y: Fraction) -> Fraction:
    if sym == "+":
        return x + y
    if sym == "-":
        return x - y
    if sym == "×":
        return x * y
    return x / y


def squash(x) -> float:
    """Injective, monotone rescaling: linear near the usual range, log beyond it."""
    x = float(x) / 24.0
    if abs(x) <= 2.0:
        return x
    return float(np.sign(x) * (2.0 + np.log(abs(x) / 2.0)))


def closeness(x, goal) -> float:
    return 1.0 / (1.0 + abs(float(x - goal)))


def lookahead(pool, goal):
    """Closeness to the goal of the best current value and of the best one-op result,
    plus the share of one-op results that hit the goal exactly."""
    now = max(closeness(x, goal) for x in pool)
    best = hits = total = 0
    for i in range(len(pool)):
        for j in range(i + 1, len(pool)):
            x, y = pool[i], pool[j]
            res = [x + y, x * y, x - y, y - x]
            if y != 0:
                res.append(x / y)
            if x != 0:
                res.append(y / x)
            for r in res:
                best = max(best, closeness(r, goal))
                hits += r == goal
                total += 1
    return now, best, hits / total if total else 0.0


class Game24(TaskEngine):
    task_id = "g24"
    max_depth = 3
    feature_dim = 9
    op_feature_dim = 11

    default_params = {"low": 1, "high": 13, "n": 4, "target": 24, "max_solutions": None}

    # dynamics --------------------------------------------------------------
    def ops(self, inst, state):
        pool = state
        seen = {}
        for i in range(len(pool)):
            for j in range(i + 1, len(pool)):
                x, y = pool[i], pool[j]
                cands = [(x, "+", y), (x, "×", y), (x, "-", y), (y, "-", x)]
                if y != 0:
                    cands.append((x, "÷", y))
                if x != 0:
                    cands.append((y, "÷", x))
                for op in cands:
                    seen.setdefault(self.render_op(op), op)
        return [seen[k] for k in sorted(seen, key=op_sort_key)]

    def apply(self, inst, state, op):
        a, sym, b = op
        pool = list(state)
        pool.remove(a)
        pool.remove(b)
        pool.append(combine(a, sym, b))
        return tuple(sorted(pool))

    def is_goal(self, inst, state, goal=None):
        goal = inst.goal if goal is None else goal
        return len(state) == 1 and state[0] == goal

    def render_op(self, op):
        a, sym, b = op
        return f"{fmt_operand(a, False)}{sym}{fmt_operand(b, True)}={fmt(combine(a, sym, b))}"

    def render_state(self, inst, state):
        return " ".join(fmt(x) for x in state)

    # features --------------------------------------------------------------
    def featurize(self, inst, state, goal=None):
        goal = inst.goal if goal is None else goal
        n = inst.params.get("n", 4)
        vals = [squash(x) for x in state] + [0.0] * (n - len(state))
        return np.array(vals + [squash(goal), (n - len(state)) / 3.0, *lookahead(state, goal)])

    def op_features(self, inst, state, op):
        a, sym, b = op
        child = self.apply(inst, state, op)
        onehot = [1.0 if sym == s else 0.0 for s in OPS]
        n = inst.params.get("n", 4)
        pool = [squash(x) for x in child] + [0.0] * (n - len(child))
        return np.array([squash(a), squash(b), squash(combine(a, sym, b))] + onehot + pool)

    # generation ------------------------------------------------------------
    def make_instance(self, numbers, params=None, seed=0) -> ProblemInstance:
        params = dict(self.default_params if params is None else params)
        pool = tuple(sorted(Fraction(x) if isinstance(x, Fraction) else Fraction(int(x)) for x in numbers))
        target = Fraction(params.get("target", 24))
        nums = " ".join(fmt(x) for x in pool)
        prompt = (
            f"Use the numbers {nums} and the operations +, -, ×, ÷ to reach {fmt(target)}. "
            "Combine two numbers per step."
        )
        inst = ProblemInstance(
            task_id=self.task_id,
            params=params,
            seed=int(seed),
            init_state=pool,
            goal=target,
            data={"numbers": [fmt(x) for x in pool], "target": fmt(target)},
            prompt=prompt,
            init_state_text=nums,
        )
        return inst

    def count_solutions(self, inst) -> int:
        """Number of successful leaves, i.e. distinct op sequences reaching the goal."""

        def rec(s):
            if len(s) == 1:
                return int(self.is_goal(inst, s))
            return sum(rec(self.apply(inst, s, op)) for op in self.ops(inst, s))

        return rec(inst.init_state)

    def generate(self, params, seed):
        params = {**self.default_params, **(params or {})}
        rng = np.random.default_rng(seed)
        for _ in range(2000):
            numbers = rng.integers(params["low"], params["high"] + 1, size=params["n"])
            inst = self.make_instance(numbers, params, seed)
            k = self.count_solutions(inst)
            if k > 0 and (params["max_solutions"] is None or k <= params["max_solutions"]):
                return finalize(self, inst)
        raise GenerationExhausted("g24: no acceptable multiset within retry budget")

    def from_record(self, rec):
        inst = self.make_instance([Fraction(x) for x in rec["numbers"]], rec["params"], rec["seed"])
        return finalize(self, inst)


def finalize(engine: TaskEngine, inst: ProblemInstance) -> ProblemInstance:
    """Attach the reference solution as ``answer_label``."""
    from dataclasses import replace

    trace = engine.solve(inst)
    return replace(inst, answer_label=engine.render_trace(inst, trace))

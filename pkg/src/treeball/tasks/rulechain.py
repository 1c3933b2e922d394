"""Propositional Horn-clause forward chaining with a step budget."""

from __future__ import annotations

from collections import deque
from dataclasses import replace

import numpy as np

from .base import GenerationExhausted, ProblemInstance, TaskEngine, op_sort_key

N_PRED = 16


def rule_text(body, head) -> str:
    return "if " + " and ".join(f"p{b}" for b in body) + f" then p{head}"


def hop_distances(rules, target) -> np.ndarray:
    """Backward rule-graph hops from each predicate to the target, ignoring conjuncts.

    ``inf`` for predicates with no route. This is what a reader of the rule list can
    see without search; it over-promises whenever a conjunct is underivable.
    """
    dist = np.full(N_PRED, np.inf)
    dist[target] = 0
    queue = deque([target])
    while queue:
        h = queue.popleft()
        for body, head in rules:
            if head == h:
                for b in body:
                    if dist[b] == np.inf:
                        dist[b] = dist[h] + 1
                        queue.append(b)
    return dist


class RuleChain(TaskEngine):
    task_id = "rc"
    max_depth = 4
    feature_dim = 3 * N_PRED
    op_feature_dim = 2 * N_PRED + 1

    default_params = {
        "n_rules": 18,
        "n_steps_choices": [2, 3, 4],
        "max_steps": 4,
        "n_init_range": [3, 5],
        "p_conj": 0.35,
        "p_chain_head": 0.25,
        "n_live_range": [1, 3],
    }

    def _rules(self, inst):
        return inst.data["_rules"]

    def ops(self, inst, state):
        facts = set(state)
        if self.is_goal(inst, state):
            return []
        if len(facts) - len(inst.init_state) >= inst.data["max_steps"]:
            return []
        ops = [(body, head) for body, head in self._rules(inst) if head not in facts and set(body) <= facts]
        return sorted(set(ops), key=lambda o: op_sort_key(self.render_op(o)))

    def apply(self, inst, state, op):
        return tuple(sorted(set(state) | {op[1]}))

    def is_goal(self, inst, state, goal=None):
        goal = inst.goal if goal is None else goal
        return goal in state

    def render_op(self, op):
        return rule_text(*op)

    def render_state(self, inst, state):
        return "{" + ", ".join(f"p{f}" for f in state) + "}"

    def _hops(self, inst, goal):
        key = f"_hops{goal}"
        if key not in inst.data:
            d = hop_distances(self._rules(inst), goal)
            inst.data[key] = np.where(np.isinf(d), 0.0, 1.0 / (1.0 + d))
        return inst.data[key]

    def featurize(self, inst, state, goal=None):
        goal = inst.goal if goal is None else goal
        facts = np.zeros(N_PRED)
        facts[list(state)] = 1.0
        g = np.zeros(N_PRED)
        g[goal] = 1.0
        return np.concatenate([facts, g, self._hops(inst, goal)])

    def op_features(self, inst, state, op):
        body, head = op
        b = np.zeros(N_PRED)
        b[list(body)] = 1.0
        h = np.zeros(N_PRED)
        h[head] = 1.0
        return np.concatenate([b, h, [self._hops(inst, inst.goal)[head]]])

    # generation ------------------------------------------------------------
    def make_instance(self, rules, init, target, n_steps, params=None, seed=0, max_steps=4):
        rules = [(tuple(sorted(int(x) for x in body)), int(head)) for body, head in rules]
        init = tuple(sorted(int(x) for x in init))
        rtext = "; ".join(rule_text(b, h) for b, h in rules)
        ftext = ", ".join(f"p{f}" for f in init)
        data = {
            "rules": [[list(b), h] for b, h in rules],
            "facts": list(init),
            "target": int(target),
            "n_steps": int(n_steps),
            "max_steps": int(max_steps),
            "_rules": rules,
        }
        return ProblemInstance(
            task_id=self.task_id,
            params=dict(params or {}),
            seed=int(seed),
            init_state=init,
            goal=int(target),
            data=data,
            prompt=f"Rules: {rtext}. Facts: {ftext}. Derive p{target}.",
            init_state_text="{" + ftext + "}",
        )

    def shortest(self, rules, init, target, limit=8):
        """BFS over fact sets; minimum number of rule applications, or None."""
        start = frozenset(init)
        if target in start:
            return 0
        seen = {start}
        frontier = [start]
        for depth in range(1, limit + 1):
            nxt = []
            for facts in frontier:
                for body, head in rules:
                    if head not in facts and set(body) <= facts:
                        child = facts | {head}
                        if head == target:
                            return depth
                        if child not in seen:
                            seen.add(child)
                            nxt.append(child)
            frontier = nxt
            if not frontier:
                return None
        return None

    def generate(self, params, seed):
        """Gold chain + live traps + inert rules.

        Live traps have bodies made of reachable facts and heads in a private trap
        set, so they fire but never help. Inert rules carry at least one predicate
        that no rule derives; some of them point at chain facts, which makes
        single-hop lookahead over the rule text misleading.
        """
        params = {**self.default_params, **(params or {})}
        rng = np.random.default_rng(seed)
        for _ in range(1000):
            n = int(params["n_steps"]) if "n_steps" in params else int(rng.choice(params["n_steps_choices"]))
            perm = [int(x) for x in rng.permutation(N_PRED)]
            chain, others = perm[: n + 1], perm[n + 1 :]
            lo, hi = params["n_init_range"]
            n_init = int(rng.integers(lo, hi + 1))
            init = {chain[0], *others[: n_init - 1]}
            free = others[n_init - 1 :]
            lo, hi = params["n_live_range"]
            n_live = int(rng.integers(lo, hi + 1))
            n_trap = min(len(free) - 1, max(1, (n_live + 1) // 2))
            traps, dark = free[:n_trap], free[n_trap:]
            extras = [x for x in init if x != chain[0]]
            rules = []
            for i in range(1, n + 1):
                body = {chain[i - 1]}
                if extras and rng.random() < params["p_conj"]:
                    body.add(extras[int(rng.integers(len(extras)))])
                rules.append((tuple(sorted(body)), chain[i]))
            target = chain[n]

            def fits(rule):
                return (
                    rule[1] not in rule[0]
                    and rule not in rules
                    and self.shortest(rules + [rule], init, target) == n
                )

            live_pool = sorted(init | set(chain[1:n]))
            tries = 0
            while len(rules) < n + n_live and tries < 300:
                tries += 1
                src = live_pool + [t for t in traps if any(h == t for _, h in rules)]
                body = (src[int(rng.integers(len(src)))],)
                rule = (body, traps[int(rng.integers(len(traps)))])
                if fits(rule):
                    rules.append(rule)
            while len(rules) < params["n_rules"] and tries < 1000:
                tries += 1
                k = 2 if rng.random() < params["p_conj"] else 1
                body = {dark[int(rng.integers(len(dark)))]}
                if k == 2:
                    body.add(int(rng.choice([x for x in range(N_PRED) if x != target])))
                heads = chain[1:] if rng.random() < params["p_chain_head"] else traps + dark
                rule = (tuple(sorted(body)), heads[int(rng.integers(len(heads)))])
                if fits(rule):
                    rules.append(rule)
            if len(rules) < params["n_rules"]:
                continue
            order = rng.permutation(len(rules))
            rules = [rules[i] for i in order]
            inst = self.make_instance(rules, init, target, n, params, seed, params["max_steps"])
            return replace(inst, answer_label=self.render_trace(inst, self.solve(inst)))
        raise GenerationExhausted("rc: could not place distractors")

    def from_record(self, rec):
        rules = [(tuple(b), h) for b, h in rec["rules"]]
        inst = self.make_instance(rules, rec["facts"], rec["target"], rec["n_steps"], rec["params"], rec["seed"], rec["max_steps"])
        return replace(inst, answer_label=self.render_trace(inst, self.solve(inst)))

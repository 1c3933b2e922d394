"""Shared task plumbing: instance records, traces, seeding, and the engine interface."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class InadmissibleOperation(ValueError):
    pass


class GenerationExhausted(RuntimeError):
    pass


class Unsolvable(RuntimeError):
    pass


def derive_seed(master: int, *keys) -> int:
    """Derive a 64-bit seed from a master seed and any number of keys.

    blake2b over the decimal/str rendering of ``(master, *keys)`` joined by ``/``.
    Depends only on the keys, never on call order.
    """
    text = "/".join(str(k) for k in (master, *keys))
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def op_sort_key(text: str) -> bytes:
    return text.encode("utf-8")


@dataclass(frozen=True)
class ProblemInstance:
    task_id: str
    params: dict
    seed: int
    init_state: Any
    goal: Any
    data: dict = field(default_factory=dict)  # task-specific structured fields
    prompt: str = ""
    init_state_text: str = ""
    answer_label: str = ""

    def to_record(self) -> dict:
        rec = {
            "task_id": self.task_id,
            "seed": self.seed,
            "params": self.params,
            "prompt": self.prompt,
            "init_state_text": self.init_state_text,
            "answer_label": self.answer_label,
        }
        rec.update({k: v for k, v in self.data.items() if not k.startswith("_")})
        return rec

    def prompt_hash(self) -> str:
        return hashlib.sha1(self.prompt.encode("utf-8")).hexdigest()


@dataclass
class Trace:
    states: list
    ops: list
    success: bool


class TaskEngine:
    """Interface every task implements. Engines are stateless."""

    task_id: str = ""
    max_depth: int = 0
    feature_dim: int = 0
    op_feature_dim: int = 0

    # generation ------------------------------------------------------------
    def generate(self, params: dict, seed: int) -> ProblemInstance:
        raise NotImplementedError

    def from_record(self, rec: dict) -> ProblemInstance:
        raise NotImplementedError

    # dynamics --------------------------------------------------------------
    def ops(self, inst: ProblemInstance, state) -> list:
        """Admissible operations, sorted by the byte order of their rendering."""
        raise NotImplementedError

    def apply(self, inst: ProblemInstance, state, op):
        raise NotImplementedError

    def is_goal(self, inst: ProblemInstance, state, goal=None) -> bool:
        raise NotImplementedError

    def render_op(self, op) -> str:
        raise NotImplementedError

    def render_state(self, inst: ProblemInstance, state) -> str:
        raise NotImplementedError

    # features --------------------------------------------------------------
    def featurize(self, inst: ProblemInstance, state) -> np.ndarray:
        raise NotImplementedError

    def op_features(self, inst: ProblemInstance, state, op) -> np.ndarray:
        raise NotImplementedError

    @property
    def context_dim(self) -> int:
        return self.feature_dim + self.max_depth * self.op_feature_dim

    def context_features(self, inst: ProblemInstance, states: list, ops: list) -> np.ndarray:
        """Features of a node given its whole path: the current state plus one
        op-feature slot per step taken so far (zeros for steps not yet taken).

        ``states`` runs from the initial state to the current one, so
        ``len(states) == len(ops) + 1``.
        """
        hist = np.zeros(self.max_depth * self.op_feature_dim)
        k = self.op_feature_dim
        for t, op in enumerate(ops[: self.max_depth]):
            hist[t * k : (t + 1) * k] = self.op_features(inst, states[t], op)
        return np.concatenate([self.featurize(inst, states[-1]), hist])

    # tree policy -----------------------------------------------------------
    def is_inverse(self, prev_op, op) -> bool:
        """True if ``op`` undoes ``prev_op``; search trees may prune such edges."""
        return False

    def tree_depth_cap(self, inst: ProblemInstance) -> int:
        return self.max_depth

    # helpers shared by all engines -----------------------------------------
    def checked_apply(self, inst, state, op):
        if op not in self.ops(inst, state):
            raise InadmissibleOperation(f"{self.task_id}: {op!r} is not admissible here")
        return self.apply(inst, state, op)

    def solve(self, inst: ProblemInstance, goal=None) -> Trace:
        """Lexicographically first among the shortest successful traces.

        Iterative deepening: depth-limited DFS in op order, limit 0, 1, 2, ...
        """
        goal = inst.goal if goal is None else goal
        path_states = [inst.init_state]
        path_ops: list = []

        def dfs(s, budget) -> bool:
            if self.is_goal(inst, s, goal):
                return True
            if budget == 0:
                return False
            for op in self.ops(inst, s):
                child = self.apply(inst, s, op)
                path_states.append(child)
                path_ops.append(op)
                if dfs(child, budget - 1):
                    return True
                path_states.pop()
                path_ops.pop()
            return False

        for limit in range(self.max_depth + 1):
            if dfs(inst.init_state, limit):
                return Trace(list(path_states), list(path_ops), True)
        raise Unsolvable(f"{self.task_id}: no successful trace within {self.max_depth} steps")

    def render_trace(self, inst, trace: Trace) -> str:
        return "\n".join(f"Step {i + 1}. {self.render_op(op)}" for i, op in enumerate(trace.ops))

    def run_trace(self, inst, ops) -> Trace:
        states = [inst.init_state]
        for op in ops:
            states.append(self.checked_apply(inst, states[-1], op))
        return Trace(states, list(ops), self.is_goal(inst, states[-1]))


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, sort_keys=False, separators=(",", ":"))

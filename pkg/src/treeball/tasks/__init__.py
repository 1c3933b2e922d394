"""Task engines and module-level convenience wrappers."""

from .base import (
    GenerationExhausted,
    InadmissibleOperation,
    ProblemInstance,
    TaskEngine,
    Trace,
    Unsolvable,
    derive_seed,
    dumps_record,
)
from .blocksworld import Blocksworld
from .coloring import GraphColoring
from .game24 import Game24
from .nqueens import NQueens
from .rulechain import RuleChain

ENGINES = {e.task_id: e for e in (Game24(), NQueens(), GraphColoring(), Blocksworld(), RuleChain())}
TASK_IDS = tuple(ENGINES)


def get_engine(task_id: str) -> TaskEngine:
    try:
        return ENGINES[task_id]
    except KeyError:
        raise ValueError(f"unknown task {task_id!r}; expected one of {TASK_IDS}") from None


def generate_instance(task_id: str, params: dict | None, seed: int) -> ProblemInstance:
    return get_engine(task_id).generate(params or {}, seed)


def admissible_ops(instance: ProblemInstance, state) -> list:
    return get_engine(instance.task_id).ops(instance, state)


def apply(instance: ProblemInstance, state, op):
    return get_engine(instance.task_id).checked_apply(instance, state, op)


def is_goal(instance: ProblemInstance, state, goal=None) -> bool:
    return get_engine(instance.task_id).is_goal(instance, state, goal)


def featurize(instance: ProblemInstance, state):
    return get_engine(instance.task_id).featurize(instance, state)


def reference_solver(instance: ProblemInstance) -> Trace:
    return get_engine(instance.task_id).solve(instance)


def from_record(rec: dict) -> ProblemInstance:
    return get_engine(rec["task_id"]).from_record(rec)


__all__ = [
    "ENGINES",
    "TASK_IDS",
    "GenerationExhausted",
    "InadmissibleOperation",
    "ProblemInstance",
    "TaskEngine",
    "Trace",
    "Unsolvable",
    "admissible_ops",
    "apply",
    "derive_seed",
    "dumps_record",
    "featurize",
    "from_record",
    "generate_instance",
    "get_engine",
    "is_goal",
    "reference_solver",
]

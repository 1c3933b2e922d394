"""Task engines: worked examples, transition contracts, determinism and audits."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeball.tasks import (
    TASK_IDS,
    InadmissibleOperation,
    admissible_ops,
    apply,
    dumps_record,
    featurize,
    from_record,
    generate_instance,
    get_engine,
    is_goal,
    reference_solver,
)
from treeball.tasks.game24 import combine
from treeball.tasks.nqueens import attacks

G24 = get_engine("g24")
NQ = get_engine("nq")
GC = get_engine("gc")
BW = get_engine("bw")
RC = get_engine("rc")

F = Fraction


def g24_op(eng, inst, state, text):
    ops = {eng.render_op(o): o for o in eng.ops(inst, state)}
    return ops[text]


# ---------------------------------------------------------------------------
# Game of 24


def test_g24_worked_example_is_solvable_in_three_steps():
    inst = G24.make_instance([1, 4, 4, 12])
    trace = reference_solver(inst)
    assert trace.success and len(trace.ops) == 3
    # the hand-written route also checks out step by step
    s = inst.init_state
    s = apply(inst, s, g24_op(G24, inst, s, "1-4=-3"))
    assert s == (F(-3), F(4), F(12))
    s = apply(inst, s, g24_op(G24, inst, s, "-3×4=-12"))
    assert s == (F(-12), F(12))
    s = apply(inst, s, g24_op(G24, inst, s, "12-(-12)=24"))
    assert is_goal(inst, s)


def test_g24_transition_merges_operands():
    inst = G24.make_instance([4, 4, 6, 8])
    child = apply(inst, inst.init_state, g24_op(G24, inst, inst.init_state, "4+8=12"))
    assert child == (F(4), F(6), F(12))


def test_g24_winning_op_is_listed():
    inst = G24.make_instance([2, 12, 1, 1])
    texts = [G24.render_op(o) for o in admissible_ops(inst, (F(2), F(12)))]
    assert "2×12=24" in texts
    assert texts == sorted(texts, key=lambda t: t.encode())


def test_g24_inadmissible_operand_raises():
    inst = G24.make_instance([1, 4, 4, 12])
    with pytest.raises(InadmissibleOperation):
        apply(inst, inst.init_state, (F(4), "+", F(8)))


def test_g24_goal_and_exact_division():
    inst = G24.make_instance([3, 3, 8, 8])
    assert is_goal(inst, (F(24),))
    assert not is_goal(inst, (F(24), F(1)))
    # 8 / (3 - 8/3) = 24 needs exact rationals
    assert reference_solver(inst).success


def test_g24_features_separate_pools():
    inst = G24.make_instance([1, 2, 3, 4])
    a = featurize(inst, (F(1), F(2), F(7)))
    b = featurize(inst, (F(1), F(2), F(8)))
    assert a.shape == (G24.feature_dim,) and not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# other engines


def test_nqueens_gold_extension():
    inst = NQ.make_instance(7, [1, 4, 7, 3])
    assert reference_solver(inst).states[-1] == (1, 4, 7, 3, 6, 2, 5)


def test_nqueens_eight_from_scratch():
    inst = NQ.make_instance(8, [])
    board = reference_solver(inst).states[-1]
    assert len(board) == 8
    for r in range(8):
        assert not attacks(board[:r], board[r])
    assert admissible_ops(inst, board) == []


def test_rulechain_example_chain_length_two():
    rules = [((2,), 9), ((9,), 14), ((5,), 7), ((7, 11), 14)]
    inst = RC.make_instance(rules, [10, 2, 3, 6], 14, 2)
    trace = reference_solver(inst)
    assert len(trace.ops) == 2
    assert RC.render_op(trace.ops[0]) == "if p2 then p9"
    after = apply(inst, inst.init_state, trace.ops[0])
    assert 9 in after and set(inst.init_state) <= set(after)
    assert is_goal(inst, trace.states[-1])


def test_coloring_example_is_a_goal():
    edges = [(0, 1), (0, 4), (0, 5), (1, 2), (1, 4), (2, 3), (2, 5), (3, 4), (3, 5), (4, 5)]
    inst = GC.make_instance(6, edges)
    rgb = {"R": 0, "G": 1, "B": 2}
    coloring = tuple(rgb[c] for c in "RGBRBG")
    assert is_goal(inst, coloring)
    assert admissible_ops(inst, coloring) == []
    bad = (0, 0) + coloring[2:]
    assert not is_goal(inst, bad)


def test_blocksworld_example_plan():
    support = {"red": "table", "orange": "table", "yellow": "blue", "blue": "table"}
    goal = [("red", "yellow"), ("blue", "orange"), ("yellow", "blue")]
    inst = BW.make_instance(["red", "orange", "yellow", "blue"], support.items(), goal)
    trace = reference_solver(inst)
    assert len(trace.ops) == 8
    assert BW.render_op(trace.ops[0]) == "unstack yellow from blue"
    # the published plan is an alternative optimal route
    published = [
        "unstack yellow from blue", "stack yellow on red", "pick up blue", "stack blue on orange",
        "unstack yellow from red", "stack yellow on blue", "pick up red", "stack red on yellow",
    ]
    s = inst.init_state
    for text in published:
        s = apply(inst, s, {BW.render_op(o): o for o in admissible_ops(inst, s)}[text])
    assert is_goal(inst, s)
    assert BW.goal_distance(inst, inst.init_state) == 8


# ---------------------------------------------------------------------------
# generic contracts


@pytest.mark.parametrize("task", TASK_IDS)
def test_generation_is_deterministic_and_round_trips(task):
    a = generate_instance(task, None, 7)
    b = generate_instance(task, None, 7)
    assert dumps_record(a.to_record()) == dumps_record(b.to_record())
    c = from_record(a.to_record())
    assert c.prompt == a.prompt and c.answer_label == a.answer_label and c.init_state == a.init_state


@pytest.mark.parametrize("task", TASK_IDS)
def test_solvability_audit(task):
    eng = get_engine(task)
    for seed in range(15):
        inst = generate_instance(task, None, seed)
        trace = reference_solver(inst)
        assert trace.success
        assert eng.render_trace(inst, trace) == inst.answer_label
        replay = eng.run_trace(inst, trace.ops)
        assert replay.success


@pytest.mark.parametrize("task", TASK_IDS)
def test_features_fixed_dimension_and_closure(task):
    eng = get_engine(task)
    inst = generate_instance(task, None, 3)
    s = inst.init_state
    for _ in range(eng.max_depth):
        f = featurize(inst, s)
        assert f.shape == (eng.feature_dim,) and np.all(np.isfinite(f))
        assert np.array_equal(f, featurize(inst, s))
        ops = admissible_ops(inst, s)
        if not ops:
            break
        texts = [eng.render_op(o) for o in ops]
        assert len(set(texts)) == len(texts)
        assert texts == sorted(texts, key=lambda t: t.encode())
        for o in ops:
            assert eng.op_features(inst, s, o).shape == (eng.op_feature_dim,)
        s = apply(inst, s, ops[0])


def test_generator_parameter_ranges():
    for seed in range(10):
        g = generate_instance("g24", None, seed)
        assert all(1 <= x <= 13 for x in g.init_state)
        rc = generate_instance("rc", None, seed)
        assert rc.data["n_steps"] in (2, 3, 4)
        assert len(rc.data["rules"]) == 18
        gc = generate_instance("gc", None, seed)
        assert gc.data["n"] in (7, 8)
        bw = generate_instance("bw", None, seed)
        assert 4 <= len(bw.data["blocks"]) <= 5
        assert BW.goal_distance(bw, bw.init_state) >= 3


def test_nqueens_ood_split_contract():
    test = generate_instance("nq", {"n": 8, "k": 0}, 1)
    assert test.init_state == () and test.data["n"] == 8
    train = generate_instance("nq", None, 1)
    assert train.data["n"] == 7 and len(train.init_state) <= 4


def test_unknown_task_rejected():
    with pytest.raises(ValueError):
        get_engine("sudoku")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 13), min_size=4, max_size=4))
def test_g24_children_are_canonical(numbers):
    inst = G24.make_instance(numbers)
    for op in G24.ops(inst, inst.init_state):
        child = G24.apply(inst, inst.init_state, op)
        assert child == tuple(sorted(child)) and len(child) == 3
        a, sym, b = op
        assert combine(a, sym, b) in child

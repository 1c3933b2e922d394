"""Acceptance criteria 1-12, one test each, at their stated tolerances.

Each test records a one-line PASS/FAIL verdict (see ``conftest.py``), printed
in the run summary, before asserting. Expensive artifacts (trees, heads,
policies) are built once per module and shared between criteria that use the
same corpus. The full module takes roughly half an hour on one core.
"""

import hashlib
import time
from collections import deque

import numpy as np
import pytest
from scipy import stats

from treeball import geometry as geo
from treeball.cli import main as cli_main
from treeball.eval import anchor_spearman, depth_stratified, evaluate, signal_divergence
from treeball.nn import Rng
from treeball.stage1 import HeadConfig, McConfig, embed_graph, graph_from_tree, mc_estimate, radial_fidelity, success_count, train_head, uniform_behavior
from treeball.stage2 import PolicyConfig, dagger_train, mean_embedding, offline_sft_train
from treeball.tasks import generate_instance, get_engine
from treeball.tree import INF, distance_to_solution, enumerate_tree, tree_stats

SEEDS = (0, 1, 2, 3, 4)
TEST_OFFSET = 50_000  # held-out instance seeds start here


# ---------------------------------------------------------------------------
# shared corpora


@pytest.fixture(scope="module")
def g24():
    """200 training trees and 300 held-out instances (first 50 also enumerated)."""
    trees = [enumerate_tree(generate_instance("g24", None, s)) for s in range(200)]
    test = [generate_instance("g24", None, TEST_OFFSET + s) for s in range(300)]
    held = [enumerate_tree(i) for i in test[:50]]
    return trees, test, held


@pytest.fixture(scope="module")
def g24_runs(g24):
    """Per seed: head, signal-on / signal-off DAgger policies and offline SFT, on 100 training trees."""
    trees, test, _ = g24
    train = trees[:100]
    out = {}
    for seed in SEEDS:
        head, _ = train_head(train, HeadConfig(seed=seed))
        row = {"head": head}
        for name in ("on", "off", "sft"):
            cfg = PolicyConfig(seed=seed, signal_mode="off" if name == "off" else "on")
            pol, _ = (offline_sft_train if name == "sft" else dagger_train)(train, head, cfg)
            row[name] = pol
            row[name + "_acc"] = evaluate(pol, head, test).accuracy
        out[seed] = row
    return out


@pytest.fixture(scope="module")
def rc_runs():
    train = [enumerate_tree(generate_instance("rc", None, s)) for s in range(100)]
    test = [generate_instance("rc", None, TEST_OFFSET + s) for s in range(150)]
    out = {}
    for seed in SEEDS:
        head, _ = train_head(train, HeadConfig(seed=seed))
        row = {}
        for name in ("on", "off", "sft"):
            cfg = PolicyConfig(seed=seed, signal_mode="off" if name == "off" else "on")
            pol, _ = (offline_sft_train if name == "sft" else dagger_train)(train, head, cfg)
            row[name + "_acc"] = evaluate(pol, head, test).accuracy
            row[name + "_depth"] = depth_stratified(pol, head, test)
        out[seed] = row
    return out


# ---------------------------------------------------------------------------
# 1. geometry


def _ball(gen, m, n, c, scale=0.9):
    v = gen.normal(size=(m, n))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * gen.uniform(0, scale, size=(m, 1)) / np.sqrt(c)


LD = np.longdouble


def _mobius_ld(x, y, c):
    """(2/sqrt c) artanh(sqrt c |(-x) (+) y|), evaluated in whatever dtype it is given."""
    x = -x
    xy = np.sum(x * y, -1)[..., None]
    xx = np.sum(x * x, -1)[..., None]
    yy = np.sum(y * y, -1)[..., None]
    m = ((1 + 2 * c * xy + c * yy) * x + (1 - c * xx) * y) / (1 + 2 * c * xy + c * c * xx * yy)
    return 2 / np.sqrt(c) * np.arctanh(np.sqrt(c) * np.sqrt(np.sum(m * m, -1)))


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-6)


def test_c01_geometry_suite(acceptance):
    t0 = time.time()
    gen = np.random.default_rng(0)
    m = 1200  # per (c, n) cell; 9 cells -> 10800 cases per check
    worst = {"axioms": 0.0, "origin": 0.0, "roundtrip": 0.0, "grad": 0.0}
    cases = 0
    for c in (0.5, 1.0, 2.0):
        for n in (2, 8, 128):
            x, y, z = (_ball(gen, m, n, c) for _ in range(3))
            dxy, dyx = geo.geodesic_distance(x, y, c), geo.geodesic_distance(y, x, c)
            dxz, dyz = geo.geodesic_distance(x, z, c), geo.geodesic_distance(y, z, c)
            dxx = geo.geodesic_distance(x, x, c)
            viol = max(
                np.max(np.abs(dxy - dyx)),
                np.max(dxx),
                np.max(dxz - dxy - dyz),
                -np.min(dxy),
            )
            worst["axioms"] = max(worst["axioms"], viol)
            origin = np.max(_rel(geo.distance_to_origin(x, c), geo.geodesic_distance(np.zeros_like(x), x, c)))
            worst["origin"] = max(worst["origin"], origin)
            v = gen.normal(size=(m, n)) * gen.uniform(0.0, 1.2, size=(m, 1)) / np.sqrt(n * c)
            worst["roundtrip"] = max(worst["roundtrip"], np.max(np.abs(geo.log_map_origin(geo.exp_map_origin(v, c), c) - v)))
            # directional derivatives against central differences of the Mobius route in
            # extended precision; steps scale with the distance to the kink
            u = gen.normal(size=(m, n))
            u /= np.linalg.norm(u, axis=-1, keepdims=True)
            X, Y, U, C = x.astype(LD), y.astype(LD), u.astype(LD), LD(c)
            O = np.zeros_like(X)
            hx = LD(1e-6) * np.linalg.norm(X - Y, axis=-1, keepdims=True)
            ho = LD(1e-6) * np.linalg.norm(X, axis=-1, keepdims=True)
            hc = LD(1e-6) * C
            _, gx, gy, gc = geo.geodesic_distance_grad(x, y, c)
            _, ox, oc = geo.distance_to_origin_grad(x, c)
            pairs = [
                (np.sum(gx * u, -1), (_mobius_ld(X + hx * U, Y, C) - _mobius_ld(X - hx * U, Y, C)) / (2 * hx[:, 0])),
                (np.sum(gy * u, -1), (_mobius_ld(X, Y + hx * U, C) - _mobius_ld(X, Y - hx * U, C)) / (2 * hx[:, 0])),
                (gc, (_mobius_ld(X, Y, C + hc) - _mobius_ld(X, Y, C - hc)) / (2 * hc)),
                (np.sum(ox * u, -1), (_mobius_ld(O, X + ho * U, C) - _mobius_ld(O, X - ho * U, C)) / (2 * ho[:, 0])),
                (oc, (_mobius_ld(O, X, C + hc) - _mobius_ld(O, X, C - hc)) / (2 * hc)),
            ]
            errs = [_rel(a, b.astype(np.float64)) for a, b in pairs]
            worst["grad"] = max(worst["grad"], max(float(np.max(e)) for e in errs))
            cases += m
    elapsed = time.time() - t0
    ok = (
        cases >= 10_000
        and worst["axioms"] <= 1e-9
        and worst["origin"] <= 1e-9
        and worst["roundtrip"] <= 1e-9
        and worst["grad"] < 1e-4
        and elapsed < 60
    )
    detail = f"{cases} cases; axiom viol {worst['axioms']:.1e}, origin rel {worst['origin']:.1e}, round trip {worst['roundtrip']:.1e}, grad rel {worst['grad']:.1e}; {elapsed:.1f}s"
    acceptance(1, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 2. tree oracle


def _forward_bfs(tree, i):
    """Steps from node i to the nearest goal by breadth-first search through the engine."""
    eng, inst = tree.engine, tree.instance
    queue = deque([((tree.states[i], tree.op[i], int(tree.depth[i])), 0)])
    while queue:
        (s, prev, depth), k = queue.popleft()
        ops = [] if depth >= tree.depth_cap else [o for o in eng.ops(inst, s) if not eng.is_inverse(prev, o)]
        if not ops:
            if eng.is_goal(inst, s):
                return k
            continue
        for o in ops:
            queue.append(((eng.apply(inst, s, o), o, depth + 1), k + 1))
    return INF


def _bellman(tree, d):
    for i in range(len(tree)):
        kids = list(tree.children(i))
        want = 1 + min(d[c] for c in kids) if kids else (0 if tree.success[i] else INF)
        if d[i] != want:
            return False
    return True


def test_c02_tree_oracle_equivalence(acceptance):
    t0 = time.time()
    sources = [("rc", None), ("gc", None), ("nq", {"n": 6, "k": 2}), ("nq", {"n": 7, "k": 4}), ("bw", None), ("g24", None)]
    checked, mismatches, bellman_fail, per_task = 0, 0, 0, {}
    for task, params in sources:
        for seed in range(150):
            tree = enumerate_tree(generate_instance(task, params, seed))
            d = distance_to_solution(tree)
            bellman_fail += not _bellman(tree, d)
            if len(tree) > 200:
                continue
            mismatches += sum(d[i] != _forward_bfs(tree, i) for i in range(len(tree)))
            checked += 1
            per_task[task] = per_task.get(task, 0) + 1
    elapsed = time.time() - t0
    ok = checked >= 500 and mismatches == 0 and bellman_fail == 0 and elapsed < 300
    detail = f"{checked} trees <=200 nodes {per_task}; {mismatches} node mismatches; {bellman_fail} Bellman failures; {elapsed:.0f}s"
    acceptance(2, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 3. tree statistics

REFERENCE = {"g24": 6.59, "nq8": 1.49, "bw": 2.27, "gc": 1.56, "rc": 1.65}


def test_c03_tree_statistics(acceptance):
    t0 = time.time()
    st = {}
    # 100 instances where trees are large, 1000 where they are cheap; 100-instance
    # blocks of GC pooled dead-end ratios range over roughly 27-40%
    sizes = {"g24": 100, "nq8": 100, "rc": 1000, "gc": 1000, "bw": 100}
    for key, task, params in (("g24", "g24", None), ("nq8", "nq", {"n": 8}), ("rc", "rc", None), ("gc", "gc", None), ("bw", "bw", None)):
        st[key] = tree_stats([enumerate_tree(generate_instance(task, params, s)) for s in range(sizes[key])])
    checks = {
        "g24 dead-end": abs(st["g24"].dead_end_ratio - 0.994) <= 0.010,
        "g24 depth": st["g24"].max_depth == 3,
        "nq8 depth": st["nq8"].max_depth == 8,
        "rc depth": st["rc"].max_depth == 4,
        "rc dead-end": abs(st["rc"].dead_end_ratio - 0.477) <= 0.05,
        "gc dead-end": abs(st["gc"].dead_end_ratio - 0.324) <= 0.05,
    }
    for key, ref in REFERENCE.items():
        checks[f"{key} branching"] = abs(st[key].avg_branching - ref) <= 0.15 * ref
    elapsed = time.time() - t0
    ok = all(checks.values()) and elapsed < 1200
    detail = (
        f"n {sizes}; g24 {st['g24'].dead_end_ratio:.2%} d{st['g24'].max_depth}; nq8 d{st['nq8'].max_depth}; "
        f"rc {st['rc'].dead_end_ratio:.1%} d{st['rc'].max_depth}; gc {st['gc'].dead_end_ratio:.1%}; branching "
        + " ".join(f"{k} {st[k].avg_branching:.2f}/{REFERENCE[k]}" for k in REFERENCE)
        + (f"; failed: {[k for k, v in checks.items() if not v]}" if not all(checks.values()) else "")
        + f"; {elapsed:.0f}s"
    )
    acceptance(3, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 4-5. stage-1 fidelity


@pytest.fixture(scope="module")
def g24_heads(g24):
    trees = g24[0]
    t0 = time.time()
    full = {s: train_head(trees, HeadConfig(seed=s))[0] for s in (0, 1, 2)}
    first = time.time() - t0
    flat = {s: train_head(trees, HeadConfig(seed=s, lam=0.0))[0] for s in (0, 1, 2)}
    return full, flat, first / 3


def test_c04_radial_fidelity(acceptance, g24, g24_heads):
    trees, _, held = g24
    head = g24_heads[0][0]
    rho_train = radial_fidelity(head, trees)
    rho_held = radial_fidelity(head, held)
    secs = g24_heads[2]
    ok = rho_train >= 0.9 and rho_held >= 0.8 and secs < 900
    detail = f"train rho {rho_train:.3f} (need >=0.9), held-out rho {rho_held:.3f} (need >=0.8); head fit {secs:.0f}s"
    acceptance(4, ok, detail)
    assert ok, detail


def test_c05_structural_fidelity(acceptance, g24, g24_heads):
    trees = g24[0]
    graphs = [graph_from_tree(t) for t in trees]
    full, flat, _ = g24_heads
    rows = []
    for s in full:
        _, m1 = anchor_spearman(full[s], graphs, 4, 64, Rng(100 + s))
        _, m0 = anchor_spearman(flat[s], graphs, 4, 64, Rng(100 + s))
        rows.append((s, m1, m0))
    ok = all(m1 >= 0.7 and m1 - m0 >= 0.2 for _, m1, m0 in rows)
    detail = "; ".join(f"seed {s}: lam=1 {m1:.3f} vs lam=0 {m0:.3f}" for s, m1, m0 in rows)
    acceptance(5, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 6. Monte-Carlo estimator


def _exact_success(eng, inst, s, steps):
    """Success probability of a uniform walk that stops at a goal or dead end."""
    if eng.is_goal(inst, s):
        return 1.0
    ops = eng.ops(inst, s)
    if not ops or steps == 0:
        return 0.0
    return float(np.mean([_exact_success(eng, inst, eng.apply(inst, s, o), steps - 1) for o in ops]))


def test_c06_mc_estimator_spread(acceptance):
    eng = get_engine("gc")
    K = 32
    best = None
    for seed in range(60):
        inst = generate_instance("gc", None, seed)
        p = _exact_success(eng, inst, inst.init_state, eng.max_depth)
        if best is None or abs(p - 0.5) < abs(best[1] - 0.5):
            best = (inst, p)
        if abs(p - 0.5) < 0.02:
            break
    inst, p = best
    rng = Rng(7)
    d_hat = np.array([1.0 - success_count(inst, inst.init_state, uniform_behavior, K, rng.child("est", r), eng.max_depth) / K for r in range(200)])
    sd = float(d_hat.std(ddof=1))
    # bound: exact binomial variance at every state of an estimator trie, and the
    # sample variance at the chosen state within its 99.9% chi-square band
    trie = mc_estimate(inst, uniform_behavior, McConfig(K=K), rng.child("trie"))
    exact_ok = all(q * (1 - q) / K <= 1 / (4 * K) for q in (_exact_success(eng, inst, s, eng.max_depth - int(t)) for s, t in zip(trie.states, trie.depth)))
    band = 1 / (4 * K) * stats.chi2.ppf(0.999, len(d_hat) - 1) / (len(d_hat) - 1)
    ok = abs(p - 0.5) < 0.05 and 0.07 <= sd <= 0.106 and exact_ok and d_hat.var(ddof=1) <= band
    detail = f"gc state p={p:.3f}; std over 200 estimates {sd:.4f} (band [0.07, 0.106], binomial {np.sqrt(p * (1 - p) / K):.4f}); var bound ok={exact_ok}"
    acceptance(6, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 7-10. stage-2 directional effects


def test_c07_signal_effect(acceptance, g24_runs):
    gaps = [g24_runs[s]["on_acc"] - g24_runs[s]["off_acc"] for s in SEEDS]
    mean_gap = float(np.mean(gaps))
    wins = sum(g > 0 for g in gaps)
    ok = mean_gap >= 0.05 and wins >= 4
    on = np.mean([g24_runs[s]["on_acc"] for s in SEEDS])
    off = np.mean([g24_runs[s]["off_acc"] for s in SEEDS])
    detail = f"G24 on {on:.3f} vs off {off:.3f}, mean gap {mean_gap * 100:+.1f} pp, on ahead in {wins}/5 seeds"
    acceptance(7, ok, detail)
    assert ok, detail


def test_c08_dagger_beats_offline_sft(acceptance, g24_runs, rc_runs):
    out = {}
    for task, runs in (("g24", g24_runs), ("rc", rc_runs)):
        dag = np.mean([runs[s]["on_acc"] for s in SEEDS])
        sft = np.mean([runs[s]["sft_acc"] for s in SEEDS])
        wins = sum(runs[s]["sft_acc"] < runs[s]["on_acc"] for s in SEEDS)
        out[task] = (dag, sft, wins)
    ok = all(sft < dag for dag, sft, _ in out.values())
    detail = "; ".join(f"{t} DAgger {d:.3f} vs SFT {s:.3f} (SFT lower in {w}/5 seeds)" for t, (d, s, w) in out.items())
    acceptance(8, ok, detail)
    assert ok, detail


def test_c09_depth_scaling(acceptance, rc_runs):
    def gap(depth):
        return float(np.mean([rc_runs[s]["on_depth"][depth]["accuracy"] - rc_runs[s]["off_depth"][depth]["accuracy"] for s in SEEDS]))

    g2, g4 = gap(2), gap(4)
    ok = g4 >= g2
    detail = f"RC on-off gap: n_steps=2 {g2 * 100:+.1f} pp, n_steps=4 {g4 * 100:+.1f} pp (need gap4 >= gap2)"
    acceptance(9, ok, detail)
    assert ok, detail


def test_c10_signal_divergence(acceptance, g24, g24_runs):
    trees, test, _ = g24
    run = g24_runs[0]
    head, pol = run["head"], run["on"]
    Z = np.concatenate([embed_graph(head, graph_from_tree(t)) for t in trees[:100]])
    z_bar = mean_embedding(Z, head.c if head.geometry == "hyperbolic" else None)
    rows, rho = signal_divergence(pol, head, test[:150], z_bar)
    kl_min = min(r["kl"] for r in rows)
    ok = rho > 0.2 and kl_min >= 0.0
    detail = f"{len(rows)} boundaries; Spearman(KL, d(0,z)) {rho:+.3f} (need > 0.2); min KL {kl_min:.2e}"
    acceptance(10, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 11-12. CLI pipeline


def _pipeline(root):
    d = root / "data"
    steps = [
        ["gen", "--task", "g24", "--seed", "11", "--counts", "50,10,30", "--out", d],
        ["tree", "--instances", d / "g24_val.jsonl", "--out", root / "trees.jsonl"],
        ["train-head", "--instances", d / "g24_train.jsonl", "--seed", "11", "--out", root / "head.json"],
        ["train-policy", "--instances", d / "g24_train.jsonl", "--head", root / "head.json", "--seed", "11", "--out", root / "policy.json"],
        ["eval", "--instances", d / "g24_test.jsonl", "--head", root / "head.json", "--policy", root / "policy.json", "--seed", "11", "--out", root / "eval.json"],
        ["analyze", "--instances", d / "g24_train.jsonl", "--head", root / "head.json", "--policy", root / "policy.json", "--test", d / "g24_test.jsonl", "--seed", "11", "--out", root / "analysis"],
    ]
    for argv in steps:
        code = cli_main([str(a) for a in argv])
        if code != 0:
            return argv[0]
    return None


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    t0 = time.time()
    fail_a = _pipeline(a)
    elapsed = time.time() - t0
    fail_b = _pipeline(b)
    return a, b, elapsed, fail_a or fail_b


def _digests(root):
    return {str(p.relative_to(root)): hashlib.sha1(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c11_reproducibility(acceptance, pipelines):
    a, b, _, failed = pipelines
    da, db = _digests(a), _digests(b)
    differ = [k for k in da if da[k] != db.get(k)]
    ok = failed is None and da.keys() == db.keys() and not differ and len(da) >= 10
    detail = f"{len(da)} files compared across two --workers 1 runs; {len(differ)} differ" + (f" {differ}" if differ else "")
    acceptance(11, ok, detail)
    assert ok, detail


def test_c12_end_to_end_smoke(acceptance, pipelines):
    a, _, elapsed, failed = pipelines
    ok = failed is None and elapsed < 600 and (a / "analysis" / "summary.json").exists()
    detail = f"gen -> tree -> train-head -> train-policy -> eval -> analyze on 50 G24 instances in {elapsed:.0f}s" + (f"; failed at {failed}" if failed else "")
    acceptance(12, ok, detail)
    assert ok, detail

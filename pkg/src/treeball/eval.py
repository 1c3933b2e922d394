"""Evaluation and analysis: accuracy, rank correlations, signal divergence, ablations."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def spearman(x, y) -> float:
    """Spearman rho with average ranks for ties; ``nan`` if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-d arrays of equal length")
    if len(x) < 2:
        return float("nan")
    rx = rankdata(x)
    ry = rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if den == 0:
        return float("nan")
    return float(np.sum(rx * ry) / den)


def _co_tree_sample(dt_all, others, k, gen, mode):
    if len(others) <= k:
        return others
    if mode == "uniform":
        return gen.choice(others, size=k, replace=False)
    # equal quota per tree-distance value, leftovers filled uniformly
    groups = [others[dt_all == v] for v in np.unique(dt_all)]
    quota = max(1, k // len(groups))
    picked = [g if len(g) <= quota else gen.choice(g, size=quota, replace=False) for g in groups]
    chosen = np.concatenate(picked)
    rest = np.setdiff1d(others, chosen)
    if len(chosen) < k and len(rest):
        chosen = np.concatenate([chosen, gen.choice(rest, size=min(k - len(chosen), len(rest)), replace=False)])
    return np.sort(chosen[:k])


def anchor_spearman(head, graphs, anchors_per_tree: int, nodes_per_anchor: int, rng, sampling: str = "stratified"):
    """Per-anchor Spearman between tree distance and embedding distance.

    Co-tree nodes are drawn with an equal quota per tree-distance value
    (``sampling="stratified"``) or uniformly. Uniform draws are dominated by the
    one or two most common distances, which caps rho well below 1 even for an
    exact isometry. Returns ``(rows, median)``; rows are ``(graph index,
    anchor, rho)``. Anchors whose rho is undefined (fewer than 3 co-tree nodes,
    or a constant side) are skipped.
    """
    from .stage1 import DistanceGraph, embed_graph, graph_from_tree, pair_distance

    rows = []
    for gi, g in enumerate(graphs):
        if not isinstance(g, DistanceGraph):
            g = graph_from_tree(g)
        n = len(g)
        if n < 4:
            continue
        z = embed_graph(head, g)
        grng = rng.child("graph", gi)
        anchors = grng.gen.choice(n, size=min(anchors_per_tree, n), replace=False)
        for a in anchors:
            others = np.delete(np.arange(n), a)
            dt_all = g.tree_distance(np.full(len(others), a), others)
            others = _co_tree_sample(dt_all, others, nodes_per_anchor, grng.gen, sampling)
            if len(others) < 3:
                continue
            dt = g.tree_distance(np.full(len(others), a), others)
            dz = pair_distance(head, np.broadcast_to(z[a], z[others].shape), z[others])
            rho = spearman(dt, dz)
            if np.isfinite(rho):
                rows.append((gi, int(a), rho))
    med = float(np.median([r[2] for r in rows])) if rows else float("nan")
    return rows, med


# ---------------------------------------------------------------------------
# fingerprints and CSV


def config_hash(obj) -> str:
    """Short SHA-1 of a JSON rendering with sorted keys."""
    import hashlib
    import json

    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha1(text.encode()).hexdigest()[:12]


def rows_csv(rows: list, columns: list, meta: dict | None = None) -> str:
    """CSV text with an optional ``# {json}`` metadata line; floats at 6 significant digits."""
    import csv
    import io
    import json

    buf = io.StringIO()
    if meta is not None:
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# accuracy


@dataclass
class EvalReport:
    task: str
    n: int
    successes: int
    accuracy: float
    mean_steps: float
    seed: int | None = None
    config_hash: str = ""
    strata: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "strata"}


REPORT_COLUMNS = ["task", "n", "successes", "accuracy", "mean_steps", "seed", "config_hash"]


def _run(policy, head, instance, budget, mode, rng):
    from .stage2 import infer, oracle_infer, random_infer

    if policy == "oracle":
        return oracle_infer(instance, budget)
    if policy == "random":
        return random_infer(instance, rng, budget)
    return infer(instance, policy, head, budget, mode)


def evaluate(policy, head, instances: list, budget: int | None = None, mode: str | None = None, seed: int | None = None, config_hash: str = "", rng=None) -> EvalReport:
    """Greedy success rate and mean trace length over ``instances``.

    ``policy`` is a trained policy, or ``"oracle"`` / ``"random"`` for the
    reference harnesses (``"random"`` needs ``rng``).
    """
    from .nn import Rng

    task = instances[0].task_id if instances else ""
    rng = rng or Rng(0 if seed is None else seed)
    wins = steps = 0
    for k, inst in enumerate(instances):
        res = _run(policy, head, inst, budget, mode, rng.child("instance", k))
        wins += bool(res.success)
        steps += len(res.ops)
    n = len(instances)
    return EvalReport(task, n, wins, wins / n if n else 0.0, steps / n if n else 0.0, seed, config_hash)


def depth_stratified(policy, head, instances: list, budget: int | None = None, mode: str | None = None, bins=(2, 3, 4)) -> dict:
    """Accuracy per gold chain length. Bins with no instances are left out."""
    out = {}
    for b in bins:
        sub = [i for i in instances if i.data.get("n_steps") == b]
        if sub:
            rep = evaluate(policy, head, sub, budget, mode)
            out[b] = {"accuracy": rep.accuracy, "count": rep.n}
    return out


# ---------------------------------------------------------------------------
# signal divergence


def _log_softmax(x):
    m = np.max(x)
    return x - m - np.log(np.sum(np.exp(x - m)))


def kl_divergence(scores_p, scores_q) -> float:
    """KL(p || q) for two score vectors over the same support, softmax at unit temperature."""
    lp = _log_softmax(np.asarray(scores_p, dtype=np.float64))
    lq = _log_softmax(np.asarray(scores_q, dtype=np.float64))
    return float(max(np.sum(np.exp(lp) * (lp - lq)), 0.0))


def signal_divergence(policy, head, instances: list, z_bar, budget: int | None = None):
    """KL between the signal-on policy and the same policy fed ``z_bar``, per step boundary.

    Boundaries are those visited by the greedy signal-on decode. The
    distributions cover admissible ops only, a coarser support than a
    language model's vocabulary. Returns ``(rows, spearman(kl, d_origin))``;
    each row has ``instance``, ``step``, ``d_origin`` and ``kl``.
    """
    from dataclasses import replace

    from .stage2 import boundary_inputs, infer, op_scores

    base = replace(policy, z_bar=np.asarray(z_bar, dtype=np.float64))
    rows = []
    for k, inst in enumerate(instances):
        res = infer(inst, policy, head, budget, "on")
        for t, (ctx, zin, opf) in enumerate(boundary_inputs(inst, res, head, policy.signal_site)):
            s_on = op_scores(policy, ctx, zin, opf, "on")
            s_mean = op_scores(base, ctx, zin, opf, "mean")
            rows.append({"instance": k, "step": t, "d_origin": res.d_origin[t], "kl": kl_divergence(s_on, s_mean)})
    if len(rows) < 2:
        return rows, float("nan")
    return rows, spearman([r["kl"] for r in rows], [r["d_origin"] for r in rows])


# ---------------------------------------------------------------------------
# ablations


VARIANTS = ("full", "euclidean", "no-metric", "no-signal", "offline-sft")


def variant_configs(variant: str, head_cfg, pol_cfg):
    """Head and policy configs for one ablation cell (``n=<k>`` sweeps the ball dimension)."""
    from dataclasses import replace

    if variant == "full":
        return head_cfg, pol_cfg
    if variant == "euclidean":
        return replace(head_cfg, geometry="euclidean"), pol_cfg
    if variant == "no-metric":
        return replace(head_cfg, lam=0.0), pol_cfg
    if variant == "no-signal":
        return head_cfg, replace(pol_cfg, signal_mode="off")
    if variant == "offline-sft":
        return head_cfg, pol_cfg
    if variant.startswith("n="):
        return replace(head_cfg, n=int(variant[2:])), pol_cfg
    raise ValueError(f"unknown variant {variant!r}")


def run_cell(variant: str, train_trees: list, test_instances: list, head_cfg, pol_cfg, seed: int, heads: dict | None = None) -> dict:
    """Train head and policy for one (variant, seed) cell and evaluate it.

    ``heads`` caches trained heads by config hash so variants that share a
    head (full, no-signal, offline-SFT) train it once.
    """
    from dataclasses import asdict, replace

    from .nn import Rng
    from .stage1 import train_head
    from .stage2 import dagger_train, offline_sft_train

    hc, pc = variant_configs(variant, head_cfg, pol_cfg)
    hc, pc = replace(hc, seed=seed), replace(pc, seed=seed)
    hkey = config_hash(asdict(hc))
    head = None if heads is None else heads.get(hkey)
    if head is None:
        head, _ = train_head(train_trees, hc, Rng(seed))
        if heads is not None:
            heads[hkey] = head
    train = offline_sft_train if variant == "offline-sft" else dagger_train
    policy, _ = train(train_trees, head, pc, Rng(seed))
    chash = config_hash({"variant": variant, "head": asdict(hc), "policy": asdict(pc)})
    rep = evaluate(policy, head, test_instances, seed=seed, config_hash=chash)
    return {"variant": variant, **rep.row()}


ABLATION_COLUMNS = ["variant", "task", "seed", "n", "successes", "accuracy", "mean_steps", "config_hash"]


def ablation_matrix(train_trees: list, test_instances: list, head_cfg, pol_cfg, seeds, variants=VARIANTS, n_sweep=()) -> list:
    """One evaluated row per (variant, seed); seeds are shared across variants."""
    rows = []
    for seed in seeds:
        heads: dict = {}
        for v in list(variants) + [f"n={k}" for k in n_sweep]:
            rows.append(run_cell(v, train_trees, test_instances, head_cfg, pol_cfg, seed, heads))
    return rows


SENSITIVITY_AXES = {"gamma": (0.05, 0.1, 0.2, 0.5), "lam": (0.1, 0.5, 1.0, 2.0), "gamma_prime": (0.05, 0.1, 0.2, 0.5)}
SENSITIVITY_COLUMNS = ["param", "value", "seed", "radial_rho", "median_anchor_rho", "accuracy", "config_hash"]


def sensitivity_grid(train_trees: list, head_cfg, seed: int = 0, axes: dict | None = None, eval_trees: list | None = None, test_instances: list | None = None, pol_cfg=None) -> list:
    """One-axis sweeps around ``head_cfg`` over the margin and loss-weight axes.

    Each cell reports the head's radial and per-anchor rank correlations on
    ``eval_trees`` (default: the training trees); with ``test_instances`` and
    ``pol_cfg`` it also trains a policy and reports held-out accuracy.
    """
    from dataclasses import asdict, replace

    from .nn import Rng
    from .stage1 import graph_from_tree, radial_fidelity, train_head
    from .stage2 import dagger_train

    axes = SENSITIVITY_AXES if axes is None else axes
    graphs = [graph_from_tree(t) for t in (eval_trees or train_trees)]
    rows = []
    for name, values in axes.items():
        for v in values:
            hc = replace(head_cfg, **{name: v, "seed": seed})
            head, _ = train_head(train_trees, hc, Rng(seed))
            _, med = anchor_spearman(head, graphs, 4, 64, Rng(seed).child("anchors"))
            row = {"param": name, "value": float(v), "seed": seed, "radial_rho": radial_fidelity(head, graphs), "median_anchor_rho": med, "accuracy": None}
            if test_instances is not None and pol_cfg is not None:
                policy, _ = dagger_train(train_trees, head, replace(pol_cfg, seed=seed), Rng(seed))
                row["accuracy"] = evaluate(policy, head, test_instances).accuracy
            row["config_hash"] = config_hash(asdict(hc))
            rows.append(row)
    return rows

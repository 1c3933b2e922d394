"""Command-line driver: gen, tree, stats, train-head, train-policy, eval, analyze.

Every file written carries a metadata block (tool version, command, seed,
config hash). JSONL files start with a ``{"_meta": ...}`` line; CSV files start
with a ``# {json}`` comment line; JSON files hold a top-level ``"meta"`` key.
Nothing time- or host-dependent is recorded, so a re-run with the same
arguments reproduces every byte.

Per-instance seeds come from ``derive_seed(master, task, stream, index)``
(blake2b over the joined keys), so an instance's randomness does not depend
on how many others are generated or in which order.

On failure the process exits nonzero and prints a JSON error report on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .eval import (
    ABLATION_COLUMNS,
    REPORT_COLUMNS,
    SENSITIVITY_COLUMNS,
    ablation_matrix,
    anchor_spearman,
    config_hash,
    depth_stratified,
    evaluate,
    rows_csv,
    sensitivity_grid,
    signal_divergence,
)
from .nn import Rng
from .stage1 import HeadConfig, curves_csv, graph_from_tree, load_head, radial_fidelity, save_head, train_head
from .stage2 import PolicyConfig, dagger_train, episode_jsonl, load_policy, mean_embedding, offline_sft_train, save_policy
from .tasks import TASK_IDS, derive_seed, dumps_record, from_record, generate_instance
from .tree import TreeBudgetExceeded, distance_to_solution, dump_tree, enumerate_tree, stats_csv, tree_stats

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    """Expected failure with a machine-readable kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------------------
# config and metadata


def load_config(arg: str | None) -> dict:
    """``--config`` is a path to a JSON file or an inline JSON object."""
    if not arg:
        return {}
    text = arg
    if not arg.lstrip().startswith("{"):
        if not os.path.exists(arg):
            raise CliError("missing-artifact", f"config file not found: {arg}")
        with open(arg, encoding="utf-8") as fh:
            text = fh.read()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError("config-validation", f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise CliError("config-validation", "config must be a JSON object")
    return cfg


def head_config(cfg: dict, args) -> HeadConfig:
    d = dict(cfg.get("head", {}))
    d["seed"] = args.seed
    if getattr(args, "geometry", None):
        d["geometry"] = args.geometry
    try:
        return HeadConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError("config-validation", f"head config: {e}") from None


def policy_config(cfg: dict, args) -> PolicyConfig:
    d = dict(cfg.get("policy", {}))
    d["seed"] = args.seed
    if getattr(args, "signal", None):
        d["signal_mode"] = args.signal
    try:
        return PolicyConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError("config-validation", f"policy config: {e}") from None


def meta_block(args, cfg: dict, extra: dict | None = None) -> dict:
    return {
        "tool": "treeball",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "config_hash": config_hash(cfg),
        "config": cfg,
        **(extra or {}),
    }


def write_text(path: str, text: str) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_json(path: str, obj) -> None:
    write_text(path, json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_jsonl(path: str, meta: dict, lines) -> int:
    out = [json.dumps({"_meta": meta}, sort_keys=True)]
    out.extend(lines)
    write_text(path, "\n".join(out) + "\n")
    return len(out) - 1


def read_instances(path: str) -> list:
    if not os.path.exists(path):
        raise CliError("missing-artifact", f"instance file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_meta" in rec:
                continue
            out.append(from_record(rec))
    return out


def need(path: str | None, what: str) -> str:
    if not path:
        raise CliError("config-validation", f"--{what} is required")
    if not os.path.exists(path):
        raise CliError("missing-artifact", f"{what} not found: {path}")
    return path


def pmap(fn, items: list, workers: int) -> list:
    """Order-preserving map; sequential unless ``workers > 1``."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _enumerate(inst):
    try:
        return enumerate_tree(inst)
    except TreeBudgetExceeded as e:
        return e


def enumerate_all(instances: list, workers: int):
    """Trees for every instance; budget failures are returned separately."""
    trees, errors = [], []
    for k, t in enumerate(pmap(_enumerate, instances, workers)):
        if isinstance(t, Exception):
            errors.append({"instance": k, "seed": instances[k].seed, "error": str(t)})
        else:
            trees.append(t)
    return trees, errors


# ---------------------------------------------------------------------------
# commands

SPLITS = ("train", "val", "test")


def cmd_gen(args, cfg):
    task = need_task(args)
    counts = parse_counts(args.counts or cfg.get("counts") or "100,20,50")
    params = dict(cfg.get("gen", {}))
    # N-Queens: test split is out of distribution (N=8, empty prefix)
    test_params = {**params, "n": 8, "k": 0} if task == "nq" else params
    pool_size = counts[0] + counts[1] + (0 if task == "nq" else counts[2])
    pool, seen = [], set()
    attempts = 0
    max_attempts = 20 * pool_size + 100
    while len(pool) < pool_size and attempts < max_attempts:
        inst = generate_instance(task, params, derive_seed(args.seed, task, "pool", attempts))
        attempts += 1
        h = inst.prompt_hash()
        if h not in seen:
            seen.add(h)
            pool.append(inst)
    if len(pool) < pool_size:
        raise CliError("generation-exhausted", f"only {len(pool)} distinct {task} instances after {attempts} draws")
    order = Rng(derive_seed(args.seed, task, "split")).gen.permutation(len(pool))
    pool = [pool[i] for i in order]
    splits = {"train": pool[: counts[0]], "val": pool[counts[0] : counts[0] + counts[1]]}
    if task == "nq":
        test, k = [], 0
        while len(test) < counts[2]:
            test.append(generate_instance(task, test_params, derive_seed(args.seed, task, "test", k)))
            k += 1
        splits["test"] = test
    else:
        splits["test"] = pool[counts[0] + counts[1] :]
    hashes = {s: [i.prompt_hash() for i in v] for s, v in splits.items()}
    audit = {"task": task, "counts": {s: len(v) for s, v in splits.items()}, "draws": attempts, "duplicates_dropped": attempts - len(pool)}
    overlaps = {}
    for a in range(3):
        for b in range(a + 1, 3):
            sa, sb = SPLITS[a], SPLITS[b]
            overlaps[f"{sa}/{sb}"] = len(set(hashes[sa]) & set(hashes[sb]))
    audit["overlaps"] = overlaps
    if any(overlaps.values()):
        raise CliError("split-overlap", f"prompt hashes shared across splits: {overlaps}")
    meta = meta_block(args, cfg, {"task": task})
    for s, insts in splits.items():
        write_jsonl(os.path.join(args.out, f"{task}_{s}.jsonl"), {**meta, "split": s}, (dumps_record(i.to_record()) for i in insts))
    write_json(os.path.join(args.out, f"{task}_audit.json"), {"meta": meta, "audit": audit})
    return audit


def cmd_tree(args, cfg):
    insts = read_instances(need(args.instances, "instances"))
    trees, errors = enumerate_all(insts, args.workers)
    meta = meta_block(args, cfg, {"instances": os.path.basename(args.instances)})
    lines = []
    for k, t in enumerate(trees):
        d = distance_to_solution(t)
        for line in dump_tree(t, d):
            lines.append('{"tree":%d,%s' % (k, line[1:]))
    write_jsonl(args.out, meta, lines)
    report = {"trees": len(trees), "nodes": sum(len(t) for t in trees), "errors": errors}
    if errors:
        raise CliError("node-cap", json.dumps(report))
    return report


def cmd_stats(args, cfg):
    rows, errors = [], []
    for path in args.instances_list:
        insts = read_instances(path)
        if not insts:
            continue
        trees, errs = enumerate_all(insts, args.workers)
        errors += [{**e, "file": path} for e in errs]
        if trees:
            rows.append(tree_stats(trees))
    meta = meta_block(args, cfg, {"inputs": [os.path.basename(p) for p in args.instances_list]})
    write_text(args.out, stats_csv(rows, meta))
    if errors:
        raise CliError("node-cap", json.dumps({"errors": errors}))
    return [asdict(r) for r in rows]


def cmd_train_head(args, cfg):
    insts = read_instances(need(args.instances, "instances"))
    hc = head_config(cfg, args)
    trees, errors = enumerate_all(insts, args.workers)
    if errors:
        raise CliError("node-cap", json.dumps({"errors": errors}))
    if not trees:
        raise CliError("config-validation", "no training instances")
    head, curves = train_head(trees, hc, Rng(args.seed), curve_anchors=args.curve_anchors)
    meta = meta_block(args, cfg, {"head_config": asdict(hc)})
    save_head(args.out, head, hc, {"meta": meta})
    write_text(os.path.splitext(args.out)[0] + "_curves.csv", "# " + json.dumps(meta, sort_keys=True) + "\n" + curves_csv(curves))
    return {"checksum": head.checksum(), "c": head.c, "final": curves[-1]}


def cmd_train_policy(args, cfg):
    insts = read_instances(need(args.instances, "instances"))
    head, _, _ = load_head(need(args.head, "head"))
    pc = policy_config(cfg, args)
    trees, errors = enumerate_all(insts, args.workers)
    if errors:
        raise CliError("node-cap", json.dumps({"errors": errors}))
    if not trees:
        raise CliError("config-validation", "no training instances")
    meta = meta_block(args, cfg, {"policy_config": asdict(pc), "mode": args.mode, "head_checksum": head.checksum()})
    episodes = []
    if args.mode == "sft":
        policy, curves = offline_sft_train(trees, head, pc, Rng(args.seed))
    else:
        policy, curves = dagger_train(trees, head, pc, Rng(args.seed), log=episodes.append if args.episodes else None)
    save_policy(args.out, policy, pc, {"meta": meta})
    base = os.path.splitext(args.out)[0]
    write_text(base + "_curves.csv", "# " + json.dumps(meta, sort_keys=True) + "\n" + curves_csv(curves))
    if args.episodes:
        write_jsonl(args.episodes, meta, (episode_jsonl(e) for e in episodes))
    return {"checksum": policy.checksum(), "final": curves[-1]}


def cmd_eval(args, cfg):
    insts = read_instances(need(args.instances, "instances"))
    head, _, _ = load_head(need(args.head, "head"))
    policy, pc, _ = load_policy(need(args.policy, "policy"))
    mode = args.signal or pc.signal_mode
    chash = config_hash({"policy": asdict(pc), "head": head.checksum(), "mode": mode})
    rep = evaluate(policy, head, insts, args.budget, mode, seed=args.seed, config_hash=chash)
    if insts and insts[0].task_id == "rc":
        rep.strata = depth_stratified(policy, head, insts, args.budget, mode)
    meta = meta_block(args, cfg, {"signal_mode": mode})
    write_json(args.out, {"meta": meta, "report": asdict(rep)})
    write_text(os.path.splitext(args.out)[0] + ".csv", rows_csv([rep.row()], REPORT_COLUMNS, meta))
    return asdict(rep)


def cmd_analyze(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    meta = meta_block(args, cfg)
    summary = {"meta": meta}
    head, hc, _ = load_head(need(args.head, "head"))
    train = read_instances(need(args.instances, "instances"))
    trees, errors = enumerate_all(train, args.workers)
    if errors:
        raise CliError("node-cap", json.dumps({"errors": errors}))
    graphs = [graph_from_tree(t) for t in trees]
    rows, med = anchor_spearman(head, graphs, args.anchors, 64, Rng(args.seed).child("anchors"))
    write_text(
        os.path.join(args.out, "anchor_spearman.csv"),
        rows_csv([{"tree": g, "anchor": a, "rho": r} for g, a, r in rows], ["tree", "anchor", "rho"], meta),
    )
    summary["median_anchor_rho"] = med
    summary["radial_rho"] = radial_fidelity(head, graphs)
    summary["head_checksum"] = head.checksum()
    if args.policy:
        policy, pc, _ = load_policy(need(args.policy, "policy"))
        test = read_instances(need(args.test, "test")) if args.test else train
        Z = np.concatenate([head_embed(head, g) for g in graphs])
        z_bar = mean_embedding(Z, head.c if head.geometry == "hyperbolic" else None)
        div, rho = signal_divergence(policy, head, test, z_bar)
        write_text(os.path.join(args.out, "signal_divergence.csv"), rows_csv(div, ["instance", "step", "d_origin", "kl"], meta))
        summary["kl_vs_origin_rho"] = rho
        summary["kl_min"] = min((r["kl"] for r in div), default=None)
        summary["kl_support"] = "admissible ops only"
        summary["policy_checksum"] = policy.checksum()
    if args.ablations:
        test = read_instances(need(args.test, "test"))
        pc = policy_config(cfg, args)
        seeds = cfg.get("ablation_seeds", [args.seed])
        abl = ablation_matrix(trees, test, hc, pc, seeds, n_sweep=cfg.get("n_sweep", ()))
        write_text(os.path.join(args.out, "ablations.csv"), rows_csv(abl, ABLATION_COLUMNS, meta))
        grid = sensitivity_grid(trees, hc, args.seed)
        write_text(os.path.join(args.out, "sensitivity.csv"), rows_csv(grid, SENSITIVITY_COLUMNS, meta))
        summary["ablations"] = abl
    write_json(os.path.join(args.out, "summary.json"), summary)
    return {k: v for k, v in summary.items() if k not in ("meta", "ablations")}


def head_embed(head, graph):
    from .stage1 import embed_graph

    return embed_graph(head, graph)


# ---------------------------------------------------------------------------
# argument parsing


def need_task(args) -> str:
    if args.task not in TASK_IDS:
        raise CliError("config-validation", f"--task must be one of {list(TASK_IDS)}")
    return args.task


def parse_counts(text) -> tuple:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(",")
    try:
        counts = tuple(int(p) for p in parts)
    except ValueError:
        raise CliError("config-validation", f"--counts must be three integers, got {text!r}") from None
    if len(counts) != 3 or min(counts) < 0:
        raise CliError("config-validation", f"--counts must be three non-negative integers, got {text!r}")
    return counts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--task", choices=TASK_IDS, help="task id")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--config", help="JSON file or inline JSON object")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes (1 = sequential)")

    p = argparse.ArgumentParser(prog="treeball", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"treeball {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate disjoint train/val/test JSONL splits")
    g.add_argument("--counts", help="train,val,test sizes, e.g. 100,20,50")

    t = sub.add_parser("tree", parents=[common], help="enumerate search trees and dump nodes as JSONL")
    t.add_argument("--instances", required=True)

    s = sub.add_parser("stats", parents=[common], help="tree statistics CSV, one row per instance file")
    s.add_argument("--instances", dest="instances_list", nargs="+", required=True)

    h = sub.add_parser("train-head", parents=[common], help="train the ball projection head")
    h.add_argument("--instances", required=True)
    h.add_argument("--geometry", choices=("hyperbolic", "euclidean"))
    h.add_argument("--curve-anchors", type=int, default=0, help="anchors per tree for the rho curve column")

    pol = sub.add_parser("train-policy", parents=[common], help="train the step policy (DAgger or offline SFT)")
    pol.add_argument("--instances", required=True)
    pol.add_argument("--head", required=True)
    pol.add_argument("--mode", choices=("dagger", "sft"), default="dagger")
    pol.add_argument("--signal", choices=("on", "off", "mean"))
    pol.add_argument("--episodes", help="optional episode log JSONL")

    e = sub.add_parser("eval", parents=[common], help="greedy accuracy on an instance file")
    e.add_argument("--instances", required=True)
    e.add_argument("--head", required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--signal", choices=("on", "off", "mean"))
    e.add_argument("--budget", type=int)

    a = sub.add_parser("analyze", parents=[common], help="rank correlations, signal divergence, ablations")
    a.add_argument("--instances", required=True, help="training instances (trees for the correlations)")
    a.add_argument("--head", required=True)
    a.add_argument("--policy")
    a.add_argument("--test", help="held-out instances for divergence and ablations")
    a.add_argument("--anchors", type=int, default=4, help="anchors per tree")
    a.add_argument("--ablations", action="store_true", help="also run the ablation matrix and sensitivity grid")
    a.add_argument("--signal", choices=("on", "off", "mean"))
    return p


COMMANDS = {
    "gen": cmd_gen,
    "tree": cmd_tree,
    "stats": cmd_stats,
    "train-head": cmd_train_head,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.workers < 1:
            raise CliError("config-validation", "--workers must be >= 1")
        cfg = load_config(args.config)
        result = COMMANDS[args.command](args, cfg)
    except CliError as e:
        _report_error(args, e.kind, str(e))
        return EXIT_USAGE if e.kind == "config-validation" else EXIT_FAILURE
    except (ValueError, KeyError, OSError) as e:
        _report_error(args, type(e).__name__, str(e))
        return EXIT_FAILURE
    print(json.dumps({"command": args.command, "ok": True, "result": result}, sort_keys=True, default=_json_default))
    return 0


def _report_error(args, kind: str, message: str) -> None:
    print(json.dumps({"command": getattr(args, "command", None), "ok": False, "error": kind, "message": message}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

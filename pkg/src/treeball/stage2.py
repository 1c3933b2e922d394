"""Distilling the tree oracle into a policy that reads the hyperbolic signal.

The policy scores every admissible op with one MLP over
``[context features, lifted signal, op features]`` and normalises with a
softmax over the admissible set, so inadmissible ops never receive mass. The
signal is the frozen head's embedding of the current node, lifted by a small
up-projector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from .nn import AdamState, MlpParams, Rng, adam_step, init_mlp, mlp_backward, mlp_forward, zeros_mlp
from .stage1 import HeadParams, embed_features, tree_features
from .tasks import get_engine
from .tree import INF, distance_to_solution

SIGNAL_MODES = ("on", "off", "mean")
SIGNAL_SITES = ("state", "child")


@dataclass
class PolicyConfig:
    d_sig: int = 16
    up_hidden: int = 128
    hidden: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 5
    rollouts_per_problem: int = 8
    temperature: float = 0.7
    updates_per_epoch: int = 200
    batch_states: int = 64
    signal_mode: str = "on"
    signal_site: str = "child"  # "state": embed the current node only
    max_steps: int | None = None
    seed: int = 0

    def validate(self) -> "PolicyConfig":
        if self.signal_mode not in SIGNAL_MODES:
            raise ValueError(f"signal_mode must be one of {SIGNAL_MODES}")
        if self.signal_site not in SIGNAL_SITES:
            raise ValueError(f"signal_site must be one of {SIGNAL_SITES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.epochs, self.rollouts_per_problem, self.batch_states, self.d_sig) < 1 or self.updates_per_epoch < 0:
            raise ValueError("epochs, rollouts, batch size and d_sig must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown policy config keys: {unknown}")
        return cls(**d).validate()


def beta_schedule(epochs: int) -> list:
    """Oracle-mixing probability per epoch, linear from 1 down to 0."""
    if epochs == 1:
        return [1.0]
    return [1.0 - e / (epochs - 1) for e in range(epochs)]


@dataclass
class PolicyParams:
    up_proj: MlpParams
    scorer: MlpParams
    signal_mode: str = "on"
    z_bar: np.ndarray | None = None
    signal_site: str = "child"

    def arrays(self) -> dict:
        return {**self.up_proj.arrays("up."), **self.scorer.arrays("score.")}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha1()
        for k, v in sorted(self.arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def init_policy(d_ctx: int, d_op: int, n: int, config: PolicyConfig, rng: Rng, z_bar=None) -> PolicyParams:
    up = init_mlp(n, config.up_hidden, config.d_sig, rng.child("up"))
    scorer = init_mlp(d_ctx + config.d_sig + d_op, config.hidden, 1, rng.child("score"), out_scale=0.1)
    return PolicyParams(up, scorer, config.signal_mode, None if z_bar is None else np.asarray(z_bar, dtype=np.float64), config.signal_site)


def zero_policy(d_ctx: int, d_op: int, n: int, config: PolicyConfig) -> PolicyParams:
    return PolicyParams(zeros_mlp(n, config.up_hidden, config.d_sig), zeros_mlp(d_ctx + config.d_sig + d_op, config.hidden, 1), config.signal_mode, None, config.signal_site)


def mean_embedding(Z, c: float | None = None) -> np.ndarray:
    """Coordinate mean of embeddings; with curvature ``c`` it is projected into the ball."""
    zb = np.asarray(Z, dtype=np.float64).mean(axis=0)
    return zb if c is None else geo.project_to_ball(zb, c)


def lift_signal(policy: PolicyParams, z, mode: str | None = None):
    """Signal rows for embeddings ``z`` (shape ``(m, n)``); returns ``(s, cache)``."""
    mode = policy.signal_mode if mode is None else mode
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if mode == "off":
        return np.zeros((len(z), policy.up_proj.dims[2])), None
    if mode == "mean":
        if policy.z_bar is None:
            raise ValueError("mean-baseline signal needs z_bar")
        z = np.broadcast_to(policy.z_bar, z.shape)
    return mlp_forward(policy.up_proj, z)


# ---------------------------------------------------------------------------
# scoring


def _scores(policy: PolicyParams, ctx, sig, opf, seg):
    """Per-op scores. ``seg[r]`` is the state index of row ``r``.

    ``sig`` has one row per state, or one row per op when the signal is
    taken at the child boundaries.
    """
    sig_rows = sig if len(sig) == len(opf) and policy.signal_site == "child" else sig[seg]
    rows = np.concatenate([ctx[seg], sig_rows, opf], axis=1)
    s, cache = mlp_forward(policy.scorer, rows)
    return s[:, 0], cache


def _segment_softmax(scores, seg, n_seg, temperature=1.0):
    x = scores / temperature
    mx = np.full(n_seg, -np.inf)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    tot = np.zeros(n_seg)
    np.add.at(tot, seg, e)
    return e / tot[seg]


def policy_distribution(policy: PolicyParams, ctx, z, op_feats, temperature: float = 1.0, mode: str | None = None):
    """Probabilities over the admissible ops of one state.

    ``op_feats`` has one row per admissible op; the result has the same length.
    ``z`` is the state's embedding, or one embedding per op for the child site.
    """
    op_feats = np.atleast_2d(np.asarray(op_feats, dtype=np.float64))
    if op_feats.shape[0] == 0 or op_feats.size == 0:
        raise ValueError("no admissible ops")
    sig, _ = lift_signal(policy, z, mode)
    seg = np.zeros(len(op_feats), dtype=np.int64)
    s, _ = _scores(policy, np.atleast_2d(ctx), sig, op_feats, seg)
    return _segment_softmax(s, seg, 1, temperature)


def op_scores(policy: PolicyParams, ctx, z, op_feats, mode: str | None = None) -> np.ndarray:
    sig, _ = lift_signal(policy, z, mode)
    seg = np.zeros(len(op_feats), dtype=np.int64)
    return _scores(policy, np.atleast_2d(ctx), sig, np.atleast_2d(op_feats), seg)[0]


# ---------------------------------------------------------------------------
# per-tree caches


class TreeContext:
    """An enumerated tree with everything rollouts need precomputed lazily."""

    def __init__(self, tree, head: HeadParams, site: str = "state"):
        self.tree = tree
        self.site = site
        self.eng = tree.engine
        self.d = distance_to_solution(tree)
        self.X = tree_features(tree)
        self.Z = embed_features(head, self.X)[0]
        self._opf = {}

    def op_feats(self, i: int) -> np.ndarray:
        f = self._opf.get(i)
        if f is None:
            t = self.tree
            s = t.states[i]
            f = np.stack([self.eng.op_features(t.instance, s, t.op[c]) for c in t.children(i)])
            self._opf[i] = f
        return f

    def signal_z(self, i: int) -> np.ndarray:
        """Embedding(s) the policy reads at node i."""
        if self.site == "child":
            return self.Z[self.tree.child_start[i] : self.tree.child_start[i] + self.tree.child_count[i]]
        return self.Z[i]

    def oracle_index(self, i: int):
        """Position of the lexicographic-minimum oracle op among node i's children."""
        for k, c in enumerate(self.tree.children(i)):
            if self.d[c] < INF:
                return k
        return None


@dataclass
class Episode:
    nodes: list
    chosen: list  # child positions
    oracle_sets: list  # child positions with finite distance, per visited non-terminal node
    labels: list  # lexicographic-min oracle position or None
    success: bool


@dataclass
class LabeledState:
    ctx: np.ndarray
    z: np.ndarray
    op_feats: np.ndarray
    label: int
    key: tuple = ()


def rollout(tc: TreeContext, policy: PolicyParams, beta: float, rng: Rng, temperature: float) -> Episode:
    """One DAgger rollout on the tree: oracle action with probability beta, else a policy sample."""
    t = tc.tree
    i = 0
    nodes, chosen, osets, labels = [0], [], [], []
    while t.child_count[i] > 0:
        kids = list(t.children(i))
        oset = [k for k, c in enumerate(kids) if tc.d[c] < INF]
        lab = oset[0] if oset else None
        osets.append(oset)
        labels.append(lab)
        if lab is not None and rng.gen.random() < beta:
            k = lab
        else:
            p = policy_distribution(policy, tc.X[i], tc.signal_z(i), tc.op_feats(i), temperature)
            k = int(rng.gen.choice(len(kids), p=p))
        chosen.append(k)
        i = kids[k]
        nodes.append(i)
    return Episode(nodes, chosen, osets, labels, bool(t.success[i]))


def episode_states(tc: TreeContext, ep: Episode, tree_id: int) -> list:
    out = []
    for node, lab in zip(ep.nodes, ep.labels):
        if lab is not None:
            out.append(LabeledState(tc.X[node], tc.signal_z(node), tc.op_feats(node), lab, (tree_id, node)))
    return out


def gold_states(tc: TreeContext, tree_id: int) -> list:
    """Labeled states along the oracle trace from the root."""
    i = 0
    out = []
    while tc.tree.child_count[i] > 0:
        lab = tc.oracle_index(i)
        if lab is None:
            break
        out.append(LabeledState(tc.X[i], tc.signal_z(i), tc.op_feats(i), lab, (tree_id, i)))
        i = tc.tree.child_start[i] + lab
    return out


# ---------------------------------------------------------------------------
# training


def batch_grads(policy: PolicyParams, batch: list):
    """Mean cross-entropy of the labels and its gradients."""
    n = len(batch)
    ctx = np.stack([b.ctx for b in batch])
    if policy.signal_site == "child":
        Z = np.concatenate([np.atleast_2d(b.z) for b in batch])
    else:
        Z = np.stack([b.z for b in batch])
    counts = np.array([len(b.op_feats) for b in batch])
    seg = np.repeat(np.arange(n), counts)
    opf = np.concatenate([b.op_feats for b in batch])
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    target = offsets + np.array([b.label for b in batch])
    sig, scache = lift_signal(policy, Z)
    s, cache = _scores(policy, ctx, sig, opf, seg)
    p = _segment_softmax(s, seg, n)
    loss = float(-np.mean(np.log(np.maximum(p[target], 1e-300))))
    g = p.copy()
    g[target] -= 1.0
    g /= n
    sgrads, grows = mlp_backward(policy.scorer, cache, g[:, None])
    grads = {"score." + k: v for k, v in sgrads.items()}
    if scache is not None:
        d_ctx = ctx.shape[1]
        gsig = np.zeros_like(sig)
        gpart = grows[:, d_ctx : d_ctx + sig.shape[1]]
        if policy.signal_site == "child":
            gsig = gpart
        else:
            np.add.at(gsig, seg, gpart)
        ugrads, _ = mlp_backward(policy.up_proj, scache, gsig)
        grads.update({"up." + k: v for k, v in ugrads.items()})
    return loss, grads


def fit(policy: PolicyParams, dataset: list, config: PolicyConfig, opt: AdamState, rng: Rng, updates: int) -> float:
    params = policy.arrays()
    losses = []
    for _ in range(updates):
        idx = rng.gen.integers(len(dataset), size=min(config.batch_states, len(dataset)))
        loss, grads = batch_grads(policy, [dataset[i] for i in idx])
        adam_step(opt, params, grads)
        losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")


def _setup(trees, head, config, rng):
    config.validate()
    tcs = [TreeContext(t, head, config.signal_site) for t in trees]
    eng = tcs[0].eng
    z_bar = None
    if config.signal_mode == "mean":
        z_bar = mean_embedding(np.concatenate([tc.Z for tc in tcs]), head.c if head.geometry == "hyperbolic" else None)
    policy = init_policy(eng.context_dim, eng.op_feature_dim, head.mlp.dims[2], config, rng.child("init"), z_bar)
    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    return tcs, policy, opt


def dagger_train(trees: list, head: HeadParams, config: PolicyConfig, rng: Rng | None = None, log=None):
    """DAgger with an aggregated dataset; the head stays frozen.

    Returns ``(policy, curves)``. ``log``, if given, receives one dict per
    episode for auditing.
    """
    rng = rng or Rng(config.seed)
    tcs, policy, opt = _setup(trees, head, config, rng)
    dataset: list = []
    curves = []
    for e, beta in enumerate(beta_schedule(config.epochs)):
        erng = rng.child("epoch", e)
        succ = 0
        n_ep = 0
        for ti, tc in enumerate(tcs):
            for r in range(config.rollouts_per_problem):
                ep = rollout(tc, policy, beta, erng.child("rollout", ti, r), config.temperature)
                dataset.extend(episode_states(tc, ep, ti))
                succ += ep.success
                n_ep += 1
                if log is not None:
                    log({"epoch": e + 1, "tree": ti, "rollout": r, "beta": beta, "nodes": ep.nodes, "chosen": ep.chosen, "labels": ep.labels, "success": ep.success})
        loss = fit(policy, dataset, config, opt, erng.child("fit"), config.updates_per_epoch) if dataset else float("nan")
        curves.append({"epoch": e + 1, "beta": beta, "dataset": len(dataset), "rollout_success": succ / max(n_ep, 1), "loss": loss})
    return policy, curves


def offline_sft_train(trees: list, head: HeadParams, config: PolicyConfig, rng: Rng | None = None):
    """Same optimizer budget as DAgger, trained only on oracle-trace states."""
    rng = rng or Rng(config.seed)
    tcs, policy, opt = _setup(trees, head, config, rng)
    dataset = [s for ti, tc in enumerate(tcs) for s in gold_states(tc, ti)]
    curves = []
    for e in range(config.epochs):
        loss = fit(policy, dataset, config, opt, rng.child("epoch", e).child("fit"), config.updates_per_epoch) if dataset else float("nan")
        curves.append({"epoch": e + 1, "beta": 1.0, "dataset": len(dataset), "rollout_success": float("nan"), "loss": loss})
    return policy, curves


# ---------------------------------------------------------------------------
# inference


def candidate_ops(eng, inst, state, prev_op) -> list:
    """Admissible ops minus an immediate undo of the previous op (same action set as the trees)."""
    return [op for op in eng.ops(inst, state) if not eng.is_inverse(prev_op, op)]


@dataclass
class InferenceResult:
    states: list
    ops: list
    success: bool
    z: list = field(default_factory=list)
    d_origin: list = field(default_factory=list)


def _boundary(eng, instance, states, ops, head, site):
    """Inputs at one step boundary: ``(cand, ctx, z, d_origin, op feats, signal z)``."""
    from .stage1 import feature_radius

    s = states[-1]
    cand = candidate_ops(eng, instance, s, ops[-1] if ops else None)
    if not cand:
        return None
    ctx = eng.context_features(instance, states, ops)
    z = embed_features(head, ctx[None, :])[0][0]
    d0 = float(feature_radius(head, ctx[None, :])[0])
    opf = np.stack([eng.op_features(instance, s, op) for op in cand])
    zin = z
    if site == "child":
        kids = [eng.apply(instance, s, op) for op in cand]
        cx = np.stack([eng.context_features(instance, states + [k], ops + [op]) for k, op in zip(kids, cand)])
        zin = embed_features(head, cx)[0]
    return cand, ctx, z, d0, opf, zin


def infer(instance, policy: PolicyParams, head: HeadParams, step_budget: int | None = None, mode: str | None = None) -> InferenceResult:
    """Greedy decode: featurize the path, embed, lift, take the top-scoring admissible op."""
    eng = get_engine(instance.task_id)
    budget = eng.max_depth if step_budget is None else step_budget
    states, ops = [instance.init_state], []
    res = InferenceResult(states, ops, False)
    for _ in range(budget):
        if eng.is_goal(instance, states[-1]):
            break
        b = _boundary(eng, instance, states, ops, head, policy.signal_site)
        if b is None:
            break
        cand, ctx, z, d0, opf, zin = b
        res.z.append(z)
        res.d_origin.append(d0)
        k = int(np.argmax(op_scores(policy, ctx, zin, opf, mode)))
        ops.append(cand[k])
        states.append(eng.apply(instance, states[-1], cand[k]))
    res.success = eng.is_goal(instance, states[-1])
    return res


def boundary_inputs(instance, res: InferenceResult, head: HeadParams, site: str = "state") -> list:
    """``(ctx, signal z, op feats)`` at every decision of a finished decode."""
    eng = get_engine(instance.task_id)
    out = []
    for t in range(len(res.ops)):
        _, ctx, _, _, opf, zin = _boundary(eng, instance, res.states[: t + 1], res.ops[:t], head, site)
        out.append((ctx, zin, opf))
    return out


def random_infer(instance, rng: Rng, step_budget: int | None = None) -> InferenceResult:
    """Uniform choice among the candidate ops at every step."""
    eng = get_engine(instance.task_id)
    budget = eng.max_depth if step_budget is None else step_budget
    states, ops = [instance.init_state], []
    for _ in range(budget):
        if eng.is_goal(instance, states[-1]):
            break
        cand = candidate_ops(eng, instance, states[-1], ops[-1] if ops else None)
        if not cand:
            break
        ops.append(cand[int(rng.gen.integers(len(cand)))])
        states.append(eng.apply(instance, states[-1], ops[-1]))
    return InferenceResult(states, ops, eng.is_goal(instance, states[-1]))


def oracle_infer(instance, step_budget: int | None = None) -> InferenceResult:
    """Upper-bound harness: follow the reference solver."""
    eng = get_engine(instance.task_id)
    trace = eng.solve(instance)
    budget = eng.max_depth if step_budget is None else step_budget
    ops = trace.ops[:budget]
    return InferenceResult(trace.states[: len(ops) + 1], ops, eng.is_goal(instance, trace.states[len(ops)]))


def save_policy(path, policy: PolicyParams, config: PolicyConfig, meta: dict | None = None) -> None:
    from .nn import save_params

    arrays = policy.arrays()
    if policy.z_bar is not None:
        arrays["z_bar"] = policy.z_bar
    save_params(path, arrays, {"config": asdict(config), **(meta or {})})


def load_policy(path) -> tuple:
    from .nn import load_params, mlp_from_arrays

    arrays, meta = load_params(path)
    cfg = PolicyConfig.from_dict(meta["config"])
    pol = PolicyParams(mlp_from_arrays(arrays, "up."), mlp_from_arrays(arrays, "score."), cfg.signal_mode, arrays.get("z_bar"), cfg.signal_site)
    return pol, cfg, meta


def episode_jsonl(record: dict) -> str:
    return json.dumps(record, sort_keys=True)

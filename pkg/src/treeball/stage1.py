"""Projection head onto the Poincare ball, trained with radial ranking and metric losses.

The head maps task features through a 2-layer MLP, then the exponential map at
the origin, then the ball projection. Distance-to-solution is encoded by the
radius; tree structure by pairwise geodesic distances.

Training data comes as :class:`DistanceGraph` objects. An exact graph is an
enumerated search tree with its distance map; a Monte-Carlo graph is the
prefix trie of sampled rollouts with estimated distances.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from .nn import AdamState, MlpParams, Rng, adam_step, init_mlp, mlp_backward, mlp_forward
from .tasks import get_engine

GEOMETRIES = ("hyperbolic", "euclidean")


@dataclass
class HeadConfig:
    n: int = 16
    hidden: int = 64
    gamma: float = 0.1
    gamma_prime: float = 0.1
    lam: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 20
    trees_per_batch: int = 1
    pairs_per_tree: int = 64
    triplets_per_tree: int = 64
    c_init: float = 1.0
    init_scale: float = 0.1
    learn_c: bool = True
    geometry: str = "hyperbolic"
    triplet_sampling: str = "uniform"  # or "stratified": anchors spread evenly over d classes
    seed: int = 0

    def validate(self) -> "HeadConfig":
        if self.gamma <= 0 or self.gamma_prime <= 0:
            raise ValueError("margins must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}")
        if self.triplet_sampling not in ("uniform", "stratified"):
            raise ValueError("triplet_sampling must be 'uniform' or 'stratified'")
        if min(self.n, self.hidden, self.epochs, self.trees_per_batch) < 1 or self.c_init <= 0:
            raise ValueError("sizes, epochs and c_init must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown head config keys: {unknown}")
        return cls(**known).validate()


@dataclass
class HeadParams:
    mlp: MlpParams
    log_c: np.ndarray  # shape (); trainable
    feat_mean: np.ndarray
    feat_std: np.ndarray
    geometry: str = "hyperbolic"

    @property
    def c(self) -> float:
        return float(np.exp(self.log_c))

    def arrays(self) -> dict:
        out = self.mlp.arrays("mlp.")
        out["log_c"] = self.log_c
        return out

    def all_arrays(self) -> dict:
        return {**self.arrays(), "feat_mean": self.feat_mean, "feat_std": self.feat_std}

    @classmethod
    def from_arrays(cls, arrays: dict, geometry: str) -> "HeadParams":
        from .nn import mlp_from_arrays

        return cls(mlp_from_arrays(arrays, "mlp."), np.array(arrays["log_c"]).reshape(()), arrays["feat_mean"], arrays["feat_std"], geometry)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha1()
        for k, v in sorted(self.all_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()


def init_head(d_feat: int, config: HeadConfig, rng: Rng, feat_mean=None, feat_std=None) -> HeadParams:
    mlp = init_mlp(d_feat, config.hidden, config.n, rng, out_scale=config.init_scale)
    mean = np.zeros(d_feat) if feat_mean is None else np.asarray(feat_mean, dtype=np.float64)
    std = np.ones(d_feat) if feat_std is None else np.asarray(feat_std, dtype=np.float64)
    return HeadParams(mlp, np.array(np.log(config.c_init)), mean, std, config.geometry)


# ---------------------------------------------------------------------------
# forward / backward through the head


def embed_features(head: HeadParams, X):
    """Embeddings for a feature batch; returns ``(z, cache)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != head.feat_mean.shape[0]:
        raise ValueError(f"feature dim {X.shape[-1]} != head input {head.feat_mean.shape[0]}")
    v, mcache = mlp_forward(head.mlp, (X - head.feat_mean) / head.feat_std)
    if head.geometry == "euclidean":
        return v, (mcache, v, None)
    c = head.c
    e = geo.exp_map_origin(v, c)
    return geo.project_to_ball(e, c), (mcache, v, e)


def embed_path(head: HeadParams, instance, states, ops) -> np.ndarray:
    """Embedding of the node reached by ``ops`` (``states`` includes the start state)."""
    feats = get_engine(instance.task_id).context_features(instance, states, ops)
    return embed_features(head, feats[None, :])[0][0]


def head_backward(head: HeadParams, cache, gz, gc_direct: float = 0.0) -> dict:
    """Parameter gradients given ``dL/dz`` and any direct ``dL/dc`` from the distances."""
    mcache, v, e = cache
    if head.geometry == "euclidean":
        grads, _ = mlp_backward(head.mlp, mcache, gz)
        g_logc = 0.0
    else:
        c = head.c
        ge, gc1 = geo.project_to_ball_vjp(e, c, gz)
        gv, gc2 = geo.exp_map_origin_vjp(v, c, ge)
        grads, _ = mlp_backward(head.mlp, mcache, gv)
        g_logc = (gc_direct + gc1 + gc2) * c
    out = {"mlp." + k: g for k, g in grads.items()}
    out["log_c"] = np.array(g_logc)
    return out


def radius(head: HeadParams, z):
    """Distance from the origin in the head's geometry."""
    if head.geometry == "euclidean":
        return np.linalg.norm(z, axis=-1)
    return geo.distance_to_origin(z, head.c)


def feature_radius(head: HeadParams, X) -> np.ndarray:
    """Origin distance of the embeddings of ``X``, via the closed form on the tangent vector.

    Equal to ``radius(head, embed_features(head, X)[0])`` up to rounding, but
    points on the clamp radius come out exactly equal.
    """
    v, _ = mlp_forward(head.mlp, (np.asarray(X, dtype=np.float64) - head.feat_mean) / head.feat_std)
    if head.geometry == "euclidean":
        return np.linalg.norm(v, axis=-1)
    return geo.exp_origin_distance(v, head.c)


def pair_distance(head: HeadParams, a, b):
    if head.geometry == "euclidean":
        return np.linalg.norm(a - b, axis=-1)
    return geo.geodesic_distance(a, b, head.c)


def _radius_grad(head, z):
    if head.geometry == "euclidean":
        r = np.linalg.norm(z, axis=-1)
        return r, z / np.maximum(r, geo.SMALL_NORM)[..., None], np.zeros_like(r)
    return geo.distance_to_origin_grad(z, head.c)


def _pair_grad(head, a, b):
    if head.geometry == "euclidean":
        diff = a - b
        r = np.linalg.norm(diff, axis=-1)
        u = np.where(r[..., None] > 0, diff / np.maximum(r, geo.SMALL_NORM)[..., None], 0.0)
        return r, u, -u, np.zeros_like(r)
    return geo.geodesic_distance_grad(a, b, head.c)


# ---------------------------------------------------------------------------
# losses on precomputed embeddings


def rank_loss(head: HeadParams, z, pairs, gamma: float):
    """Mean hinge ``max(0, r_i - r_j + gamma)`` over pairs with ``d_i < d_j``.

    Returns ``(loss, dL/dz, dL/dc)``.
    """
    gz = np.zeros_like(z)
    if len(pairs) == 0:
        return 0.0, gz, 0.0
    r, dr_dz, dr_dc = _radius_grad(head, z)
    i, j = pairs[:, 0], pairs[:, 1]
    h = r[i] - r[j] + gamma
    active = (h > 0).astype(np.float64) / len(pairs)
    loss = float(np.sum(np.maximum(h, 0.0)) / len(pairs))
    np.add.at(gz, i, active[:, None] * dr_dz[i])
    np.add.at(gz, j, -active[:, None] * dr_dz[j])
    gc = float(np.sum(active * (dr_dc[i] - dr_dc[j])))
    return loss, gz, gc


def metric_loss(head: HeadParams, z, triplets, weights, gamma_prime: float):
    """Weighted mean of ``max(0, d(z_i,z_j) - d(z_i,z_k) + gamma')``.

    Returns ``(loss, dL/dz, dL/dc)``.
    """
    gz = np.zeros_like(z)
    if len(triplets) == 0:
        return 0.0, gz, 0.0
    w = np.ones(len(triplets)) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    i, j, k = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    dij, gi1, gj, gc1 = _pair_grad(head, z[i], z[j])
    dik, gi2, gk, gc2 = _pair_grad(head, z[i], z[k])
    h = dij - dik + gamma_prime
    act = np.where(h > 0, w / wsum, 0.0)
    loss = float(np.sum(w * np.maximum(h, 0.0)) / wsum)
    np.add.at(gz, i, act[:, None] * (gi1 - gi2))
    np.add.at(gz, j, act[:, None] * gj)
    np.add.at(gz, k, -act[:, None] * gk)
    gc = float(np.sum(act * (gc1 - gc2)))
    return loss, gz, gc


def mc_weight(d_ij, d_ik, eta: float = 0.95):
    return eta ** (np.asarray(d_ij) + np.asarray(d_ik))


# ---------------------------------------------------------------------------
# training graphs


@dataclass
class DistanceGraph:
    """Nodes with features, a distance-to-solution value, and a rooted tree shape."""

    X: np.ndarray
    dval: np.ndarray  # exact d (inf at dead ends) or MC estimate in [0, 1]
    parent: np.ndarray
    depth: np.ndarray
    weighted: bool = False  # MC graphs weight triplets by eta^(d_ij + d_ik)
    eta: float = 0.95
    _anc: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.dval)

    def ancestors(self):
        if self._anc is None:
            n, dmax = len(self), int(self.depth.max()) if len(self) else 0
            anc = np.full((n, dmax + 1), -1, dtype=np.int64)
            for i in range(n):
                p = self.parent[i]
                if p >= 0:
                    anc[i] = anc[p]
                anc[i, self.depth[i]] = i
            self._anc = anc
        return self._anc

    def tree_distance(self, a, b):
        anc = self.ancestors()
        same = (anc[a] == anc[b]) & (anc[a] >= 0)
        lca = same.sum(axis=-1) - 1
        return self.depth[a] + self.depth[b] - 2 * lca


def path_features(instance, states, parent, depth, ops) -> np.ndarray:
    """Context features for every node of a rooted tree (parents before children).

    Same values as ``engine.context_features`` on each node's path, built
    incrementally from the parent's history block.
    """
    eng = get_engine(instance.task_id)
    k, H, F = eng.op_feature_dim, eng.max_depth, eng.feature_dim
    out = np.zeros((len(states), eng.context_dim))
    for i, s in enumerate(states):
        out[i, :F] = eng.featurize(instance, s)
        p = parent[i]
        if p >= 0:
            out[i, F:] = out[p, F:]
            t = depth[i] - 1
            if t < H:
                out[i, F + t * k : F + (t + 1) * k] = eng.op_features(instance, states[p], ops[i])
    return out


def tree_features(tree) -> np.ndarray:
    return path_features(tree.instance, tree.states, tree.parent, tree.depth, tree.op)


def graph_from_tree(tree, dmap=None) -> DistanceGraph:
    from .tree import distance_to_solution

    if dmap is None:
        dmap = distance_to_solution(tree)
    return DistanceGraph(tree_features(tree), np.asarray(dmap, dtype=np.float64), tree.parent, tree.depth)


def sample_pairs(graph: DistanceGraph, rng: Rng, count: int) -> np.ndarray:
    """Ordered pairs ``(i, j)`` with ``d_i < d_j``, uniform over valid unordered pairs.

    ``inf`` compares above every finite value; two ``inf`` nodes are never paired.
    """
    n = len(graph)
    d = graph.dval
    if n < 2 or count <= 0 or np.all(d == d[0]):
        return np.zeros((0, 2), dtype=np.int64)
    got = []
    have = 0
    for _ in range(200):
        m = max(256, 8 * count)
        a = rng.gen.integers(n, size=m)
        b = rng.gen.integers(n, size=m)
        lo = d[a] < d[b]
        hi = d[b] < d[a]
        keep = lo | hi
        i = np.where(lo, a, b)[keep]
        j = np.where(lo, b, a)[keep]
        got.append(np.stack([i, j], axis=1))
        have += len(i)
        if have >= count:
            break
    out = np.concatenate(got)[:count]
    return out.astype(np.int64)


def sample_triplets(graph: DistanceGraph, rng: Rng, count: int, mode: str = "uniform") -> tuple:
    """Triplets ``(i, j, k)`` with ``d_T(i,j) < d_T(i,k)``; returns ``(triplets, weights)``.

    In stratified mode the anchor is drawn from a uniformly chosen distance
    class first, so rare solvable states are not swamped by dead ends.
    """
    n = len(graph)
    empty = (np.zeros((0, 3), dtype=np.int64), np.zeros(0))
    if n < 3 or count <= 0:
        return empty
    if mode == "stratified":
        classes = [np.flatnonzero(graph.dval == v) for v in np.unique(graph.dval)]
    got = []
    have = 0
    for _ in range(200):
        m = max(256, 4 * count)
        if mode == "stratified":
            pick = rng.gen.integers(len(classes), size=m)
            i = np.array([classes[p][rng.gen.integers(len(classes[p]))] for p in pick], dtype=np.int64)
        else:
            i = rng.gen.integers(n, size=m)
        a = rng.gen.integers(n, size=m)
        b = rng.gen.integers(n, size=m)
        ok = (i != a) & (i != b) & (a != b)
        i, a, b = i[ok], a[ok], b[ok]
        da = graph.tree_distance(i, a)
        db = graph.tree_distance(i, b)
        near = da < db
        far = db < da
        keep = near | far
        j = np.where(near, a, b)[keep]
        k = np.where(near, b, a)[keep]
        got.append(np.stack([i[keep], j, k, np.minimum(da, db)[keep], np.maximum(da, db)[keep]], axis=1))
        have += int(keep.sum())
        if have >= count:
            break
    if not got:
        return empty
    arr = np.concatenate(got)[:count]
    trip = arr[:, :3].astype(np.int64)
    w = mc_weight(arr[:, 3], arr[:, 4], graph.eta) if graph.weighted else np.ones(len(arr))
    return trip, w


# ---------------------------------------------------------------------------
# training


def batch_loss(head: HeadParams, graphs: list, samples: list, config: HeadConfig):
    """Loss and gradients over a batch of graphs with pre-drawn samples.

    Each graph contributes its own rank and metric means; the batch loss is the
    average over graphs with the metric term scaled by ``lam``.
    """
    grads = {k: np.zeros_like(v) for k, v in head.arrays().items()}
    total_rank = total_metric = 0.0
    g = len(graphs)
    for graph, (pairs, trip, w) in zip(graphs, samples):
        used = np.unique(np.concatenate([pairs.ravel(), trip.ravel()]))
        if len(used) == 0:
            continue
        remap = np.full(len(graph), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        z, cache = embed_features(head, graph.X[used])
        lr_, gz_r, gc_r = rank_loss(head, z, remap[pairs], config.gamma)
        lm, gz_m, gc_m = metric_loss(head, z, remap[trip], w, config.gamma_prime)
        total_rank += lr_ / g
        total_metric += lm / g
        gz = (gz_r + config.lam * gz_m) / g
        gc = (gc_r + config.lam * gc_m) / g
        for k, v in head_backward(head, cache, gz, gc).items():
            grads[k] += v
    if not config.learn_c:
        grads["log_c"][...] = 0.0
    return total_rank, total_metric, grads


def feature_stats(graphs: list):
    X = np.concatenate([g.X for g in graphs])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def train_head(graphs: list, config: HeadConfig, rng: Rng | None = None, curve_anchors: int = 0):
    """Fit a head; returns ``(head, curves)`` with one curve row per epoch.

    ``graphs`` may be search trees (converted on the fly) or DistanceGraphs.
    ``curve_anchors > 0`` adds a median per-anchor Spearman column to the curves.
    """
    config.validate()
    graphs = [g if isinstance(g, DistanceGraph) else graph_from_tree(g) for g in graphs]
    if not graphs:
        raise ValueError("no training graphs")
    rng = rng or Rng(config.seed)
    mean, std = feature_stats(graphs)
    head = init_head(graphs[0].X.shape[1], config, rng.child("init"), mean, std)
    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    params = head.arrays()
    curves = []
    for epoch in range(config.epochs):
        erng = rng.child("epoch", epoch)
        order = erng.gen.permutation(len(graphs))
        sums = np.zeros(2)
        steps = 0
        for start in range(0, len(order), config.trees_per_batch):
            idx = order[start : start + config.trees_per_batch]
            batch = [graphs[t] for t in idx]
            samples = []
            for t, g in zip(idx, batch):
                srng = erng.child("tree", int(t))
                pairs = sample_pairs(g, srng, config.pairs_per_tree)
                trip, w = sample_triplets(g, srng, config.triplets_per_tree if config.lam > 0 else 0, config.triplet_sampling)
                samples.append((pairs, trip, w))
            lr_, lm, grads = batch_loss(head, batch, samples, config)
            adam_step(opt, params, grads)
            sums += (lr_, lm)
            steps += 1
        row = {"epoch": epoch + 1, "L_rank": sums[0] / steps, "L_metric": sums[1] / steps, "c": head.c}
        if curve_anchors:
            from .eval import anchor_spearman

            _, med = anchor_spearman(head, graphs[: min(len(graphs), 8)], curve_anchors, 64, rng.child("curve", epoch))
            row["median_anchor_rho"] = med
        curves.append(row)
    return head, curves


def embed_graph(head: HeadParams, graph: DistanceGraph) -> np.ndarray:
    return embed_features(head, graph.X)[0]


def radial_fidelity(head: HeadParams, graphs: list) -> float:
    """Spearman between d (inf mapped to max finite + 1) and radius, pooled over all nodes."""
    from .eval import spearman

    graphs = [g if isinstance(g, DistanceGraph) else graph_from_tree(g) for g in graphs]
    d = np.concatenate([g.dval for g in graphs])
    r = np.concatenate([feature_radius(head, g.X) for g in graphs])
    finite = np.isfinite(d)
    top = d[finite].max() if finite.any() else 0.0
    return spearman(np.where(finite, d, top + 1.0), r)


def curves_csv(curves: list) -> str:
    if not curves:
        return ""
    cols = list(curves[0])
    lines = [",".join(cols)]
    for row in curves:
        lines.append(",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def config_dict(config: HeadConfig) -> dict:
    return asdict(config)


def save_head(path, head: HeadParams, config: HeadConfig, meta: dict | None = None) -> None:
    from .nn import save_params

    save_params(path, head.all_arrays(), {"config": asdict(config), "geometry": head.geometry, **(meta or {})})


def load_head(path) -> tuple:
    """Returns ``(head, config, meta)``."""
    from .nn import load_params

    arrays, meta = load_params(path)
    if "feat_mean" not in arrays or "log_c" not in arrays:
        raise ValueError(f"{path}: not a head checkpoint")
    config = HeadConfig.from_dict(meta["config"])
    return HeadParams.from_arrays(arrays, meta["geometry"]), config, meta


# ---------------------------------------------------------------------------
# Monte-Carlo estimation without tree access


@dataclass
class McConfig:
    K: int = 32
    max_steps: int | None = None
    eta: float = 0.95
    temperature: float = 0.8


def uniform_behavior(instance, state, ops, rng: Rng):
    return ops[int(rng.gen.integers(len(ops)))]


@dataclass
class McRolloutSet:
    instance: object
    states: list  # trie nodes
    parent: np.ndarray
    depth: np.ndarray
    op: list
    d_hat: np.ndarray
    successes: np.ndarray
    K: int
    eta: float

    def graph(self) -> DistanceGraph:
        X = path_features(self.instance, self.states, self.parent, self.depth, self.op)
        return DistanceGraph(X, self.d_hat.astype(np.float64), self.parent, self.depth, weighted=True, eta=self.eta)


def _rollout(eng, instance, state, policy, rng, steps):
    """One behavior rollout; returns (ops, states after each op, success)."""
    ops_taken, states = [], []
    for _ in range(steps):
        if eng.is_goal(instance, state):
            break
        ops = eng.ops(instance, state)
        if not ops:
            break
        op = policy(instance, state, ops, rng)
        state = eng.apply(instance, state, op)
        ops_taken.append(op)
        states.append(state)
    return ops_taken, states, eng.is_goal(instance, state)


def success_count(instance, state, policy, K: int, rng: Rng, max_steps: int) -> int:
    eng = get_engine(instance.task_id)
    return sum(_rollout(eng, instance, state, policy, rng, max_steps)[2] for _ in range(K))


def mc_estimate(instance, behavior_policy=uniform_behavior, config: McConfig | None = None, rng: Rng | None = None) -> McRolloutSet:
    """Sample K rollouts from the initial state and estimate ``d_hat`` on every state they visit.

    Only the task engine is consulted; passing an enumerated tree is an error.
    Rollouts are merged into a prefix trie, so two rollouts that share a prefix
    up to step t and then diverge give nodes at trie distance j + k, and states
    on one rollout k steps apart are at distance k. Each trie node gets its own
    K fresh rollouts for ``d_hat = 1 - successes / K``.
    """
    from .tree import SearchTree

    if isinstance(instance, SearchTree) or not hasattr(instance, "task_id"):
        raise TypeError("mc_estimate takes a problem instance; enumerated trees are off limits")
    config = config or McConfig()
    rng = rng or Rng(0)
    eng = get_engine(instance.task_id)
    steps = config.max_steps or eng.max_depth
    states, parent, depth, ops = [instance.init_state], [-1], [0], [None]
    index = {(): 0}
    for r in range(config.K):
        path, visited, _ = _rollout(eng, instance, instance.init_state, behavior_policy, rng.child("root", r), steps)
        key = ()
        for t, (op, s) in enumerate(zip(path, visited)):
            prev = index[key]
            key = key + (eng.render_op(op),)
            if key not in index:
                index[key] = len(states)
                states.append(s)
                parent.append(prev)
                depth.append(t + 1)
                ops.append(op)
    succ = np.zeros(len(states), dtype=np.int64)
    for i, s in enumerate(states):
        succ[i] = success_count(instance, s, behavior_policy, config.K, rng.child("value", i), steps - depth[i])
    d_hat = 1.0 - succ / config.K
    return McRolloutSet(instance, states, np.array(parent), np.array(depth), ops, d_hat, succ, config.K, config.eta)

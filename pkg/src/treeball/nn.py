"""Two-layer GELU MLPs with hand-written backprop, AdamW, seeding and checkpoints.

Parameters are kept in flat ``{name: ndarray}`` dicts so the optimizer and the
checkpoint writer do not need to know which model they belong to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .tasks.base import derive_seed

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _identity(x):
    return x


def _ones_like(x):
    return np.ones_like(x)


ACTIVATIONS = {"gelu": (gelu, gelu_grad), "identity": (_identity, _ones_like)}


class Rng:
    """Seeded generator that can hand out independent named children."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.default_rng(self.seed)

    def child(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))


@dataclass
class MlpParams:
    W1: np.ndarray  # (d_hidden, d_in)
    b1: np.ndarray
    W2: np.ndarray  # (d_out, d_hidden)
    b2: np.ndarray
    activation: str = "gelu"

    @property
    def dims(self):
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    def arrays(self, prefix: str = "") -> dict:
        return {prefix + k: getattr(self, k) for k in ("W1", "b1", "W2", "b2")}

    def copy(self) -> "MlpParams":
        return MlpParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.activation)


def init_mlp(d_in: int, d_hidden: int, d_out: int, rng: Rng, out_scale: float = 1.0) -> MlpParams:
    """Kaiming-uniform fan-in init for both layers; biases start at zero."""
    g = rng.gen
    lim1 = np.sqrt(6.0 / d_in)
    lim2 = np.sqrt(6.0 / d_hidden) * out_scale
    return MlpParams(
        W1=g.uniform(-lim1, lim1, size=(d_hidden, d_in)),
        b1=np.zeros(d_hidden),
        W2=g.uniform(-lim2, lim2, size=(d_out, d_hidden)),
        b2=np.zeros(d_out),
    )


def zeros_mlp(d_in: int, d_hidden: int, d_out: int) -> MlpParams:
    return MlpParams(np.zeros((d_hidden, d_in)), np.zeros(d_hidden), np.zeros((d_out, d_hidden)), np.zeros(d_out))


def mlp_forward(p: MlpParams, x):
    """``y = W2 act(W1 x + b1) + b2`` on the last axis; returns ``(y, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.W1.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} != {p.W1.shape[1]}")
    act, _ = ACTIVATIONS[p.activation]
    pre = x @ p.W1.T + p.b1
    h = act(pre)
    y = h @ p.W2.T + p.b2
    return y, (x, pre, h)


def mlp_backward(p: MlpParams, cache, gy):
    """Gradients of ``sum(gy * y)``; returns ``(grads dict, gx)``."""
    x, pre, h = cache
    gy = np.asarray(gy, dtype=np.float64)
    if gy.shape[-1] != p.W2.shape[0]:
        raise ValueError(f"upstream dim {gy.shape[-1]} != {p.W2.shape[0]}")
    _, dact = ACTIVATIONS[p.activation]
    gy2 = gy.reshape(-1, gy.shape[-1])
    h2 = h.reshape(-1, h.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grads = {"W2": gy2.T @ h2, "b2": gy2.sum(axis=0)}
    gpre = (gy2 @ p.W2) * dact(pre.reshape(-1, pre.shape[-1]))
    grads["W1"] = gpre.T @ x2
    grads["b1"] = gpre.sum(axis=0)
    gx = (gpre @ p.W1).reshape(x.shape)
    return grads, gx


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One AdamW update, in place on ``params`` (decoupled weight decay)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * update


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(loss_fn, params: dict, grads: dict, rng: Rng, n_probe: int = 20, step: float = 1e-4) -> float:
    """Max relative error between analytic ``grads`` and central differences.

    ``loss_fn()`` must read the current contents of ``params``; entries are
    perturbed in place and restored.
    """
    worst = 0.0
    names = sorted(params)
    for _ in range(n_probe):
        name = names[int(rng.gen.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.gen.integers(s)) for s in p.shape) if p.ndim else ()
        old = p[idx]
        p[idx] = old + step
        up = loss_fn()
        p[idx] = old - step
        down = loss_fn()
        p[idx] = old
        num = (up - down) / (2 * step)
        ana = float(np.asarray(grads[name])[idx])
        err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "treeball-params/1"


def save_params(path, arrays: dict, meta: dict | None = None) -> None:
    """JSON checkpoint: shapes plus row-major values (``repr``-exact floats)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "arrays": {k: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()} for k, v in sorted(arrays.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_params(path) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    arrays = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["arrays"].items()}
    return arrays, doc["meta"]


def mlp_from_arrays(arrays: dict, prefix: str = "", activation: str = "gelu") -> MlpParams:
    return MlpParams(*(arrays[prefix + k] for k in ("W1", "b1", "W2", "b2")), activation=activation)

"""Task-level router: embedding lookup, router networks, selection and disabling.

Routes are stored layer-major: ``L`` and ``D`` have shape ``(n_layers, n_experts)``
per task, so ``D[i, j]`` weights expert ``j`` of layer ``i``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transformer import ConfigError, LayerContext, expert_forward, init_layer_params, ModelConfig

SELECTION_FNS = ("softmax", "gumbel", "gumbel_st")
ROUTER_VARIANTS = ("mlp", "bilstm", "transformer")


class DegenerateRowError(ValueError):
    """Every expert of a layer would be disabled."""


class TaskEmbeddingTable:
    """``K x d`` task representations with per-row freeze flags."""

    def __init__(self, vectors, frozen=None, names=None):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        self.weight = Tensor(vectors.copy(), requires_grad=True)
        K = vectors.shape[0]
        self.frozen = np.zeros(K, dtype=bool) if frozen is None else np.asarray(frozen, bool).copy()
        self.names = list(names) if names is not None else [str(k) for k in range(K)]
        if len(self.frozen) != K or len(self.names) != K:
            raise ConfigError("frozen flags and names must match the row count")

    @property
    def dim(self):
        return self.weight.shape[1]

    def __len__(self):
        return self.weight.shape[0]

    def index(self, name):
        return self.names.index(name)

    def lookup(self, rows):
        return ad.take_rows(self.weight, np.asarray(rows))

    def add_row(self, name, vector, frozen=True):
        vector = np.asarray(vector, dtype=np.float64).reshape(1, -1)
        if vector.shape[1] != self.dim:
            raise ConfigError(f"vector dim {vector.shape[1]} != table dim {self.dim}")
        self.weight = Tensor(np.vstack([self.weight.data, vector]), requires_grad=True)
        self.frozen = np.append(self.frozen, frozen)
        self.names.append(name)
        return len(self.names) - 1

    def copy(self):
        return TaskEmbeddingTable(self.weight.data, self.frozen, self.names)


# ----------------------------------------------------------------- routers
def _dense(rng, fan_in, fan_out, std=None):
    std = np.sqrt(2.0 / (fan_in + fan_out)) if std is None else std
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class RouterNetwork:
    """Maps task representations ``(K, d)`` to routing logits ``(K, n, m)``.

    ``mlp``: dense(d -> 2d), GELU, dense(2d -> n*m).
    ``bilstm``: inputs ``T_k + pos_i`` for each layer step, bidirectional LSTM
    with hidden size d, linear projection of the concatenated states to m logits.
    ``transformer``: the same n-token sequence through one encoder block, then a
    linear head to m logits per position.
    """

    def __init__(self, variant, d, n_layers, n_experts, rng, out_std=0.02):
        if variant not in ROUTER_VARIANTS:
            raise ConfigError(f"unknown router variant {variant!r}")
        self.variant, self.d, self.n, self.m = variant, d, n_layers, n_experts
        p = {}
        if variant == "mlp":
            p["W1"], p["b1"] = _dense(rng, d, 2 * d), np.zeros(2 * d)
            p["W2"], p["b2"] = _dense(rng, 2 * d, n_layers * n_experts, out_std), \
                np.zeros(n_layers * n_experts)
        else:
            p["pos"] = rng.normal(0.0, 0.02, size=(n_layers, d))
            if variant == "bilstm":
                for tag in ("f", "b"):
                    p[f"W_{tag}"] = _dense(rng, 2 * d, 4 * d)
                    b = np.zeros(4 * d)
                    b[d:2 * d] = 1.0  # forget-gate bias
                    p[f"b_{tag}"] = b
                p["Wout"], p["bout"] = _dense(rng, 2 * d, n_experts, out_std), np.zeros(n_experts)
            else:
                heads = 4 if d % 4 == 0 else 1
                self.heads = heads
                cfg = ModelConfig(n_layers=2, n_experts=1, d_model=d, n_heads=heads,
                                  d_ff=2 * d, vocab_size=1, max_seq_len=n_layers)
                for k, v in init_layer_params(cfg, "enc", rng).items():
                    p[f"enc.{k}"] = v
                p["Wout"], p["bout"] = _dense(rng, d, n_experts, out_std), np.zeros(n_experts)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float64, copy=True)

    def __call__(self, T):
        return router_forward(T, self)


def _lstm(xs, W, b, d):
    K = xs[0].shape[0]
    h = Tensor(np.zeros((K, d)))
    c = Tensor(np.zeros((K, d)))
    out = []
    for x in xs:
        z = ad.linear(ad.concat([x, h], axis=-1), W, b)
        i, f = ad.sigmoid(z[:, :d]), ad.sigmoid(z[:, d:2 * d])
        g, o = ad.tanh(z[:, 2 * d:3 * d]), ad.sigmoid(z[:, 3 * d:])
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        out.append(h)
    return out


def router_forward(T, router):
    """Routing logits ``L`` of shape ``(K, n, m)`` (or ``(n, m)`` for a single vector)."""
    T = ad.as_tensor(T)
    single = T.ndim == 1
    if single:
        T = T.reshape(1, -1)
    if T.shape[1] != router.d:
        raise ConfigError(f"task representation dim {T.shape[1]} != router dim {router.d}")
    p, K, n, m = router.params, T.shape[0], router.n, router.m
    if router.variant == "mlp":
        hdn = ad.gelu(ad.linear(T, p["W1"], p["b1"]))
        L = ad.linear(hdn, p["W2"], p["b2"]).reshape(K, n, m)
    elif router.variant == "bilstm":
        xs = [ad.add(T, p["pos"][i]) for i in range(n)]
        fw = _lstm(xs, p["W_f"], p["b_f"], router.d)
        bw = _lstm(xs[::-1], p["W_b"], p["b_b"], router.d)[::-1]
        states = ad.stack([ad.concat([a, b], axis=-1) for a, b in zip(fw, bw)], axis=1)
        L = ad.linear(states, p["Wout"], p["bout"])
    else:
        seq = ad.add(T.reshape(K, 1, router.d), p["pos"])
        enc = {k[4:]: v for k, v in p.items() if k.startswith("enc.")}
        ctx = LayerContext(np.zeros((K, 1, 1, n)))
        hid = expert_forward(enc, seq, ctx, router.heads)
        L = ad.linear(hid, p["Wout"], p["bout"])
    return L.reshape(n, m) if single else L


# -------------------------------------------------------------- selection
def _one_hot_argmax(z):
    """Row-wise one-hot of the argmax; ties go to the lowest index."""
    idx = np.argmax(z, axis=-1)
    out = np.zeros_like(z, dtype=np.float64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def select(L, fn, tau, rng=None, mode="train"):
    """Normalise logits ``L (..., m)`` into a decision matrix.

    softmax:   softmax(L / tau) in both modes.
    gumbel:    softmax(L / tau + G), G ~ Gumbel(0, 1) i.i.d.
    gumbel_st: forward is the one-hot argmax of ``L / tau + G``; the backward pass
               uses the gradient of softmax(L / tau + G).
    The Gumbel variants are noiseless one-hot argmax of ``L`` in eval mode.

    The perturbation is added after dividing by ``tau`` so that hard selections
    follow softmax(L / tau): annealing tau moves sampling from near-uniform
    exploration towards the argmax.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if fn not in SELECTION_FNS:
        raise ConfigError(f"unknown selection function {fn!r}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    L = ad.as_tensor(L)
    if fn == "softmax":
        return ad.softmax(L, tau)
    if mode == "eval":
        return Tensor(_one_hot_argmax(L.data))
    if rng is None:
        raise ValueError("gumbel selection in train mode needs an rng")
    G = rng.gumbel(size=L.shape)
    z = ad.add(ad.mul(L, 1.0 / tau), G)
    soft = ad.softmax(z)
    if fn == "gumbel":
        return soft
    return ad.straight_through(_one_hot_argmax(z.data), soft)


@dataclass
class TemperatureSchedule:
    tau0: float = 5.0
    tau_end: float = 0.1
    total_steps: int = 2000

    def __post_init__(self):
        if not (self.tau0 >= self.tau_end > 0):
            raise ConfigError("schedule needs tau0 >= tau_end > 0")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")

    def __call__(self, step):
        return anneal_temperature(step, self)


def anneal_temperature(step, schedule):
    """Geometric decay ``tau0 * (tau_end / tau0) ** (s / S)``, clamped at tau_end beyond S."""
    if step < 0:
        raise ValueError("step must be >= 0")
    S = schedule.total_steps
    if S == 0 or step >= S:
        return schedule.tau_end if step > 0 or S == 0 else schedule.tau0
    return schedule.tau0 * (schedule.tau_end / schedule.tau0) ** (step / S)


def disable_expert(L, layer, expert):
    """Copy of ``L (n, m)`` with ``L[layer, expert] = -inf``."""
    L = np.array(L.data if isinstance(L, Tensor) else L, dtype=np.float64, copy=True)
    row = L[layer]
    others = np.isfinite(np.delete(row, expert))
    if not others.any():
        raise DegenerateRowError(f"disabling expert {expert} leaves layer {layer} empty")
    L[layer, expert] = -np.inf
    return L


def disabled_mask(n, m, experts):
    """Additive mask with -inf at each (layer, expert) in ``experts``."""
    mask = np.zeros((n, m))
    for i, j in experts:
        mask[i, j] = -np.inf
    if np.isneginf(mask).all(axis=1).any():
        raise DegenerateRowError("a layer would have every expert disabled")
    return mask


class Routing:
    """Router network + task table + selection function, producing decisions per task."""

    def __init__(self, table, router, selection="gumbel_st", schedule=None, eval_tau=None):
        if selection not in SELECTION_FNS:
            raise ConfigError(f"unknown selection function {selection!r}")
        self.table = table
        self.router = router
        self.selection = selection
        self.schedule = schedule or TemperatureSchedule()
        self.eval_tau = self.schedule.tau_end if eval_tau is None else eval_tau

    def parameters(self):
        return self.router.parameters()

    def logits(self, rows):
        return router_forward(self.table.lookup(rows), self.router)

    def decisions(self, rows, tau, rng=None, mode="train", mask=None):
        L = self.logits(rows)
        if mask is not None:
            L = ad.add(L, mask)
        return select(L, self.selection, tau, rng, mode)

    def eval_routes(self, rows=None, mask=None):
        """Eval-mode decision matrices ``(K, n, m)`` as numpy."""
        rows = np.arange(len(self.table)) if rows is None else np.asarray(rows)
        with ad.no_grad():
            return self.decisions(rows, self.eval_tau, mode="eval", mask=mask).data.copy()

    def soft_routes(self, rows=None, tau=None):
        """softmax(L / tau) for every task; used for correlation analysis."""
        rows = np.arange(len(self.table)) if rows is None else np.asarray(rows)
        with ad.no_grad():
            return ad.softmax(self.logits(rows), tau or self.eval_tau).data.copy()


# ------------------------------------------------------------------ export
def export_routes(path, task_names, D, L, step=0, temperature=None, selection_fn=None):
    """CSV of (task_id, layer, expert, weight, logit) preceded by a ``# {json}`` header line."""
    D, L = np.asarray(D, dtype=np.float64), np.asarray(L, dtype=np.float64)
    if D.shape != L.shape or D.shape[0] != len(task_names):
        raise ValueError("routes and logits must be (K, n, m) over the same tasks")
    header = {"step": int(step), "temperature": temperature, "selection_fn": selection_fn}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["task_id", "layer", "expert", "weight", "logit"])
        for k, name in enumerate(task_names):
            for i in range(D.shape[1]):
                for j in range(D.shape[2]):
                    w.writerow([name, i, j, repr(float(D[k, i, j])), repr(float(L[k, i, j]))])


def read_routes(path):
    """Inverse of export_routes: (header, task_names, D, L)."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing JSON header")
        header = json.loads(first[2:])
        rows = list(csv.DictReader(fh))
    names = list(dict.fromkeys(r["task_id"] for r in rows))
    n = max(int(r["layer"]) for r in rows) + 1
    m = max(int(r["expert"]) for r in rows) + 1
    D = np.zeros((len(names), n, m))
    L = np.zeros_like(D)
    idx = {nm: k for k, nm in enumerate(names)}
    for r in rows:
        k, i, j = idx[r["task_id"]], int(r["layer"]), int(r["expert"])
        D[k, i, j], L[k, i, j] = float(r["weight"]), float(r["logit"])
    return header, names, D, L

"""Encoder-decoder transformer whose layers are replicated into experts.

Layer ``i`` of the network holds ``m`` experts; each expert is a complete
pre-LN transformer block.  For a routing matrix ``D`` (layer-major, shape
``n x m``, or ``B x n x m`` for per-example routing) the output of layer ``i``
is ``sum_j D[i, j] * expert_ij(h)``.  Experts whose weight is exactly zero for
every row of the batch are skipped; rows with zero weight are sliced out
before an expert runs.

Token/position embeddings, the final layer norms and the output head are
shared by all experts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_MASK = -1e9

ENC_KEYS = ("ln1_g", "ln1_b", "Wqkv", "bqkv", "Wo", "bo",
            "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")
DEC_KEYS = ("ln1_g", "ln1_b", "Wqkv", "bqkv", "Wo", "bo",
            "lnc_g", "lnc_b", "Wcq", "bcq", "Wckv", "bckv", "Wco", "bco",
            "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_experts: int = 3
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 128
    max_seq_len: int = 32
    noise_variance: float = 1e-8
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.n_layers < 2 or self.n_layers % 2:
            raise ConfigError(f"n_layers must be even and >= 2, got {self.n_layers}")
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be >= 0")

    @property
    def n_encoder(self):
        return self.n_layers // 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ------------------------------------------------------------------ init
def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_layer_params(cfg, kind, rng):
    """Fresh parameters (numpy arrays) for one encoder or decoder block."""
    d, f = cfg.d_model, cfg.d_ff
    p = {
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
    }
    p["Wqkv"] = np.concatenate([_dense(rng, d, d) for _ in range(3)], axis=1)
    p["bqkv"] = np.zeros(3 * d)
    p["Wo"] = _dense(rng, d, d)
    p["bo"] = np.zeros(d)
    if kind == "dec":
        p["lnc_g"], p["lnc_b"] = np.ones(d), np.zeros(d)
        p["Wcq"], p["bcq"] = _dense(rng, d, d), np.zeros(d)
        p["Wckv"] = np.concatenate([_dense(rng, d, d) for _ in range(2)], axis=1)
        p["bckv"] = np.zeros(2 * d)
        p["Wco"], p["bco"] = _dense(rng, d, d), np.zeros(d)
    p["ln2_g"], p["ln2_b"] = np.ones(d), np.zeros(d)
    p["W1"], p["b1"] = _dense(rng, d, f), np.zeros(f)
    p["W2"], p["b2"] = _dense(rng, f, d), np.zeros(d)
    keys = DEC_KEYS if kind == "dec" else ENC_KEYS
    return {k: p[k] for k in keys}


def init_shared_params(cfg, rng):
    d, V = cfg.d_model, cfg.vocab_size
    return {
        "tok_emb": rng.normal(0.0, d ** -0.5, size=(V, d)),
        "pos_emb": rng.normal(0.0, 0.02, size=(cfg.max_seq_len, d)),
        "enc_ln_g": np.ones(d), "enc_ln_b": np.zeros(d),
        "dec_ln_g": np.ones(d), "dec_ln_b": np.zeros(d),
        "head_W": _dense(rng, d, V), "head_b": np.zeros(V),
    }


def init_experts(base_layer_params, m, noise_variance, rng_seed):
    """``m`` copies of one layer, each perturbed by i.i.d. N(0, noise_variance) noise."""
    if noise_variance < 0:
        raise ConfigError("noise_variance must be >= 0")
    rng = np.random.default_rng(rng_seed)
    std = np.sqrt(noise_variance)
    row = []
    for _ in range(m):
        expert = {}
        for k, v in base_layer_params.items():
            v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
            if noise_variance == 0:
                expert[k] = v.copy()
            else:
                expert[k] = v + rng.normal(0.0, std, size=v.shape)
        row.append(expert)
    return row


class ExpertGrid:
    """Shared parameters plus ``experts[i][j]`` parameter dicts of Tensors."""

    def __init__(self, config, shared, experts):
        self.config = config
        self.shared = {k: _param(v) for k, v in shared.items()}
        self.experts = [[{k: _param(v) for k, v in e.items()} for e in row] for row in experts]
        if len(self.experts) != config.n_layers:
            raise ConfigError("expert rows must equal n_layers")
        for row in self.experts:
            if len(row) != config.n_experts:
                raise ConfigError("each layer needs n_experts experts")
        self.calls = np.zeros((config.n_layers, config.n_experts), dtype=np.int64)

    @classmethod
    def random(cls, config, rng):
        shared = init_shared_params(config, rng)
        experts = []
        for i in range(config.n_layers):
            kind = "enc" if i < config.n_encoder else "dec"
            base = init_layer_params(config, kind, rng)
            experts.append(init_experts(base, config.n_experts, 0.0, 0))
        return cls(config, shared, experts)

    @classmethod
    def from_base(cls, base, n_experts, noise_variance, seed):
        """Replicate every layer of a single-expert ``base`` grid into ``n_experts``."""
        cfg = ModelConfig(**{**base.config.to_dict(), "n_experts": n_experts,
                             "noise_variance": noise_variance})
        seeds = np.random.SeedSequence(seed).spawn(cfg.n_layers)
        experts = [init_experts(base.experts[i][0], n_experts, noise_variance, seeds[i])
                   for i in range(cfg.n_layers)]
        shared = {k: v.data.copy() for k, v in base.shared.items()}
        return cls(cfg, shared, experts)

    def named_parameters(self):
        out = [(f"shared.{k}", v) for k, v in self.shared.items()]
        for i, row in enumerate(self.experts):
            for j, e in enumerate(row):
                out.extend((f"layer{i}.expert{j}.{k}", v) for k, v in e.items())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def expert_parameters(self, selected=None):
        """Parameters of experts; ``selected`` is an optional boolean ``n x m`` mask."""
        out = []
        for i, row in enumerate(self.experts):
            for j, e in enumerate(row):
                if selected is None or selected[i, j]:
                    out.extend(e.values())
        return out

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=np.float64, copy=True)

    def copy(self):
        g = ExpertGrid(self.config, {k: v.data.copy() for k, v in self.shared.items()},
                       [[{k: v.data.copy() for k, v in e.items()} for e in row]
                        for row in self.experts])
        return g

    def set_requires_grad(self, flag, params=None):
        for p in params if params is not None else self.parameters():
            p.requires_grad = flag

    def reset_counters(self):
        self.calls[:] = 0


def _param(v):
    if isinstance(v, Tensor):
        return Tensor(v.data.copy(), requires_grad=True)
    return Tensor(np.array(v, dtype=np.float64, copy=True), requires_grad=True)


# --------------------------------------------------------------- forward
class LayerContext:
    """Per-batch inputs a block needs besides its hidden state."""

    def __init__(self, self_mask, enc_out=None, enc_mask=None):
        self.self_mask = self_mask
        self.enc_out = enc_out
        self.enc_mask = enc_mask

    def subset(self, rows):
        enc = None if self.enc_out is None else ad.take_rows(self.enc_out, rows)
        em = None if self.enc_mask is None else self.enc_mask[rows]
        return LayerContext(self.self_mask[rows], enc, em)


def _heads(x, B, T, H):
    return x.reshape(B, T, H, -1).transpose(0, 2, 1, 3)


def _attend(q, k, v, mask, B, T, H):
    dh = q.shape[-1]
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = ad.softmax(ad.add(scores, mask), axis=-1)
    o = ad.matmul(att, v).transpose(0, 2, 1, 3)
    return o.reshape(B, T, H * dh)


def self_attention(x, p, n_heads, mask):
    B, T, d = x.shape
    qkv = ad.linear(x, p["Wqkv"], p["bqkv"]).reshape(B, T, 3, n_heads, d // n_heads)
    qkv = qkv.transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    return ad.linear(_attend(q, k, v, mask, B, T, n_heads), p["Wo"], p["bo"])


def cross_attention(x, mem, p, n_heads, mask):
    B, T, d = x.shape
    S = mem.shape[1]
    q = _heads(ad.linear(x, p["Wcq"], p["bcq"]), B, T, n_heads)
    kv = ad.linear(mem, p["Wckv"], p["bckv"]).reshape(B, S, 2, n_heads, d // n_heads)
    kv = kv.transpose(2, 0, 3, 1, 4)
    return ad.linear(_attend(q, kv[0], kv[1], mask, B, T, n_heads), p["Wco"], p["bco"])


def adapter_forward(x, a):
    """Bottleneck adapter with residual: ``x + up(gelu(down(x)))``."""
    return ad.add(x, ad.linear(ad.gelu(ad.linear(x, a["down_W"], a["down_b"])),
                               a["up_W"], a["up_b"]))


def expert_forward(p, h, ctx, n_heads, adapter=None):
    """One pre-LN transformer block; decoder blocks are recognised by their keys."""
    a = ad.layer_norm(h, p["ln1_g"], p["ln1_b"])
    h = ad.add(h, self_attention(a, p, n_heads, ctx.self_mask))
    if "Wcq" in p:
        a = ad.layer_norm(h, p["lnc_g"], p["lnc_b"])
        h = ad.add(h, cross_attention(a, ctx.enc_out, p, n_heads, ctx.enc_mask))
    f = ad.layer_norm(h, p["ln2_g"], p["ln2_b"])
    f = ad.linear(ad.gelu(ad.linear(f, p["W1"], p["b1"])), p["W2"], p["b2"])
    if adapter is not None:
        f = adapter(f) if callable(adapter) else adapter_forward(f, adapter)
    return ad.add(h, f)


def _layer_weights(D, i, B):
    """Row ``i`` of ``D`` as a (B, m) Tensor, plus its numpy values."""
    D = ad.as_tensor(D)
    if D.ndim == 2:
        row = D[i]
        vals = np.broadcast_to(row.data, (B, row.shape[0]))
        return row, vals, True
    w = D[:, i]
    return w, w.data, False


def moe_layer_forward(h_in, i, grid, D, ctx, adapter=None):
    """``sum_j D[i, j] * expert_ij(h_in)``, skipping zero-weight experts and rows."""
    B = h_in.shape[0]
    w, vals, shared_row = _layer_weights(D, i, B)
    n_heads = grid.config.n_heads
    out = None
    for j, params in enumerate(grid.experts[i]):
        col = vals[:, j]
        rows = np.flatnonzero(col != 0)
        if rows.size == 0:
            continue
        grid.calls[i, j] += 1
        if rows.size == B:
            y = expert_forward(params, h_in, ctx, n_heads, adapter)
            wj = w[j] if shared_row else w[:, j].reshape(B, 1, 1)
            y = ad.mul(y, wj)
        else:
            y = expert_forward(params, ad.take_rows(h_in, rows), ctx.subset(rows),
                               n_heads, adapter)
            wj = ad.take_rows(w[:, j], rows).reshape(rows.size, 1, 1)
            y = ad.scatter_rows(ad.mul(y, wj), rows, B)
        out = y if out is None else ad.add(out, y)
    if out is None:
        raise ValueError(f"layer {i}: every expert has zero weight")
    return out


def pad_batch(seqs, pad_id, length=None):
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), pad_id, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out


def _check_ids(ids, cfg):
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id out of vocabulary")
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len")


def _embed(grid, ids):
    T = ids.shape[1]
    x = ad.embedding(grid.shared["tok_emb"], ids)
    return ad.add(x, grid.shared["pos_emb"][:T])


def encode(grid, input_ids, D, adapters=None):
    """Run the encoder half; returns (final-normed states, additive key mask)."""
    cfg = grid.config
    ids = np.asarray(input_ids)
    _check_ids(ids, cfg)
    B, S = ids.shape
    key_mask = np.where(ids == cfg.pad_id, NEG_MASK, 0.0)[:, None, None, :]
    ctx = LayerContext(key_mask)
    h = _embed(grid, ids)
    for i in range(cfg.n_encoder):
        h = moe_layer_forward(h, i, grid, D, ctx, None if adapters is None else adapters[i])
    h = ad.layer_norm(h, grid.shared["enc_ln_g"], grid.shared["enc_ln_b"])
    return h, key_mask


def decode(grid, dec_ids, enc_out, enc_mask, D, adapters=None):
    """Decoder half; returns (B, T, V) logits."""
    cfg = grid.config
    ids = np.asarray(dec_ids)
    _check_ids(ids, cfg)
    B, T = ids.shape
    causal = np.triu(np.full((T, T), NEG_MASK), k=1)
    pad = np.where(ids == cfg.pad_id, NEG_MASK, 0.0)[:, None, None, :]
    self_mask = causal[None, None] + pad
    # bos never padded, so every query row keeps at least one key
    ctx = LayerContext(self_mask, enc_out, enc_mask)
    h = _embed(grid, ids)
    for i in range(cfg.n_encoder, cfg.n_layers):
        h = moe_layer_forward(h, i, grid, D, ctx, None if adapters is None else adapters[i])
    h = ad.layer_norm(h, grid.shared["dec_ln_g"], grid.shared["dec_ln_b"])
    return ad.linear(h, grid.shared["head_W"], grid.shared["head_b"])


def shift_right(target_ids, bos_id, pad_id):
    t = np.asarray(target_ids)
    dec = np.full_like(t, pad_id)
    dec[:, 0] = bos_id
    dec[:, 1:] = t[:, :-1]
    return dec


def model_forward(input_ids, target_ids, grid, D, adapters=None, reduction="mean"):
    """Teacher-forced forward pass; returns ``(logits, loss)``.

    ``target_ids`` hold the output tokens followed by eos, padded with pad_id.
    """
    cfg = grid.config
    enc_out, enc_mask = encode(grid, input_ids, D, adapters)
    dec_in = shift_right(target_ids, cfg.bos_id, cfg.pad_id)
    logits = decode(grid, dec_in, enc_out, enc_mask, D, adapters)
    loss = ad.cross_entropy(logits, target_ids, cfg.pad_id, reduction=reduction)
    return logits, loss


def greedy_decode(input_ids, grid, D, max_len, eos_id=None):
    """Argmax decoding; ties resolve to the lowest token id.  Returns token lists without eos."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cfg = grid.config
    eos_id = cfg.eos_id if eos_id is None else eos_id
    ids = np.asarray(input_ids)
    B = ids.shape[0]
    max_len = min(max_len, cfg.max_seq_len)
    with ad.no_grad():
        enc_out, enc_mask = encode(grid, ids, D)
        dec = np.full((B, 1), cfg.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outputs = [[] for _ in range(B)]
        for _ in range(max_len):
            logits = decode(grid, dec, enc_out, enc_mask, D).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for r in range(B):
                if not done[r]:
                    if nxt[r] == eos_id:
                        done[r] = True
                    else:
                        outputs[r].append(int(nxt[r]))
            if done.all():
                break
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return outputs


def compute_multiplier(routing, n_experts=None):
    """Average number of active experts per layer, as a Fraction.

    ``routing`` is a decision matrix (``n x m`` or stacked ``K x n x m``) or a
    baseline mode name such as ``"vanilla"``, ``"task_random_2"``, ``"average"``
    or ``"gumbel_st"``.
    """
    if isinstance(routing, str):
        if routing in ("vanilla", "gumbel_st", "none", "one_hot"):
            return Fraction(1)
        if routing == "average":
            if n_experts is None:
                raise ValueError("average routing needs n_experts")
            return Fraction(n_experts)
        for prefix in ("inst_random_", "task_random_"):
            if routing.startswith(prefix):
                return Fraction(int(routing[len(prefix):]))
        raise ValueError(f"unknown routing mode {routing!r}")
    D = np.asarray(routing.data if isinstance(routing, Tensor) else routing)
    D = D.reshape(-1, D.shape[-1])
    return Fraction(int((D != 0).sum()), D.shape[0])

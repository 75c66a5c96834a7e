"""Task representations: random vectors, text embeddings and adapter-Fisher embeddings."""
from __future__ import annotations

import contextlib
import csv
import zlib

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .corpus import DataError, encode_pairs
from .transformer import ConfigError, encode, model_forward

PROVENANCES = ("Random", "TextEmbAVG", "TextEmbBOS", "FTTextEmbAVG", "FTTextEmbBOS", "FisherPCA")
PCA_TOL = 1e-10


def uniform_routes(config):
    """Every expert of every layer weighted 1/m (the identity for single-expert grids)."""
    return np.full((config.n_layers, config.n_experts), 1.0 / config.n_experts)


def random_repr(d, rng_seed):
    if d < 1:
        raise ConfigError("d must be >= 1")
    return np.random.default_rng(rng_seed).normal(0.0, 0.02, size=d)


def name_seed(seed, name):
    return [int(seed), zlib.crc32(name.encode())]


# ------------------------------------------------------------ text embeddings
def _text_ids(vocab, texts, mode, max_len):
    seqs = []
    for t in texts:
        ids = vocab.encode(t)
        if mode == "BOS":
            ids = [vocab.bos_id] + ids
        if not ids:
            raise DataError("empty text cannot be embedded")
        seqs.append(ids[:max_len])
    out = np.full((len(seqs), max(map(len, seqs))), vocab.pad_id, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out


def embed_texts(texts, grid, vocab, mode="AVG", D=None):
    """Mean over texts of the encoder-state summary of each text."""
    if mode not in ("AVG", "BOS"):
        raise ConfigError(f"mode must be AVG or BOS, got {mode!r}")
    if len(texts) == 0:
        raise DataError("no examples to embed")
    D = uniform_routes(grid.config) if D is None else D
    ids = _text_ids(vocab, texts, mode, grid.config.max_seq_len)
    with ad.no_grad():
        h, _ = encode(grid, ids, D)
    h = h.data
    if mode == "BOS":
        per = h[:, 0]
    else:
        keep = (ids != vocab.pad_id)[..., None]
        per = (h * keep).sum(1) / keep.sum(1)
    return per.mean(0)


def text_emb(task, grid, vocab, mode="AVG", D=None):
    """Encoder summary of ``x + y`` for every training example, averaged."""
    if not task.train:
        raise DataError(f"task {task.name} has no training examples")
    return embed_texts([f"{x} {y}" for x, y in task.train], grid, vocab, mode, D)


def fine_tune(grid, vocab, pairs, steps, lr, batch_size, seed, D=None, params=None, adapters=None):
    """Adam on ``params`` (default: every grid parameter) over random minibatches of ``pairs``."""
    D = uniform_routes(grid.config) if D is None else D
    params = grid.parameters() if params is None else params
    if steps == 0:
        return []
    opt = Adam([{"params": params, "lr": lr}])
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        x, y = encode_pairs(vocab, [pairs[i] for i in idx])
        _, loss = model_forward(x, y, grid, D, adapters)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def ft_text_emb(task, grid, vocab, mode="AVG", steps=20, lr=1e-3, batch_size=8, seed=0, D=None):
    """text_emb after fine-tuning a clone of ``grid`` on the task's training data."""
    clone = grid.copy()
    fine_tune(clone, vocab, task.train, steps, lr, batch_size, seed, D)
    return text_emb(task, clone, vocab, mode, D)


# ------------------------------------------------------------------ adapters
class Adapter:
    """Bottleneck ``x + up(gelu(down(x)))``; zero up-projection makes it the identity."""

    def __init__(self, d, r, rng):
        self.params = {
            "down_W": Tensor(rng.normal(0.0, 0.02, size=(d, r)), requires_grad=True),
            "down_b": Tensor(np.zeros(r), requires_grad=True),
            "up_W": Tensor(np.zeros((r, d)), requires_grad=True),
            "up_b": Tensor(np.zeros(d), requires_grad=True),
        }
        self.records = None

    def __call__(self, x):
        p = self.params
        pre = ad.linear(x, p["down_W"], p["down_b"])
        act = ad.gelu(pre)
        up = ad.linear(act, p["up_W"], p["up_b"])
        if self.records is not None:
            self.records.append((x, pre, act, up))
        return ad.add(x, up)


class AdapterSet:
    """One adapter per layer, inserted after the feed-forward sublayer."""

    KEYS = ("down_W", "down_b", "up_W", "up_b")

    def __init__(self, n_layers, d, r=8, seed=0):
        if r < 1:
            raise ConfigError("adapter bottleneck must be >= 1")
        rng = np.random.default_rng(seed)
        self.r = r
        self.layers = [Adapter(d, r, rng) for _ in range(n_layers)]

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    def parameters(self):
        return [a.params[k] for a in self.layers for k in self.KEYS]

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters())

    @contextlib.contextmanager
    def recording(self):
        for a in self.layers:
            a.records = []
        try:
            yield
        finally:
            for a in self.layers:
                a.records = None


def fine_tune_adapters(grid, adapters, vocab, pairs, steps=50, lr=1e-3, batch_size=8, seed=0, D=None):
    """Train only the adapter parameters; the grid is left untouched."""
    flags = [p.requires_grad for p in grid.parameters()]
    grid.set_requires_grad(False)
    try:
        return fine_tune(grid, vocab, pairs, steps, lr, batch_size, seed, D,
                         params=adapters.parameters(), adapters=adapters)
    finally:
        for p, f in zip(grid.parameters(), flags):
            p.requires_grad = f


def _frozen_grid(grid):
    flags = [p.requires_grad for p in grid.parameters()]
    grid.set_requires_grad(False)
    return flags


def per_example_grads_naive(grid, adapters, vocab, pairs, D=None):
    """``(N, p)`` gradients of log P(y|x) w.r.t. adapter parameters, one backward per example."""
    D = uniform_routes(grid.config) if D is None else D
    flags = _frozen_grid(grid)
    params = adapters.parameters()
    rows = []
    try:
        for pair in pairs:
            x, y = encode_pairs(vocab, [pair])
            for p in params:
                p.grad = None
            _, nll = model_forward(x, y, grid, D, adapters, reduction="sum_per_row")
            ad.tsum(nll).backward()
            rows.append(np.concatenate([-(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                                        for p in params]))
    finally:
        for p, f in zip(grid.parameters(), flags):
            p.requires_grad = f
    return np.array(rows)


def per_example_grads(grid, adapters, vocab, pairs, D=None):
    """Batched per-example adapter gradients from recorded activations.

    One backward pass of the summed NLL gives, for every example, the gradient
    at each adapter's pre-activation and output; examples do not interact, so
    outer products with the recorded inputs yield per-example weight gradients.
    """
    D = uniform_routes(grid.config) if D is None else D
    flags = _frozen_grid(grid)
    x, y = encode_pairs(vocab, pairs)
    B = x.shape[0]
    try:
        with adapters.recording():
            _, nll = model_forward(x, y, grid, D, adapters, reduction="sum_per_row")
            ad.tsum(nll).backward()
            blocks = []
            for a in adapters.layers:
                g = {k: np.zeros((B,) + a.params[k].shape) for k in AdapterSet.KEYS}
                for xin, pre, act, up in a.records:
                    if xin.shape[0] != B:
                        raise ValueError("per-example Fisher needs full-batch routing")
                    gp = pre.grad if pre.grad is not None else np.zeros(pre.shape)
                    gu = up.grad if up.grad is not None else np.zeros(up.shape)
                    g["down_W"] += np.einsum("btd,btr->bdr", xin.data, gp)
                    g["down_b"] += gp.sum(1)
                    g["up_W"] += np.einsum("btr,btd->brd", act.data, gu)
                    g["up_b"] += gu.sum(1)
                blocks.extend(-g[k].reshape(B, -1) for k in AdapterSet.KEYS)
    finally:
        for p, f in zip(grid.parameters(), flags):
            p.requires_grad = f
    return np.concatenate(blocks, axis=1)


def empirical_fisher(grads):
    """Diagonal of the empirical Fisher: mean of squared per-example gradients."""
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    return (grads ** 2).mean(axis=0)


def fisher_diagonal(task, grid, vocab, r=8, steps=50, lr=1e-3, seed=0, batch_size=8, D=None,
                    batched=True, chunk=16):
    """Fresh adapters, adapter-only fine-tuning, then the Fisher diagonal on D_train."""
    if not task.train:
        raise DataError(f"task {task.name} has no labelled examples")
    adapters = AdapterSet(grid.config.n_layers, grid.config.d_model, r, seed)
    fine_tune_adapters(grid, adapters, vocab, task.train, steps, lr, batch_size, seed, D)
    fn = per_example_grads if batched else per_example_grads_naive
    grads = np.concatenate([fn(grid, adapters, vocab, task.train[s:s + chunk], D)
                            for s in range(0, len(task.train), chunk)])
    return empirical_fisher(grads)


# ------------------------------------------------------------------------ PCA
def _power_eig(M, k, tol=PCA_TOL, max_iter=20000):
    """Top-``k`` eigenpairs of a symmetric PSD matrix by power iteration with deflation."""
    M = np.array(M, dtype=np.float64, copy=True)
    n = M.shape[0]
    vals, vecs = [], []
    rng = np.random.default_rng(0)
    for _ in range(k):
        v = rng.normal(size=n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = M @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        lam = float(v @ M @ v)
        # deterministic sign: largest-magnitude entry positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vals.append(lam)
        vecs.append(v)
        M -= lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


class PowerPCA(TransformerMixin, BaseEstimator):
    """PCA whose eigenvectors come from power iteration with deflation.

    When there are more features than samples the eigenproblem is solved on the
    ``K x K`` Gram matrix and mapped back to feature space.
    """

    def __init__(self, n_components=2, tol=PCA_TOL):
        self.n_components = n_components
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        K, p = X.shape
        k = self.n_components
        if not 1 <= k < K:
            raise ValueError(f"need n_samples > n_components >= 1, got {K} and {k}")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        if p > K:
            vals, U = _power_eig(Xc @ Xc.T, min(k, p), self.tol)
            comps = []
            for lam, u in zip(vals, U):
                v = Xc.T @ u
                nv = np.linalg.norm(v)
                comps.append(v / nv if nv > 0 else np.zeros(p))
            comps = np.array(comps)
            for c in comps:
                if c[np.argmax(np.abs(c))] < 0:
                    c *= -1
        else:
            vals, comps = _power_eig(Xc.T @ Xc, min(k, p), self.tol)
        self.components_ = comps
        self.explained_variance_ = np.maximum(vals, 0.0) / max(K - 1, 1)
        self.n_features_in_ = p
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) @ self.components_.T


def pca_reduce(rows, d_out):
    rows = np.asarray(rows, dtype=np.float64)
    if not rows.shape[0] > d_out >= 1:
        raise ConfigError(f"PCA needs more rows ({rows.shape[0]}) than components ({d_out})")
    return PowerPCA(d_out).fit_transform(rows)


# ----------------------------------------------------------------- pipelines
class RepresentationPipeline:
    """Builds the representation table for meta-train tasks and embeds unseen tasks.

    ``kind`` is one of random, textavg, textbos, fttextavg, fttextbos, fisher.
    Precomputed vectors are rescaled by one global factor fit on meta-train so
    that entries have unit standard deviation.
    """

    KINDS = {"random": "Random", "textavg": "TextEmbAVG", "textbos": "TextEmbBOS",
             "fttext": "FTTextEmbAVG", "fttextavg": "FTTextEmbAVG",
             "fttextbos": "FTTextEmbBOS", "fisher": "FisherPCA"}

    def __init__(self, kind, d, base=None, vocab=None, seed=0, adapter_r=8, adapter_steps=50,
                 adapter_lr=1e-3, ft_steps=20, ft_lr=1e-3):
        if kind not in self.KINDS:
            raise ConfigError(f"unknown representation {kind!r}")
        if kind != "random" and (base is None or vocab is None):
            raise ConfigError(f"{kind} representations need a base model and vocabulary")
        self.kind, self.d, self.base, self.vocab, self.seed = kind, d, base, vocab, seed
        self.adapter_r, self.adapter_steps, self.adapter_lr = adapter_r, adapter_steps, adapter_lr
        self.ft_steps, self.ft_lr = ft_steps, ft_lr
        self.scale = 1.0
        self.pca = None

    @property
    def provenance(self):
        return self.KINDS[self.kind]

    def _raw(self, task):
        k = self.kind
        if k == "random":
            return random_repr(self.d, name_seed(self.seed, task.name))
        if k in ("textavg", "textbos"):
            return text_emb(task, self.base, self.vocab, "AVG" if k == "textavg" else "BOS")
        if k.startswith("fttext"):
            mode = "BOS" if k == "fttextbos" else "AVG"
            return ft_text_emb(task, self.base, self.vocab, mode, self.ft_steps, self.ft_lr,
                               seed=name_seed(self.seed, task.name))
        return fisher_diagonal(task, self.base, self.vocab, self.adapter_r, self.adapter_steps,
                               self.adapter_lr, seed=name_seed(self.seed, task.name))

    def _fit_dim(self, M):
        if M.shape[1] == self.d:
            return M
        if M.shape[1] > self.d:
            raise ConfigError(f"{self.kind} vectors have dim {M.shape[1]} > table dim {self.d}")
        return np.hstack([M, np.zeros((M.shape[0], self.d - M.shape[1]))])

    def fit_transform(self, tasks):
        raw = np.array([self._raw(t) for t in tasks])
        if self.kind == "random":
            return raw
        if self.kind == "fisher":
            k = min(self.d, len(tasks) - 1)
            self.pca = PowerPCA(k).fit(raw)
            raw = self.pca.transform(raw)
        std = raw.std()
        self.scale = 1.0 / std if std > 0 else 1.0
        return self._fit_dim(raw * self.scale)

    def transform_one(self, task):
        v = self._raw(task)
        if self.kind == "random":
            return v
        if self.kind == "fisher":
            if self.pca is None:
                raise ConfigError("fisher pipeline must be fit on meta-train tasks first")
            v = self.pca.transform(v[None])[0]
        return self._fit_dim((v * self.scale)[None])[0]

    def embed_text(self, text):
        """Zero-shot representation from instruction text alone (AVG mode)."""
        if self.base is None:
            raise ConfigError("text representations need a base model")
        v = embed_texts([text], self.base, self.vocab, "AVG") * self.scale
        return self._fit_dim(v[None])[0]


# ------------------------------------------------------------------------ I/O
def save_representations(path, names, provenance, matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "provenance"] + [f"v{i}" for i in range(matrix.shape[1])])
        for name, row in zip(names, matrix):
            w.writerow([name, provenance] + [repr(float(v)) for v in row])


def load_representations(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no representation rows")
    names = [r[0] for r in rows[1:]]
    prov = {r[1] for r in rows[1:]}
    if len(prov) != 1 or prov.pop() not in PROVENANCES:
        raise DataError(f"{path}: unknown or mixed provenance")
    matrix = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    if not np.isfinite(matrix).all():
        raise DataError(f"{path}: non-finite representation entries")
    return names, rows[1][1], matrix

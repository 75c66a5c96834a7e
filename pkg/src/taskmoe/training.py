"""Multi-task training of task-level MoE models, baselines and unseen-task adaptation."""
from __future__ import annotations

import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor
from .corpus import DataError, encode_pairs
from .metrics import score
from .routing import (SELECTION_FNS, RouterNetwork, Routing, TaskEmbeddingTable,
                      TemperatureSchedule, router_forward, select)
from .transformer import (ConfigError, ExpertGrid, ModelConfig, greedy_decode,
                          model_forward)

BASELINE_MODES = ("none", "vanilla", "average", "inst_random_k", "task_random_k")


class TrainingDiverged(RuntimeError):
    pass


def rng_stream(seed, name):
    """Independent generator for a named component (suite, routing, gumbel, grid, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def parse_baseline(mode):
    """``"task_random_2"`` -> ("task_random", 2); ``"average"`` -> ("average", None)."""
    if mode in ("none", "vanilla", "average"):
        return mode, None
    for kind in ("inst_random", "task_random"):
        if mode.startswith(kind + "_"):
            try:
                k = int(mode[len(kind) + 1:])
            except ValueError:
                break
            if k >= 1:
                return kind, k
    raise ConfigError(f"unknown baseline mode {mode!r}")


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 16
    base_lr: float = 1e-3
    router_lr: float = 1e-2
    task_repr_lr: float = 1e-2
    validate_every: int = 500
    selection_fn: str = "gumbel_st"
    tau0: float = 5.0
    tau_end: float = 0.1
    stage: str = "one"
    stage2_tau0: float = 100.0
    freeze_task_repr: bool = False
    freeze_router_stage2: bool = False
    baseline_mode: str = "none"
    router_variant: str = "mlp"
    clip_norm: float | None = None
    noise_variance: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("base_lr", "router_lr", "task_repr_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ConfigError("total_steps must be >= 0 and batch_size >= 1")
        if self.validate_every < 1 or (self.total_steps and self.total_steps % self.validate_every):
            raise ConfigError("validate_every must divide total_steps")
        if self.selection_fn not in SELECTION_FNS:
            raise ConfigError(f"unknown selection_fn {self.selection_fn!r}")
        if self.stage not in ("one", "two"):
            raise ConfigError(f"stage must be one or two, got {self.stage!r}")
        parse_baseline(self.baseline_mode)
        TemperatureSchedule(self.tau0, self.tau_end, self.total_steps)
        TemperatureSchedule(self.stage2_tau0, self.tau_end, self.total_steps)

    @property
    def schedule(self):
        return TemperatureSchedule(self.tau0, self.tau_end, self.total_steps)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config field(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class CheckpointRecord:
    step: int
    metric: float
    loss: float
    path: str | None = None


@dataclass
class ValidationResult:
    metric: float
    loss: float
    per_task: dict = field(default_factory=dict)


# ---------------------------------------------------------------- batching
def heterogeneous_batch(tasks, batch_size, rng):
    """Uniform draws from the pooled training sets; returns ``(task_index, x, y)`` triples."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    sizes = np.array([len(t.train) for t in tasks])
    if sizes.sum() == 0:
        raise DataError("no training examples")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.integers(0, offsets[-1], size=batch_size)
    out = []
    for p in picks:
        k = int(np.searchsorted(offsets, p, side="right") - 1)
        x, y = tasks[k].train[p - offsets[k]]
        out.append((k, x, y))
    return out


class BaselineRouter:
    """Fixed (non-learned) routing: vanilla, average, instance- or task-level random."""

    def __init__(self, mode, n, m, task_names, rng):
        self.kind, self.k = parse_baseline(mode)
        if self.kind == "none":
            raise ConfigError("baseline mode 'none' means learned routing")
        if self.kind == "vanilla" and m != 1:
            raise ConfigError("vanilla routing needs a single-expert grid")
        if self.k is not None and self.k > m:
            raise ConfigError(f"cannot activate {self.k} of {m} experts")
        self.mode, self.n, self.m, self.rng = mode, n, m, rng
        self.table = {}
        for name in task_names:
            self.add_task(name)

    def _sample(self, size):
        order = np.argsort(self.rng.random(size + (self.m,)), axis=-1)[..., :self.k]
        D = np.zeros(size + (self.m,))
        np.put_along_axis(D, order, 1.0 / self.k, axis=-1)
        return D

    def add_task(self, name):
        if self.kind == "task_random" and name not in self.table:
            self.table[name] = self._sample((self.n,))

    def routes(self, names):
        """``(B, n, m)`` decision matrices for a batch of task names."""
        B = len(names)
        if self.kind == "vanilla":
            return np.ones((B, self.n, 1))
        if self.kind == "average":
            return np.full((B, self.n, self.m), 1.0 / self.m)
        if self.kind == "inst_random":
            return self._sample((B, self.n))
        for nm in names:
            self.add_task(nm)
        return np.stack([self.table[nm] for nm in names])


def assign_baseline_routes(mode, tasks, m, n, rng):
    names = [t if isinstance(t, str) else t.name for t in tasks]
    return BaselineRouter(mode, n, m, names, rng)


# -------------------------------------------------------------------- model
class MoEModel:
    """Expert grid plus either a learned router (with task table) or a baseline router."""

    def __init__(self, grid, vocab, task_names, routing=None, baseline=None):
        if (routing is None) == (baseline is None):
            raise ConfigError("exactly one of routing and baseline is required")
        self.grid, self.vocab = grid, vocab
        self.task_names = list(task_names)
        self.routing, self.baseline = routing, baseline
        if routing is not None and routing.table.names != self.task_names:
            raise ConfigError("task table rows must match task names")

    @property
    def config(self):
        return self.grid.config

    def row(self, name):
        return self.task_names.index(name)

    def train_routes(self, names, tau, rng):
        """Decision matrices for a training batch; each example routes by its own task."""
        if self.baseline is not None:
            return Tensor(self.baseline.routes(names))
        rows = np.array([self.row(n) for n in names])
        uniq, inv = np.unique(rows, return_inverse=True)
        D = self.routing.decisions(uniq, tau, rng, mode="train")
        return ad.take_rows(D, inv)

    def eval_route(self, name, batch=1, mask=None):
        """Eval-mode routing for one task: ``(n, m)``, or ``(batch, n, m)`` for random baselines."""
        if self.baseline is not None:
            if self.baseline.kind == "inst_random":
                return self.baseline.routes([name] * batch)
            return self.baseline.routes([name])[0]
        return self.routing.eval_routes([self.row(name)], mask=mask)[0]

    def route_vector(self, vector, mask=None):
        """Eval-mode routing for an arbitrary task representation."""
        if self.routing is None:
            raise ConfigError("baseline models have no router")
        with ad.no_grad():
            L = router_forward(np.asarray(vector, dtype=np.float64), self.routing.router)
            if mask is not None:
                L = ad.add(L, mask)
            return select(L, self.routing.selection, self.routing.eval_tau, mode="eval").data.copy()

    def route_logits(self):
        with ad.no_grad():
            return self.routing.logits(np.arange(len(self.task_names))).data.copy()

    def all_eval_routes(self):
        return np.stack([self.eval_route(n) for n in self.task_names]) if self.routing is None \
            else self.routing.eval_routes()

    def state_dict(self):
        out = {f"grid.{k}": v for k, v in self.grid.state_dict().items()}
        if self.routing is not None:
            out.update({f"router.{k}": v for k, v in self.routing.router.state_dict().items()})
            out["table"] = self.routing.table.weight.data.copy()
        if self.baseline is not None and self.baseline.table:
            out["baseline_routes"] = np.stack([self.baseline.table[n] for n in self.task_names])
        return out

    def load_state_dict(self, state):
        self.grid.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("grid.")})
        if self.routing is not None:
            self.routing.router.load_state_dict(
                {k[7:]: v for k, v in state.items() if k.startswith("router.")})
            self.routing.table.weight.data = np.array(state["table"], copy=True)
        if "baseline_routes" in state:
            for n, D in zip(self.task_names, state["baseline_routes"]):
                self.baseline.table[n] = np.array(D, copy=True)

    def snapshot(self):
        return {k: np.array(v, copy=True) for k, v in self.state_dict().items()}


def build_vanilla(base, vocab, task_names):
    return MoEModel(base.copy(), vocab, task_names,
                    baseline=BaselineRouter("vanilla", base.config.n_layers, 1, task_names, None))


def build_baseline(base, vocab, task_names, mode, n_experts, seed):
    if mode == "vanilla":
        return build_vanilla(base, vocab, task_names)
    grid = ExpertGrid.from_base(base, n_experts, base.config.noise_variance,
                                rng_stream(seed, "grid").integers(2 ** 32))
    router = BaselineRouter(mode, grid.config.n_layers, n_experts, task_names,
                            rng_stream(seed, "routing"))
    return MoEModel(grid, vocab, task_names, baseline=router)


def build_moe(base, vocab, task_names, table, config, n_experts=3, seed=0):
    """MoE grid replicated from ``base`` with a fresh router over ``table``."""
    grid = ExpertGrid.from_base(base, n_experts, config.noise_variance,
                                rng_stream(seed, "grid").integers(2 ** 32))
    router = RouterNetwork(config.router_variant, table.dim, grid.config.n_layers, n_experts,
                           rng_stream(seed, "routing"))
    routing = Routing(table, router, config.selection_fn, config.schedule)
    return MoEModel(grid, vocab, task_names, routing=routing)


# --------------------------------------------------------------- evaluation
def _decode_len(vocab, pairs, cap):
    return min(cap, max(len(vocab.encode(y)) for _, y in pairs) + 2)


def evaluate_task(model, task, split="dev", D=None):
    """(metric, teacher-forced loss, predictions) on one split, no parameter updates."""
    pairs = getattr(task, split)
    if not pairs:
        raise DataError(f"task {task.name} has an empty {split} split")
    x, y = encode_pairs(model.vocab, pairs, model.config.max_seq_len)
    D = model.eval_route(task.name, len(pairs)) if D is None else D
    with ad.no_grad():
        _, loss = model_forward(x, y, model.grid, D)
    out = greedy_decode(x, model.grid, D, _decode_len(model.vocab, pairs, model.config.max_seq_len))
    preds = [model.vocab.decode(o) for o in out]
    return score(preds, [r for _, r in pairs], task.metric), loss.item(), preds


def validate(model, tasks, split="dev"):
    """Unweighted mean metric and loss over tasks."""
    per = {}
    for t in tasks:
        m, l, _ = evaluate_task(model, t, split)
        per[t.name] = {"metric": m, "loss": l}
    return ValidationResult(float(np.mean([v["metric"] for v in per.values()])),
                            float(np.mean([v["loss"] for v in per.values()])), per)


def select_checkpoint(records):
    """Index of the best record by metric; the earliest step wins ties."""
    if not records:
        raise ValueError("no checkpoint records")
    best = 0
    for i, r in enumerate(records):
        if r.metric > records[best].metric:
            best = i
    return best


# ----------------------------------------------------------------- training
@dataclass
class TrainResult:
    records: list
    best_step: int | None
    train_losses: list
    log: list


def _param_groups(model, config, train_router=True):
    groups = [{"params": model.grid.parameters(), "lr": config.base_lr}]
    if model.routing is not None:
        if train_router:
            groups.append({"params": model.routing.parameters(), "lr": config.router_lr})
        table = model.routing.table
        if not config.freeze_task_repr and not table.frozen.all():
            groups.append({"params": [table.weight], "lr": config.task_repr_lr,
                           "row_mask": {id(table.weight): table.frozen.copy()}})
    return groups


def _train_loop(model, tasks, config, schedule, seed_tag, train_router=True, log_path=None,
                route_log=None):
    by_name = {t.name: t for t in tasks}
    if set(by_name) != set(model.task_names):
        raise ConfigError("training tasks must match the model's task names")
    tasks = [by_name[n] for n in model.task_names]
    S = config.total_steps
    if S == 0:
        return TrainResult([], None, [], [])
    opt = Adam(_param_groups(model, config, train_router), clip_norm=config.clip_norm)
    rng_batch = rng_stream(config.seed, f"batch.{seed_tag}")
    rng_gumbel = rng_stream(config.seed, f"gumbel.{seed_tag}")
    vocab, cap = model.vocab, model.config.max_seq_len
    records, losses, log = [], [], []
    best, best_state = None, None
    for step in range(1, S + 1):
        tau = schedule(step - 1)
        batch = heterogeneous_batch(tasks, config.batch_size, rng_batch)
        x, y = encode_pairs(vocab, [(bx, by) for _, bx, by in batch], cap)
        try:
            D = model.train_routes([model.task_names[k] for k, _, _ in batch], tau, rng_gumbel)
            _, loss = model_forward(x, y, model.grid, D)
        except NonFiniteError as e:
            raise TrainingDiverged(f"non-finite value at step {step}: {e}") from e
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % config.validate_every == 0:
            res = validate(model, tasks)
            rec = CheckpointRecord(step, res.metric, res.loss)
            records.append(rec)
            entry = {"stage": seed_tag, "step": step, "tau": tau, "mean_dev_metric": res.metric,
                     "mean_dev_loss": res.loss,
                     "train_loss": float(np.mean(losses[-config.validate_every:])),
                     "per_task": {k: v["metric"] for k, v in res.per_task.items()}}
            log.append(entry)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if route_log is not None and model.routing is not None:
                route_log.append(step, tau, model.routing.eval_routes(), seed_tag)
            if best is None or rec.metric > records[best].metric:
                best, best_state = len(records) - 1, model.snapshot()
    model.load_state_dict(best_state)
    return TrainResult(records, records[best].step, losses, log)


def train_one_stage(model, tasks, config, log_path=None, route_log=None):
    """Joint training of experts, router and unfrozen task rows; best-dev checkpoint restored."""
    if model.routing is not None:
        model.routing.schedule = config.schedule
        model.routing.eval_tau = config.tau_end
    return _train_loop(model, tasks, config, config.schedule, "stage1",
                       log_path=log_path, route_log=route_log)


def train_two_stage(model, tasks, config, base, log_path=None, route_log=None):
    """Stage 1 learns routes; stage 2 re-initialises experts from ``base`` and retrains
    them under softmax routing whose temperature anneals from near-uniform to near-discrete."""
    if model.routing is None:
        raise ConfigError("two-stage training needs a learned router")
    first = train_one_stage(model, tasks, config, log_path, route_log)
    reinit_experts(model, base, config)
    sched = TemperatureSchedule(config.stage2_tau0, config.tau_end, config.total_steps)
    model.routing.selection = "softmax"
    model.routing.schedule = sched
    model.routing.eval_tau = config.tau_end
    second = _train_loop(model, tasks, config, sched, "stage2",
                         train_router=not config.freeze_router_stage2,
                         log_path=log_path, route_log=route_log)
    return first, second


def reinit_experts(model, base, config):
    fresh = ExpertGrid.from_base(base, model.config.n_experts, config.noise_variance,
                                 rng_stream(config.seed, "grid.stage2").integers(2 ** 32))
    model.grid = fresh
    return fresh


def pretrain_base(vocab, tasks, model_config, steps=300, batch_size=16, lr=1e-3, seed=0,
                  mask_prob=0.15):
    """Single-expert model trained to reconstruct task inputs from corrupted copies.

    Only inputs are used (no labels); tokens are replaced by ``<unk>`` with
    probability ``mask_prob``.
    """
    cfg = ModelConfig(**{**model_config.to_dict(), "n_experts": 1})
    grid = ExpertGrid.random(cfg, rng_stream(seed, "init"))
    texts = sorted({x for t in tasks for x, _ in t.train})
    if not texts:
        raise DataError("no inputs to pretrain on")
    rng = rng_stream(seed, "pretrain")
    opt = Adam([{"params": grid.parameters(), "lr": lr}])
    D = np.ones((cfg.n_layers, 1))
    losses = []
    for _ in range(steps):
        picks = rng.integers(0, len(texts), size=batch_size)
        src, tgt = [], []
        for p in picks:
            ids = vocab.encode(texts[p])
            noisy = [vocab.unk_id if rng.random() < mask_prob else i for i in ids]
            src.append(noisy + [vocab.eos_id])
            tgt.append(ids + [vocab.eos_id])
        L = max(map(len, src))
        x = np.full((batch_size, L), vocab.pad_id, dtype=np.int64)
        y = np.full((batch_size, L), vocab.pad_id, dtype=np.int64)
        for r in range(batch_size):
            x[r, :len(src[r])] = src[r]
            y[r, :len(tgt[r])] = tgt[r]
        _, loss = model_forward(x, y, grid, D)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return grid, losses


# --------------------------------------------------------------- adaptation
@dataclass
class AdaptResult:
    task: str
    test_metric: float
    best_cell: dict
    cells: list


def _finetune_cell(args):
    grid, vocab, D, task, lr, bs, steps, every, seed = args
    grid = grid.copy()
    active = np.asarray(D) != 0
    if active.ndim == 3:
        active = active.any(0)
    params = list(grid.shared.values()) + grid.expert_parameters(active)
    model = _Probe(grid, vocab, D)
    opt = Adam([{"params": params, "lr": lr}])
    rng = np.random.default_rng(seed)
    cap = grid.config.max_seq_len
    best = (-1.0, 0, grid.state_dict())
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(task.train), size=min(bs, len(task.train)))
        x, y = encode_pairs(vocab, [task.train[i] for i in idx], cap)
        _, loss = model_forward(x, y, grid, D)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % every == 0 or step == steps:
            m = evaluate_task(model, task, "dev", D)[0]
            if m > best[0]:
                best = (m, step, grid.state_dict())
    if steps == 0:
        best = (evaluate_task(model, task, "dev", D)[0], 0, best[2])
    grid.load_state_dict(best[2])
    test = evaluate_task(model, task, "test", D)[0]
    return {"lr": lr, "batch_size": bs, "seed": seed, "best_dev": best[0],
            "best_step": best[1], "test": test}


class _Probe:
    """Minimal stand-in for MoEModel when evaluating a grid under fixed routes."""

    def __init__(self, grid, vocab, D):
        self.grid, self.vocab, self._D = grid, vocab, D

    @property
    def config(self):
        return self.grid.config

    def eval_route(self, name, batch=1):
        return self._D


def grid_search_finetune(grid, vocab, D, task, lrs=(1e-5, 2e-5, 5e-5), batch_sizes=(2, 4, 8),
                         steps=200, validate_every=20, seed=0, jobs=1):
    """Fine-tune the routed experts and shared parameters for every (lr, batch size) cell.

    Cell ``c`` uses seed ``seed ^ c``. The best cell is chosen on dev; its test
    metric is reported.
    """
    if not task.train:
        raise DataError(f"task {task.name} has no training data; use eval_zero_shot")
    cells = [(grid, vocab, D, task, lr, bs, steps, validate_every, seed ^ c)
             for c, (lr, bs) in enumerate((lr, bs) for lr in lrs for bs in batch_sizes)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_finetune_cell, cells))
    else:
        results = [_finetune_cell(c) for c in cells]
    best = select_checkpoint([CheckpointRecord(i, r["best_dev"], 0.0) for i, r in enumerate(results)])
    return AdaptResult(task.name, results[best]["test"], results[best], results)


def adapt_few_shot(model, task, pipeline, **grid_kw):
    """Represent the unseen task, route it through the learned router, then grid-search fine-tune."""
    vector = pipeline.transform_one(task)
    D = model.route_vector(vector)
    return grid_search_finetune(model.grid, model.vocab, D, task, **grid_kw)


def direct_finetune(base, vocab, task, **grid_kw):
    """Baseline: grid-search fine-tuning of the single-expert pretrained model."""
    return grid_search_finetune(base, vocab, np.ones((base.config.n_layers, 1)), task, **grid_kw)


def eval_zero_shot(model, task, pipeline, split="test"):
    """Route by the AVG text embedding of the task's instruction only; no updates."""
    if not task.template.strip():
        raise ConfigError(f"task {task.name} has no template text for zero-shot routing")
    D = model.route_vector(pipeline.embed_text(task.template))
    metric = evaluate_task(model, task, split, D)[0]
    return metric, D

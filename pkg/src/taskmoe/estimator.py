"""Estimator-style front end: ``TaskMoE().fit(tasks).predict([(task, text), ...])``."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from .analysis import RouteLog
from .checkpoint import grid_from_tensors, load_checkpoint, save_checkpoint
from .corpus import DataError, TaskDataset, Vocab, encode_pairs, few_shot_subsample
from .representation import PowerPCA, RepresentationPipeline, name_seed
from .routing import TaskEmbeddingTable
from .training import (TrainConfig, build_baseline, build_moe, evaluate_task, pretrain_base,
                       train_one_stage, train_two_stage)
from .transformer import ConfigError, ModelConfig, greedy_decode


def check_tasks(tasks, require_train=True):
    """Validate a task collection: TaskDatasets with unique names (and training data)."""
    tasks = list(tasks)
    if not tasks:
        raise DataError("expected at least one task")
    for t in tasks:
        if not isinstance(t, TaskDataset):
            raise TypeError(f"expected TaskDataset, got {type(t).__name__}")
        if require_train and not t.train:
            raise DataError(f"task {t.name} has no training examples")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise DataError("task names must be unique")
    return tasks


class TaskMoE(BaseEstimator):
    """Multi-task encoder-decoder whose layers are mixtures of experts routed per task.

    ``baseline`` selects a non-learned routing (vanilla, average,
    inst_random_k, task_random_k); ``None`` trains the router.  ``task_repr_lr``
    defaults to 1e-2 for random representations and 1e-3 for precomputed ones.
    """

    def __init__(self, n_experts=3, n_layers=4, d_model=64, n_heads=4, d_ff=128,
                 representation="random", router="mlp", selection="gumbel_st", stage="one",
                 baseline=None, total_steps=2000, batch_size=16, base_lr=1e-3, router_lr=1e-2,
                 task_repr_lr=None, validate_every=500, tau0=5.0, tau_end=0.1,
                 stage2_tau0=100.0, freeze_repr=False, freeze_router_stage2=False,
                 pretrain_steps=300, few_shot=True, random_state=0):
        self.n_experts = n_experts
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.representation = representation
        self.router = router
        self.selection = selection
        self.stage = stage
        self.baseline = baseline
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.router_lr = router_lr
        self.task_repr_lr = task_repr_lr
        self.validate_every = validate_every
        self.tau0 = tau0
        self.tau_end = tau_end
        self.stage2_tau0 = stage2_tau0
        self.freeze_repr = freeze_repr
        self.freeze_router_stage2 = freeze_router_stage2
        self.pretrain_steps = pretrain_steps
        self.few_shot = few_shot
        self.random_state = random_state

    # --------------------------------------------------------------- config
    def train_config(self):
        repr_lr = self.task_repr_lr
        if repr_lr is None:
            repr_lr = 1e-2 if self.representation == "random" else 1e-3
        return TrainConfig(
            total_steps=self.total_steps, batch_size=self.batch_size, base_lr=self.base_lr,
            router_lr=self.router_lr, task_repr_lr=repr_lr,
            validate_every=self.validate_every, selection_fn=self.selection, tau0=self.tau0,
            tau_end=self.tau_end, stage=self.stage, stage2_tau0=self.stage2_tau0,
            freeze_task_repr=self.freeze_repr, freeze_router_stage2=self.freeze_router_stage2,
            baseline_mode=self.baseline or "none", router_variant=self.router,
            seed=self.random_state)

    def model_config(self, vocab_size):
        return ModelConfig(n_layers=self.n_layers, n_experts=self.n_experts,
                           d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
                           vocab_size=vocab_size)

    # ------------------------------------------------------------------ fit
    def fit(self, tasks, y=None, vocab=None, log_path=None):
        """Pretrain a base model, build task representations and train on ``tasks``."""
        tasks = check_tasks(tasks)
        tc = self.train_config()
        if self.stage == "two" and self.baseline is not None:
            raise ConfigError("two-stage training needs a learned router")
        seed = self.random_state
        if self.few_shot:
            tasks = [few_shot_subsample(t, name_seed(seed, t.name)) for t in tasks]
        self.vocab_ = vocab or Vocab.from_tasks(tasks)
        mc = self.model_config(len(self.vocab_))
        names = [t.name for t in tasks]
        with threadpool_limits(limits=1):
            self.base_, self.pretrain_losses_ = pretrain_base(
                self.vocab_, tasks, mc, steps=self.pretrain_steps, seed=seed)
            self.route_log_ = RouteLog(names)
            if self.baseline is not None:
                self.pipeline_ = None
                self.model_ = build_baseline(self.base_, self.vocab_, names, self.baseline,
                                             self.n_experts, seed)
                self.history_ = [train_one_stage(self.model_, tasks, tc, log_path)]
            else:
                self.pipeline_ = RepresentationPipeline(self.representation, self.d_model,
                                                        self.base_, self.vocab_, seed)
                T = self.pipeline_.fit_transform(tasks)
                table = TaskEmbeddingTable(T, np.full(len(names), bool(self.freeze_repr)), names)
                self.model_ = build_moe(self.base_, self.vocab_, names, table, tc,
                                        self.n_experts, seed)
                if self.stage == "two":
                    self.history_ = list(train_two_stage(self.model_, tasks, tc, self.base_,
                                                         log_path, self.route_log_))
                else:
                    self.history_ = [train_one_stage(self.model_, tasks, tc, log_path,
                                                     self.route_log_)]
        self.tasks_ = tasks
        return self

    # -------------------------------------------------------------- predict
    def _task(self, name):
        for t in self.tasks_:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}; adapt unseen tasks first")

    def predict(self, X):
        """Greedy outputs for ``(task_name, input_text)`` pairs."""
        check_is_fitted(self, "model_")
        X = list(X)
        out = [None] * len(X)
        by_task = {}
        for i, (name, text) in enumerate(X):
            self._task(name)
            by_task.setdefault(name, []).append((i, text))
        m = self.model_
        for name, items in by_task.items():
            x, _ = encode_pairs(m.vocab, [(text, "") for _, text in items], m.config.max_seq_len)
            D = m.eval_route(name, len(items))
            decoded = greedy_decode(x, m.grid, D, m.config.max_seq_len)
            for (i, _), ids in zip(items, decoded):
                out[i] = m.vocab.decode(ids)
        return out

    def score(self, tasks, y=None, split="test"):
        """Unweighted mean metric over tasks the model was trained on."""
        check_is_fitted(self, "model_")
        tasks = check_tasks(tasks, require_train=False)
        for t in tasks:
            self._task(t.name)
        vals = [evaluate_task(self.model_, t, split)[0] for t in tasks]
        return float(np.mean(vals))

    def routes(self):
        check_is_fitted(self, "model_")
        return self.model_.all_eval_routes()

    # ------------------------------------------------------------ persistence
    def save(self, path, extra_tasks=(), rng=None):
        check_is_fitted(self, "model_")
        tensors = {f"base.{k}": v for k, v in self.base_.state_dict().items()}
        pipe = None
        if self.pipeline_ is not None:
            p = self.pipeline_
            pipe = {"kind": p.kind, "scale": p.scale, "seed": p.seed}
            if p.pca is not None:
                tensors["pca.mean"] = p.pca.mean_
                tensors["pca.components"] = p.pca.components_
        extra = {"estimator": self.get_params(), "pipeline": pipe,
                 "base_model": self.base_.config.to_dict(),
                 "route_log": self.route_log_.to_dict(),
                 "history": [[r.__dict__ for r in h.records] for h in self.history_],
                 "train_task_names": [t.name for t in self.tasks_]}
        return save_checkpoint(path, self.model_, extra, tensors,
                               list(self.tasks_) + list(extra_tasks), rng)

    @classmethod
    def load(cls, path):
        ck = load_checkpoint(path)
        est = cls(**ck.config["estimator"])
        est.model_ = ck.model
        est.vocab_ = ck.model.vocab
        est.base_ = grid_from_tensors(ck.tensors, "base.", ck.config["base_model"])
        train_names = set(ck.config["train_task_names"])
        est.tasks_ = [t for t in ck.tasks if t.name in train_names]
        est.extra_tasks_ = [t for t in ck.tasks if t.name not in train_names]
        est.route_log_ = RouteLog.from_dict(ck.config["route_log"])
        est.history_records_ = ck.config["history"]
        est.rng_state_ = ck.rng
        pipe = ck.config.get("pipeline")
        est.pipeline_ = None
        if pipe is not None:
            p = RepresentationPipeline(pipe["kind"], est.d_model, est.base_, est.vocab_, pipe["seed"])
            p.scale = pipe["scale"]
            if "pca.mean" in ck.tensors:
                pca = PowerPCA(ck.tensors["pca.components"].shape[0])
                pca.mean_ = ck.tensors["pca.mean"]
                pca.components_ = ck.tensors["pca.components"]
                pca.n_features_in_ = pca.mean_.shape[0]
                p.pca = pca
            est.pipeline_ = p
        est.checkpoint_ = ck
        return est


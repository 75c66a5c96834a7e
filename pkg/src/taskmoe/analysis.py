"""Route analysis: feature correlations, expert disabling and routing dynamics."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .metrics import arg, score  # noqa: F401  (public re-exports)
from .routing import disabled_mask
from .training import evaluate_task

N_PERMUTATIONS = 10_000
P_THRESHOLD = 0.01


class UndefinedCorrelation(ValueError):
    """A variable has zero variance, so Pearson r is undefined."""


def _zscore_rows(X):
    Xc = X - X.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(Xc, axis=-1, keepdims=True)
    return Xc, norm


def pearson_r(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two vectors of equal length")
    if len(x) < 3:
        raise ValueError("pearson needs at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = xc @ xc, yc @ yc
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("zero variance")
    r = xc @ yc / np.sqrt(sxx * syy)
    # Cauchy-Schwarz equality up to rounding: report exact +-1
    if abs(r) > 1.0 - 8 * np.finfo(float).eps:
        r = np.sign(r)
    return float(r)


def permutations(n, n_perm=N_PERMUTATIONS, seed=0):
    rng = np.random.default_rng(seed)
    return rng.permuted(np.tile(np.arange(n), (n_perm, 1)), axis=1)


def _perm_p(r_obs, r_perm):
    """Two-sided permutation p: (#{|r*| >= |r|} + 1) / (N + 1)."""
    hits = (np.abs(r_perm) >= np.abs(r_obs) - 1e-12).sum(axis=0)
    return (hits + 1) / (r_perm.shape[0] + 1)


def pearson(x, y, n_perm=N_PERMUTATIONS, seed=0):
    """Sample Pearson r and a two-sided permutation-test p-value."""
    r = pearson_r(x, y)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    xz, yz = xc / np.linalg.norm(xc), yc / np.linalg.norm(yc)
    r_perm = yz[permutations(len(x), n_perm, seed)] @ xz
    return r, float(_perm_p(r, r_perm[:, None])[0])


def expert_labels(n, m):
    return [f"L{i}E{j}" for i in range(n) for j in range(m)]


@dataclass
class CorrelationReport:
    r: np.ndarray          # (n*m, t); NaN where undefined
    p: np.ndarray          # (n*m, t)
    experts: list
    features: list
    tasks: list

    @property
    def undefined(self):
        return np.isnan(self.r)

    def masked(self, threshold=P_THRESHOLD):
        """r with entries whose p >= threshold set to NaN (for visual export)."""
        out = self.r.copy()
        out[~(self.p < threshold)] = np.nan
        return out

    def column(self, feature):
        return self.r[:, self.features.index(feature)]

    def to_files(self, prefix, threshold=P_THRESHOLD):
        for name, M in (("r", self.r), ("p", self.p), ("r_masked", self.masked(threshold))):
            write_matrix_csv(f"{prefix}_{name}.csv", M, self.experts, self.features)
        with open(f"{prefix}.json", "w") as fh:
            json.dump({"experts": self.experts, "features": self.features, "tasks": self.tasks,
                       "p_threshold": threshold,
                       "undefined_features": [f for k, f in enumerate(self.features)
                                              if self.undefined[:, k].all()]}, fh, indent=2)


def write_matrix_csv(path, M, row_labels, col_labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(col_labels))
        for lab, row in zip(row_labels, M):
            w.writerow([lab] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    M = np.array([[np.nan if v == "" else float(v) for v in r[1:]] for r in rows[1:]])
    return M.reshape(len(labels), len(cols)), labels, cols


def correlate_routes(routes, features, n_perm=N_PERMUTATIONS, seed=0):
    """Pearson r and permutation p for every (expert, feature) pair.

    ``routes`` is ``(K, n, m)`` per-task decision matrices, ordered like
    ``features.tasks``; ``features`` is a FeatureTable with matrix ``(t, K)``.
    Tasks are put in name order first and one permutation set is shared by all
    pairs, so results do not depend on the order of tasks or features.
    """
    routes = np.asarray(routes, dtype=np.float64)
    K, n, m = routes.shape
    F = np.asarray(features.matrix, dtype=np.float64)
    if F.shape[1] != K or len(features.tasks) != K:
        raise ValueError(f"feature table covers {F.shape[1]} tasks, routes cover {K}")
    order = np.argsort(features.tasks, kind="stable")
    X = routes.reshape(K, n * m).T[:, order]
    F = F[:, order]
    Xc, xn = _zscore_rows(X)
    Fc, fn = _zscore_rows(F)
    xdef, fdef = xn[:, 0] > 1e-12, fn[:, 0] > 1e-12
    Xz = np.where(xdef[:, None], Xc / np.where(xn > 0, xn, 1.0), 0.0)
    Fz = np.where(fdef[:, None], Fc / np.where(fn > 0, fn, 1.0), 0.0)
    r = np.clip(Xz @ Fz.T, -1.0, 1.0)
    p = np.ones_like(r)
    perms = permutations(K, n_perm, seed)
    for f in np.flatnonzero(fdef):
        r_perm = Fz[f][perms] @ Xz.T               # (n_perm, n*m)
        p[:, f] = _perm_p(r[:, f], r_perm)
    undefined = ~(xdef[:, None] & fdef[None, :])
    r[undefined] = np.nan
    p[undefined] = np.nan
    return CorrelationReport(r, p, expert_labels(n, m), list(features.names),
                             [features.tasks[i] for i in order])


# ---------------------------------------------------------------- disabling
DISABLE_MODES = ("top", "least", "random")


@dataclass
class DisablePlan:
    feature: str
    mode: str
    k: int
    experts: list   # (layer, expert) pairs in disabling order

    def __post_init__(self):
        if self.mode not in DISABLE_MODES:
            raise ValueError(f"mode must be one of {DISABLE_MODES}")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if len(self.experts) < self.k:
            raise ValueError(f"plan lists {len(self.experts)} experts, K={self.k}")


def plan_disable(report, feature, mode, k, n, m, seed=0):
    """Rank experts by signed r with ``feature`` (top: descending, least: ascending, random:
    seeded shuffle) and keep the first ``k`` that leave every layer with an active expert."""
    if mode not in DISABLE_MODES:
        raise ValueError(f"mode must be one of {DISABLE_MODES}")
    if k < 1:
        raise ValueError("K must be >= 1")
    col = report.column(feature)
    cand = [q for q in range(n * m) if not np.isnan(col[q])]
    if mode == "top":
        cand.sort(key=lambda q: (-col[q], q))
    elif mode == "least":
        cand.sort(key=lambda q: (col[q], q))
    else:
        cand = list(np.random.default_rng(seed).permutation(n * m))
    chosen, per_layer = [], np.zeros(n, dtype=int)
    for q in cand:
        i, j = divmod(int(q), m)
        if per_layer[i] + 1 >= m:
            continue
        chosen.append((i, j))
        per_layer[i] += 1
        if len(chosen) == k:
            break
    return DisablePlan(feature, mode, k, chosen)


def run_disable_experiment(model, tasks, plan, split="test"):
    """Mean metric over ``tasks`` after disabling the first K experts of the plan, K = 0..k.

    Evaluation only: routes are recomputed with the disabled logits set to -inf.
    """
    n, m = model.config.n_layers, model.config.n_experts
    out = []
    for K in range(plan.k + 1):
        mask = disabled_mask(n, m, plan.experts[:K])
        scores = {}
        for t in tasks:
            D = model.routing.eval_routes([model.row(t.name)], mask=mask)[0]
            scores[t.name] = evaluate_task(model, t, split, D)[0]
        out.append({"k": K, "disabled": [f"L{i}E{j}" for i, j in plan.experts[:K]],
                    "mean_metric": float(np.mean(list(scores.values()))), "per_task": scores})
    return out


def write_disable_csv(path, plan, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mode", "k", "disabled", "mean_metric"])
        for row in results:
            w.writerow([plan.feature, plan.mode, row["k"], " ".join(row["disabled"]),
                        repr(row["mean_metric"])])


# ----------------------------------------------------------------- dynamics
class NoSnapshotsError(RuntimeError):
    pass


class RouteLog:
    """Per-step snapshots of every task's decision matrix."""

    def __init__(self, task_names):
        self.task_names = list(task_names)
        self.snapshots = []

    def append(self, step, tau, routes, stage=""):
        routes = np.asarray(routes, dtype=np.float64)
        if routes.shape[0] != len(self.task_names):
            raise ValueError("snapshot must cover every task")
        self.snapshots.append({"step": int(step), "tau": float(tau), "stage": stage,
                               "routes": routes.reshape(len(self.task_names), -1).copy(),
                               "shape": routes.shape[1:]})

    def __len__(self):
        return len(self.snapshots)

    def matrix(self, step, stage=None):
        for s in self.snapshots:
            if s["step"] == step and stage in (None, s["stage"]):
                return s["routes"]
        raise KeyError(step)

    def write(self, directory):
        if not self.snapshots:
            raise NoSnapshotsError("no route snapshots were logged")
        os.makedirs(directory, exist_ok=True)
        paths = []
        for s in self.snapshots:
            n, m = s["shape"]
            tag = f"{s['stage']}_" if s["stage"] else ""
            path = os.path.join(directory, f"routes_{tag}step{s['step']:06d}.csv")
            write_matrix_csv(path, s["routes"], self.task_names, expert_labels(n, m))
            paths.append(path)
        return paths

    def to_dict(self):
        return {"task_names": self.task_names,
                "snapshots": [{"step": s["step"], "tau": s["tau"], "stage": s["stage"],
                               "shape": list(s["shape"]),
                               "routes": s["routes"].tolist()} for s in self.snapshots]}

    @classmethod
    def from_dict(cls, d):
        log = cls(d["task_names"])
        for s in d["snapshots"]:
            log.append(s["step"], s["tau"], np.array(s["routes"]).reshape([-1] + s["shape"]),
                       s.get("stage", ""))
        return log


def log_dynamics(route_log, step, routes, tau=float("nan"), stage=""):
    route_log.append(step, tau, routes, stage)
    return route_log


def category_similarity(routes, categories):
    """Mean pairwise cosine similarity of flattened routes within and across categories."""
    R = np.asarray(routes, dtype=np.float64).reshape(len(categories), -1)
    Rn = R / np.linalg.norm(R, axis=1, keepdims=True)
    S = Rn @ Rn.T
    iu = np.triu_indices(len(categories), k=1)
    cats = np.asarray(categories)
    same = cats[iu[0]] == cats[iu[1]]
    if not same.any() or same.all():
        raise ValueError("need pairs both within and across categories")
    return float(S[iu][same].mean()), float(S[iu][~same].mean())

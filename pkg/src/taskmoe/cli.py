"""``taskmoe`` command line: train, adapt, evaluate, analyze, report.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import (NoSnapshotsError, correlate_routes, category_similarity, plan_disable,
                       run_disable_experiment, write_disable_csv)
from .corpus import (DEFAULT_SUITE, ManifestError, Vocab, build_feature_table, few_shot_subsample,
                     generate_suite, ingest_jsonl, partition)
from .estimator import TaskMoE
from .metrics import arg
from .representation import name_seed, save_representations
from .routing import export_routes
from .training import (adapt_few_shot, direct_finetune, eval_zero_shot, evaluate_task,
                       grid_search_finetune, rng_stream)
from .transformer import ConfigError

BASELINES = {"vanilla": "vanilla", "inst1": "inst_random_1", "inst2": "inst_random_2",
             "task1": "task_random_1", "task2": "task_random_2", "average": "average"}
REPRS = {"random": "random", "textavg": "textavg", "textbos": "textbos", "fttext": "fttext",
         "fisher": "fisher"}
CONFIG_KEYS = {"seed", "suite", "jsonl", "n_test", "estimator", "adapt"}
ADAPT_DEFAULTS = {"lrs": [1e-5, 2e-5, 5e-5], "batch_sizes": [2, 4, 8], "steps": 200,
                  "validate_every": 20}


# ------------------------------------------------------------------ helpers
def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path):
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config field(s): {', '.join(unknown)}")
    return cfg


def write_manifest(args, inputs):
    os.makedirs(args.out, exist_ok=True)
    manifest = {"command": args.command, "config_path": getattr(args, "config", None),
                "seed": getattr(args, "seed", None), "output_dir": args.out,
                "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
                "inputs": {p: sha256(p) for p in inputs if p and os.path.isfile(p)}}
    path = os.path.join(args.out, f"manifest_{args.command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def build_tasks(cfg, seed):
    if "jsonl" in cfg:
        tasks = []
        for item in cfg["jsonl"]:
            if "path" not in item or "manifest" not in item:
                raise ConfigError("each jsonl entry needs 'path' and 'manifest'")
            tasks.append(ingest_jsonl(item["path"], item["manifest"]))
    else:
        spec = {**DEFAULT_SUITE, **cfg.get("suite", {})}
        tasks = generate_suite(spec, int(rng_stream(seed, "suite").integers(2 ** 31)))
    n_test = cfg.get("n_test", DEFAULT_SUITE["n_test"])
    part = partition(tasks, n_test, int(rng_stream(seed, "suite.partition").integers(2 ** 31)))
    by = {t.name: t for t in tasks}
    return tasks, [by[n] for n in part.meta_train], [by[n] for n in part.meta_test]


def estimator_from(cfg, args):
    params = dict(cfg.get("estimator", {}))
    if args.seed is not None:
        params["random_state"] = args.seed
    if getattr(args, "baseline", None):
        params["baseline"] = BASELINES[args.baseline]
    if getattr(args, "stage", None):
        params["stage"] = args.stage
    if getattr(args, "repr", None):
        params["representation"] = REPRS[args.repr]
    if getattr(args, "freeze_repr", False):
        params["freeze_repr"] = True
    if getattr(args, "steps", None) is not None:
        params["total_steps"] = args.steps
    if getattr(args, "validate_every", None) is not None:
        params["validate_every"] = args.validate_every
    try:
        est = TaskMoE(**params)
    except TypeError as e:
        raise ConfigError(f"invalid estimator field: {e}") from e
    est.train_config()   # validates
    return est


# ----------------------------------------------------------------- commands
def cmd_train(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    args.seed = seed
    est = estimator_from(cfg, args)
    tasks, train, test = build_tasks(cfg, seed)
    vocab = Vocab.from_tasks(tasks)
    write_manifest(args, [args.config])
    if args.dry_run:
        print(json.dumps({"tasks": len(tasks), "meta_train": [t.name for t in train],
                          "meta_test": [t.name for t in test], "vocab": len(vocab),
                          "train_config": est.train_config().to_dict()}, indent=2))
        return 0
    log_path = os.path.join(args.out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    est.fit(train, vocab=vocab, log_path=log_path)
    model = est.model_
    ck = os.path.join(args.out, "model.ckpt")
    est.save(ck, extra_tasks=test, rng={"seed": seed})
    D = model.all_eval_routes()
    if model.routing is not None:
        L = model.route_logits()
        export_routes(os.path.join(args.out, "routes.csv"), model.task_names, D, L,
                      est.total_steps, model.routing.eval_tau, model.routing.selection)
        save_representations(os.path.join(args.out, "representations.csv"), model.task_names,
                             est.pipeline_.provenance, model.routing.table.weight.data)
    else:
        export_routes(os.path.join(args.out, "routes.csv"), model.task_names, D,
                      np.zeros_like(D), est.total_steps, None, est.baseline)
    print(f"trained {len(train)} tasks; checkpoint {ck}")
    return 0


def _load(args):
    if not os.path.isfile(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    return TaskMoE.load(args.checkpoint)


def _pick_tasks(est, ref):
    pool = {t.name: t for t in est.extra_tasks_}
    if ref in (None, "all"):
        return list(est.extra_tasks_)
    if ref not in pool:
        raise ConfigError(f"unknown meta-test task {ref!r}; choose from {sorted(pool)}")
    return [pool[ref]]


def cmd_adapt(args):
    est = _load(args)
    cfg = load_config(args.config)
    acfg = {**ADAPT_DEFAULTS, **cfg.get("adapt", {})}
    for k in ("lrs", "batch_sizes", "steps", "validate_every"):
        if getattr(args, k) is not None:
            acfg[k] = getattr(args, k)
    write_manifest(args, [args.checkpoint, args.config])
    tasks = _pick_tasks(est, args.task)
    model = est.model_
    seed = est.random_state
    summary, cells = [], []
    with threadpool_limits(limits=1):
        for t in tasks:
            if args.mode == "zeroshot":
                if not t.template.strip():
                    raise ConfigError(f"task {t.name} has no template text")
                if model.routing is None:
                    raise ConfigError("zero-shot routing needs a learned router")
                metric, D = eval_zero_shot(model, t, est.pipeline_)
                rng = rng_stream(seed, f"routing.control.{t.name}")
                ctrl = np.zeros_like(D)
                ctrl[np.arange(D.shape[0]), rng.integers(0, D.shape[1], D.shape[0])] = 1.0
                control = evaluate_task(model, t, "test", ctrl)[0]
                summary.append([t.name, repr(control), repr(metric)])
                continue
            ft = few_shot_subsample(t, name_seed(seed, t.name))
            kw = dict(lrs=acfg["lrs"], batch_sizes=acfg["batch_sizes"], steps=acfg["steps"],
                      validate_every=acfg["validate_every"], seed=seed, jobs=args.jobs)
            if model.routing is not None:
                res = adapt_few_shot(model, ft, est.pipeline_, **kw)
            else:
                D = model.baseline.routes([t.name])[0]
                res = grid_search_finetune(model.grid, model.vocab, D, ft, **kw)
            base = direct_finetune(est.base_, est.vocab_, ft, **kw)
            for name, r in (("method", res), ("baseline", base)):
                cells.extend([t.name, name, c["lr"], c["batch_size"], repr(c["best_dev"]),
                              c["best_step"], repr(c["test"])] for c in r.cells)
            summary.append([t.name, repr(base.test_metric), repr(res.test_metric)])
    os.makedirs(args.out, exist_ok=True)
    header = ["task", "control" if args.mode == "zeroshot" else "baseline", "method"]
    rows = list(summary)
    base_scores = {r[0]: float(r[1]) for r in summary}
    meth_scores = {r[0]: float(r[2]) for r in summary}
    if any(v > 0 for v in base_scores.values()):
        rows.append(["ARG", "", repr(arg(base_scores, meth_scores))])
    write_rows(os.path.join(args.out, f"adapt_{args.mode}.csv"), header, rows)
    if cells:
        write_rows(os.path.join(args.out, "adapt_grid.csv"),
                   ["task", "run", "lr", "batch_size", "best_dev", "best_step", "test"], cells)
    for r in rows:
        print(",".join(map(str, r)))
    return 0


def cmd_evaluate(args):
    est = _load(args)
    write_manifest(args, [args.checkpoint])
    rows = []
    with threadpool_limits(limits=1):
        for t in est.tasks_:
            m, loss, _ = evaluate_task(est.model_, t, args.split)
            rows.append([t.name, t.category, t.metric, repr(m), repr(loss)])
    rows.append(["MEAN", "", "", repr(float(np.mean([float(r[3]) for r in rows]))), ""])
    write_rows(os.path.join(args.out, f"eval_{args.split}.csv"),
               ["task", "category", "metric", "score", "loss"], rows)
    print(f"mean {args.split} metric {rows[-1][3]}")
    return 0


def _route_weights(model):
    if model.routing is not None:
        return model.routing.soft_routes()
    return model.all_eval_routes()


def cmd_analyze(args):
    est = _load(args)
    write_manifest(args, [args.checkpoint])
    model = est.model_
    os.makedirs(args.out, exist_ok=True)
    if args.which == "dynamics":
        if len(est.route_log_) == 0:
            raise NoSnapshotsError("no route snapshots in this checkpoint")
        paths = est.route_log_.write(os.path.join(args.out, "dynamics"))
        print(f"wrote {len(paths)} snapshot files")
        return 0
    ft = build_feature_table(est.tasks_)
    report = correlate_routes(_route_weights(model), ft, seed=est.random_state)
    if args.which == "correlate":
        report.to_files(os.path.join(args.out, "correlation"))
        print(f"correlation matrix {report.r.shape[0]}x{report.r.shape[1]}")
        return 0
    if model.routing is None:
        raise ConfigError("expert disabling needs a learned router")
    if args.feature not in ft.names:
        raise ConfigError(f"unknown feature {args.feature!r}")
    n, m = model.config.n_layers, model.config.n_experts
    plan = plan_disable(report, args.feature, args.mode, args.k, n, m, est.random_state)
    own = [t for t, v in zip(est.tasks_, ft.column(args.feature)) if v]
    with threadpool_limits(limits=1):
        results = run_disable_experiment(model, own, plan, args.split)
    write_disable_csv(os.path.join(args.out, f"disable_{args.mode}.csv"), plan, results)
    for r in results:
        print(r["k"], " ".join(r["disabled"]) or "-", r["mean_metric"])
    return 0


def cmd_report(args):
    est = _load(args)
    write_manifest(args, [args.checkpoint])
    model = est.model_
    routes = model.all_eval_routes()
    within, cross = category_similarity(routes, [t.category for t in est.tasks_])
    history = [[{k: r[k] for k in ("step", "metric", "loss")} for r in h] for h in est.history_records_]
    out = {"tasks": len(est.tasks_), "estimator": est.get_params(),
           "validation": history, "route_similarity": {"within": within, "cross": cross},
           "expert_usage": routes.mean(0).round(6).tolist()}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    print(json.dumps(out["route_similarity"]))
    return 0


# ------------------------------------------------------------------- parser
def _floats(s):
    return [float(v) for v in s.split(",")]


def _ints(s):
    return [int(v) for v in s.split(",")]


def build_parser():
    p = argparse.ArgumentParser(prog="taskmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=True):
        if ckpt:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs/out")
        sp.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("train", help="train a task-level MoE or a baseline")
    common(t, ckpt=False)
    t.add_argument("--baseline", choices=sorted(BASELINES))
    t.add_argument("--stage", choices=("one", "two"))
    t.add_argument("--repr", choices=sorted(REPRS))
    t.add_argument("--freeze-repr", action="store_true")
    t.add_argument("--steps", type=int)
    t.add_argument("--validate-every", type=int)
    t.add_argument("--dry-run", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="few-shot or zero-shot transfer to meta-test tasks")
    common(a)
    a.add_argument("--task", default="all")
    a.add_argument("--mode", choices=("fewshot", "zeroshot"), default="fewshot")
    a.add_argument("--lrs", type=_floats)
    a.add_argument("--batch-sizes", type=_ints)
    a.add_argument("--steps", type=int)
    a.add_argument("--validate-every", type=int)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="score meta-train tasks")
    common(e)
    e.add_argument("--split", choices=("dev", "test"), default="test")
    e.set_defaults(func=cmd_evaluate)

    z = sub.add_parser("analyze", help="route correlations, expert disabling, dynamics")
    common(z)
    z.add_argument("--which", choices=("correlate", "disable", "dynamics"), required=True)
    z.add_argument("--feature", default="Classification")
    z.add_argument("--mode", choices=("top", "least", "random"), default="top")
    z.add_argument("--k", "--topk", dest="k", type=int, default=1)
    z.add_argument("--split", choices=("dev", "test"), default="test")
    z.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="summarise a trained checkpoint")
    common(r)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level reporting
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

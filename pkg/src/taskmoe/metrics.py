"""Task metrics and average relative gain."""
from __future__ import annotations

import warnings

import numpy as np

METRICS = ("accuracy", "macro_f1", "exact_match")


def _check(predictions, references):
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions for {len(references)} references")
    if len(references) == 0:
        raise ValueError("cannot score an empty set")


def accuracy(predictions, references):
    _check(predictions, references)
    return float(np.mean([p == r for p, r in zip(predictions, references)]))


def macro_f1(predictions, references):
    """Unweighted mean of per-label F1 over every label seen in either list."""
    _check(predictions, references)
    labels = sorted(set(references) | set(predictions))
    f1s = []
    for lab in labels:
        tp = sum(p == lab and r == lab for p, r in zip(predictions, references))
        fp = sum(p == lab and r != lab for p, r in zip(predictions, references))
        fn = sum(p != lab and r == lab for p, r in zip(predictions, references))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def score(predictions, references, metric):
    if metric == "macro_f1":
        return macro_f1(predictions, references)
    if metric in ("accuracy", "exact_match"):
        # both are string-equality rates; normalisation is whitespace only
        return accuracy([" ".join(p.split()) for p in predictions],
                        [" ".join(r.split()) for r in references])
    raise ValueError(f"unknown metric {metric!r}")


def arg(baseline_scores, method_scores):
    """Average relative gain in percent: mean of (method - baseline) / baseline * 100.

    Tasks whose baseline score is zero are excluded with a warning.
    """
    if set(baseline_scores) != set(method_scores):
        raise ValueError("baseline and method must cover the same tasks")
    if not baseline_scores:
        raise ValueError("no tasks to compare")
    gains = []
    for task in sorted(baseline_scores):
        b, m = float(baseline_scores[task]), float(method_scores[task])
        if b == 0:
            warnings.warn(f"task {task}: zero baseline score, excluded from ARG")
            continue
        gains.append((m - b) / b)
    if not gains:
        raise ValueError("every baseline score is zero")
    return float(np.mean(gains) * 100.0)

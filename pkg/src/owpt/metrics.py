"""Evaluation metrics: accuracies, their harmonic mean, exact AUROC, ROC curves.

AUROC is the exact Mann-Whitney statistic computed from tie-averaged ranks
(base scores are the positive class), not a binned approximation, so the
trapezoidal area under the returned ROC curve reproduces it to floating-point
accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EvalReport",
    "RocCurve",
    "harmonic_h",
    "evaluate",
    "auroc",
    "roc_points",
    "eval_csv_header",
    "eval_csv_row",
    "roc_csv_lines",
]


@dataclass(frozen=True)
class EvalReport:
    """Accuracies over the mixed test set; a missing space shows up as nan
    with the corresponding count at zero."""

    acc_base: float
    acc_new: float
    acc_overall: float
    h_metric: float
    auroc: float
    n_base: int
    n_new: int

    def __post_init__(self):
        for name in ("acc_base", "acc_new", "acc_overall", "h_metric", "auroc"):
            v = getattr(self, name)
            if math.isfinite(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0, 1]: {v}")


@dataclass(frozen=True)
class RocCurve:
    """Points (threshold, fpr, tpr) sorted by descending threshold."""

    points: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        fprs = [p[1] for p in self.points]
        tprs = [p[2] for p in self.points]
        if (fprs[0], tprs[0]) != (0.0, 0.0) or (fprs[-1], tprs[-1]) != (1.0, 1.0):
            raise ValueError("curve must run from (0,0) to (1,1)")
        if any(b < a for a, b in zip(fprs, fprs[1:])) or any(
            b < a for a, b in zip(tprs, tprs[1:])
        ):
            raise ValueError("curve coordinates must be nondecreasing")

    def area(self) -> float:
        total = 0.0
        for (_, f0, t0), (_, f1, t1) in zip(self.points, self.points[1:]):
            total += (f1 - f0) * (t0 + t1) / 2.0
        return total


def harmonic_h(acc_base: float, acc_new: float) -> float:
    """Harmonic mean of the two accuracies; zero whenever either is zero."""
    if not (0.0 <= acc_base <= 1.0 and 0.0 <= acc_new <= 1.0):
        raise ValueError("accuracies must lie in [0, 1]")
    if acc_base == 0.0 or acc_new == 0.0:
        return 0.0
    return 2.0 * acc_base * acc_new / (acc_base + acc_new)


def auroc(base_scores, new_scores) -> float:
    """Exact Mann-Whitney AUROC with base as the positive (high-score) class."""
    base = np.asarray(list(base_scores), dtype=np.float64)
    new = np.asarray(list(new_scores), dtype=np.float64)
    if base.size == 0 or new.size == 0:
        raise ValueError("both score lists must be nonempty")
    combined = np.concatenate([base, new])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0  # average 1-based rank of the tie block
        i = j + 1
    rank_sum = float(ranks[: base.size].sum())
    u = rank_sum - base.size * (base.size + 1) / 2.0
    return u / (base.size * new.size)


def roc_points(base_scores, new_scores) -> RocCurve:
    """ROC curve at every distinct score plus infinite sentinel thresholds.

    A point for threshold t reports the fraction of new scores >= t (FPR) and
    base scores >= t (TPR); thresholds descend so the curve runs (0,0)->(1,1).
    """
    base = np.asarray(list(base_scores), dtype=np.float64)
    new = np.asarray(list(new_scores), dtype=np.float64)
    if base.size == 0 or new.size == 0:
        raise ValueError("both score lists must be nonempty")
    thresholds = [math.inf] + list(np.unique(np.concatenate([base, new]))[::-1]) + [-math.inf]
    points = tuple(
        (
            float(t),
            float((new >= t).sum() / new.size),
            float((base >= t).sum() / base.size),
        )
        for t in thresholds
    )
    return RocCurve(points)


def evaluate(predict_fn, test_set, score_fn=None) -> EvalReport:
    """Accuracy report for a predictor returning a class id per example.

    ``score_fn`` optionally maps an example to a base-likeness score, filling
    the AUROC column; without it (or with a space missing) the corresponding
    fields are nan.
    """
    test_set = list(test_set)
    if not test_set:
        raise ValueError("test set is empty")
    correct = {"base": 0, "new": 0}
    counts = {"base": 0, "new": 0}
    scores = {"base": [], "new": []}
    for ex in test_set:
        counts[ex.space_tag] += 1
        if predict_fn(ex) == ex.label:
            correct[ex.space_tag] += 1
        if score_fn is not None:
            scores[ex.space_tag].append(score_fn(ex))

    def acc(tag):
        return correct[tag] / counts[tag] if counts[tag] else math.nan

    acc_base, acc_new = acc("base"), acc("new")
    acc_overall = (correct["base"] + correct["new"]) / len(test_set)
    h = (
        harmonic_h(acc_base, acc_new)
        if counts["base"] and counts["new"]
        else math.nan
    )
    area = (
        auroc(scores["base"], scores["new"])
        if score_fn is not None and counts["base"] and counts["new"]
        else math.nan
    )
    return EvalReport(acc_base, acc_new, acc_overall, h, area, counts["base"], counts["new"])


EVAL_CSV_COLUMNS = ("run_id", "method", "seed", "acc_base", "acc_new", "acc_overall", "h", "auroc")


def eval_csv_header() -> str:
    return ",".join(EVAL_CSV_COLUMNS)


def eval_csv_row(run_id: str, method: str, seed: int, report: EvalReport) -> str:
    values = (
        run_id,
        method,
        str(seed),
        repr(report.acc_base),
        repr(report.acc_new),
        repr(report.acc_overall),
        repr(report.h_metric),
        repr(report.auroc),
    )
    return ",".join(values)


def roc_csv_lines(curve: RocCurve) -> list[str]:
    lines = ["threshold,fpr,tpr"]
    lines += [f"{t!r},{f!r},{p!r}" for t, f, p in curve.points]
    return lines

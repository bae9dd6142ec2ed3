"""Evaluation metrics: AUC (rank-based, ties at half credit), RMSE, and
the square of the Pearson correlation. Scores are pooled over all target
interactions of a fold; fold aggregates report mean and sample standard
deviation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .data import make_target_split
from .errors import UndefinedMetricError


def auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted half.

    Computed from tied ranks (Mann-Whitney); equals exhaustive pairwise
    counting exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"auc needs both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rmse(predictions, labels) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.size == 0:
        raise UndefinedMetricError("rmse of empty input")
    return float(np.sqrt(np.mean((predictions - labels) ** 2)))


def r_squared(predictions, labels) -> float:
    """Squared Pearson correlation; undefined when either side is constant."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    dp = predictions - predictions.mean()
    dl = labels - labels.mean()
    vp = float(np.dot(dp, dp))
    vl = float(np.dot(dl, dl))
    if vp == 0.0 or vl == 0.0:
        raise UndefinedMetricError("r_squared needs nonzero variance on both sides")
    r = float(np.dot(dp, dl)) / np.sqrt(vp * vl)
    return float(r * r)


@dataclass
class EvalResult:
    auc: float
    rmse: float
    r2: float
    n_targets: int


@dataclass
class CrossValResult:
    folds: list
    auc_mean: float
    auc_std: float
    rmse_mean: float
    rmse_std: float
    r2_mean: float
    r2_std: float


def score_students(net, students):
    """Forward every student's history and pool the last-quiz predictions."""
    scores = []
    labels = []
    with ad.no_grad():
        for ps in students:
            history, targets = make_target_split(ps)
            preds, _ = net.forward(history, [e for e, _ in targets])
            scores.extend(preds.data.ravel())
            labels.extend(a for _, a in targets)
    return np.array(scores), np.array(labels)


def evaluate(net, students) -> EvalResult:
    """Pooled metrics over every student's last quiz. A degenerate score or
    label spread leaves r2 undefined; it is reported as nan rather than
    aborting the evaluation (auc still requires both classes)."""
    scores, labels = score_students(net, students)
    try:
        r2 = r_squared(scores, labels)
    except UndefinedMetricError:
        r2 = float("nan")
    return EvalResult(auc(scores, labels), rmse(scores, labels), r2, len(labels))


def summarize_folds(folds) -> CrossValResult:
    """Mean and sample standard deviation (ddof=1) across fold results."""
    def stats(values):
        v = np.array(values, dtype=np.float64)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        return float(v.mean()), std

    auc_m, auc_s = stats([f.auc for f in folds])
    rmse_m, rmse_s = stats([f.rmse for f in folds])
    r2_m, r2_s = stats([f.r2 for f in folds])
    return CrossValResult(list(folds), auc_m, auc_s, rmse_m, rmse_s, r2_m, r2_s)


RESULT_COLUMNS = ["auc_mean", "auc_std", "rmse_mean", "rmse_std", "r2_mean", "r2_std", "n_folds"]


def format_results_table(rows) -> str:
    """Aligned text table of (label, CrossValResult) rows, values x100."""
    header = f"{'method':<24}{'AUC':>16}{'RMSE':>16}{'r2':>16}"
    lines = [header, "-" * len(header)]
    for label, cv in rows:
        cells = [f"{100 * m:.2f}±{100 * s:.2f}"
                 for m, s in [(cv.auc_mean, cv.auc_std),
                              (cv.rmse_mean, cv.rmse_std),
                              (cv.r2_mean, cv.r2_std)]]
        lines.append(f"{label:<24}{cells[0]:>16}{cells[1]:>16}{cells[2]:>16}")
    return "\n".join(lines)


def write_results_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + RESULT_COLUMNS)
        for label, cv in rows:
            w.writerow([label, repr(cv.auc_mean), repr(cv.auc_std),
                        repr(cv.rmse_mean), repr(cv.rmse_std),
                        repr(cv.r2_mean), repr(cv.r2_std), len(cv.folds)])

"""Test metrics, fold-based confidence intervals and a partial-correlation baseline."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05


class UndefinedMetricError(ValueError):
    """A metric was requested for data lacking the class it needs."""


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney rank statistic; tied scores get half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = stats.rankdata(scores)  # average ranks for ties
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def classification_metrics(p_values, labels, alpha: float = DEFAULT_ALPHA) -> dict:
    """F1 (H1 positive), Type I and Type II error of the rule "reject iff p < alpha".

    A metric whose required class is absent is reported as ``None``.
    """
    p = np.asarray(p_values, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pred = p < alpha
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    n0, n1 = int((y == 0).sum()), int((y == 1).sum())
    out = {"f1": None, "type1": None, "type2": None}
    if n0:
        out["type1"] = fp / n0
    if n1:
        out["type2"] = fn / n1
        out["f1"] = 2 * tp / (2 * tp + fp + fn)
    return out


@dataclass
class Interval:
    mean: float
    ci95_low: float
    ci95_high: float
    n_folds: int


def fold_interval(values) -> Interval | None:
    """Mean and normal-approximation 95% interval over fold values, clipped to [0, 1]."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None
    mean = float(v.mean())
    half = 1.959963984540054 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
    return Interval(mean, max(0.0, mean - half), min(1.0, mean + half), int(v.size))


@dataclass
class EvalReport:
    auc: Interval | None
    f1: Interval | None
    type1: Interval | None
    type2: Interval | None
    n_datasets: int
    n_folds: int
    alpha: float
    ci_method: str = "normal approximation over folds"
    inference_ms_per_dataset: float = 0.0
    rows: list = field(default_factory=list)
    folds: list = field(default_factory=list)

    def to_dict(self, with_rows: bool = False) -> dict:
        d = asdict(self)
        if not with_rows:
            d.pop("rows")
        return d


def split_folds(count: int, n_folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(count)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def folded_eval(model, null, corpus, n_folds: int = 5, alpha: float = DEFAULT_ALPHA, fold_seed: int = 0,
                logits=None) -> EvalReport:
    """Score every corpus dataset once, then compute metrics per fold.

    ``logits`` may be passed precomputed (same order as ``corpus``).
    """
    from .calibration import decide, p_value
    from .trainer import predict

    if n_folds < 2:
        raise ValueError(f"n_folds must be >= 2 for a confidence interval, got {n_folds}")
    labels = np.array([d.label for d in corpus])
    if any(lab is None for lab in labels):
        raise ValueError("evaluation corpus must be labeled")
    labels = labels.astype(int)
    t0 = time.perf_counter()
    if logits is None:
        logits = predict(model, corpus)
    ms = 1000 * (time.perf_counter() - t0) / max(1, len(corpus))
    logits = np.asarray(logits, dtype=np.float64)
    pvals = np.array([p_value(t, null) for t in logits])

    per_fold = {"auc": [], "f1": [], "type1": [], "type2": []}
    fold_rows = []
    for i, idx in enumerate(split_folds(len(corpus), n_folds, fold_seed)):
        lab = labels[idx]
        row = {"fold": i, "size": int(idx.size)}
        try:
            row["auc"] = auc(logits[idx], lab)
        except UndefinedMetricError:
            warnings.warn(f"fold {i} lacks a class; AUC skipped")
            row["auc"] = None
        row.update(classification_metrics(pvals[idx], lab, alpha))
        for k in per_fold:
            per_fold[k].append(row[k])
        fold_rows.append(row)

    rows = [
        {"dataset": i, "seed": d.seed, "model_id": d.model_id, "label": int(lab), "logit": float(t),
         "p_value": float(p), "decision": decide(p, alpha)}
        for i, (d, lab, t, p) in enumerate(zip(corpus, labels, logits, pvals))
    ]
    return EvalReport(
        auc=fold_interval(per_fold["auc"]),
        f1=fold_interval(per_fold["f1"]),
        type1=fold_interval(per_fold["type1"]),
        type2=fold_interval(per_fold["type2"]),
        n_datasets=len(corpus),
        n_folds=n_folds,
        alpha=alpha,
        inference_ms_per_dataset=ms,
        rows=rows,
        folds=fold_rows,
    )


def partial_correlation_test(dataset) -> dict:
    """Fisher-z test of X _||_ Y | Z for scalar X, Y on linear-Gaussian data.

    Residualizes X and Y on Z (with intercept) by least squares and
    correlates the residuals.
    """
    x, y, z = dataset.x, dataset.y, dataset.z
    if x.shape[1] != 1 or y.shape[1] != 1:
        raise ValueError("partial_correlation_test needs dX = dY = 1")
    n, dz = z.shape
    if n <= dz + 3:
        raise ValueError(f"need n > dZ + 3, got n={n}, dZ={dz}")
    design = np.hstack([np.ones((n, 1)), z])
    gram = design.T @ design
    if np.linalg.cond(gram) > 1e12:
        warnings.warn("near-singular conditioning set; using a ridge-regularized solve")
        gram = gram + 1e-8 * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    beta = np.linalg.solve(gram, design.T @ np.hstack([x, y]))
    res = np.hstack([x, y]) - design @ beta
    denom = math.sqrt(float(res[:, 0] @ res[:, 0]) * float(res[:, 1] @ res[:, 1]))
    r = float(res[:, 0] @ res[:, 1]) / denom if denom > 0 else 0.0
    r = min(max(r, -1 + 1e-15), 1 - 1e-15)
    zstat = math.atanh(r) * math.sqrt(n - dz - 3)
    return {"r": r, "statistic": zstat, "p_value": float(2 * stats.norm.sf(abs(zstat)))}

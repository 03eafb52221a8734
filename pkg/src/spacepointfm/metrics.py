"""Evaluation: pair-counting ARI, double-majority track matching with
efficiency/purity, spacepoint-level efficiency/purity, classification
accuracy with macro precision/recall, and PCA projection of embeddings.

All pooled metrics accumulate counts over the whole test set rather than
averaging per event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import NOISE_TRACK_ID

MIN_TRACK_POINTS = 3


def _pair_counts(labels):
    """(cluster sizes, sum over clusters of C(size, 2))."""
    _, counts = np.unique(labels, return_counts=True)
    return counts, float((counts * (counts - 1) // 2).sum())


def _overlap_counts(a, b):
    """Sparse contingency: unique (a, b) label pairs and their joint counts."""
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    key = ia.astype(np.int64) * len(ub) + ib
    ks, counts = np.unique(key, return_counts=True)
    return ua[ks // len(ub)], ub[ks % len(ub)], counts


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand Index between two partitions of the same point set."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("partitions must be 1-d labelings of the same points")
    n = len(a)
    if n == 0:
        raise ValueError("empty partitions")
    _, _, joint = _overlap_counts(a, b)
    index = float((joint * (joint - 1) // 2).sum())
    _, sum_a = _pair_counts(a)
    _, sum_b = _pair_counts(b)
    total_pairs = n * (n - 1) / 2
    if total_pairs == 0:
        return 1.0  # single point: partitions trivially agree
    expected = sum_a * sum_b / total_pairs
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0 if index == expected else 0.0
    return (index - expected) / (maximum - expected)


@dataclass
class TrackMatchReport:
    matched_pairs: list = field(default_factory=list)  # (truth label, pred label)
    tp: int = 0
    n_truth: int = 0
    n_pred: int = 0
    efficiency: float = 0.0
    purity: float = 0.0
    capture_fractions: list = field(default_factory=list)
    undefined_efficiency: bool = False
    undefined_purity: bool = False
    skipped_small_truth: int = 0


def _apply_noise_policy(truth, pred, noise_policy):
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction must label the same points")
    if noise_policy == "exclude":
        keep = truth != NOISE_TRACK_ID
        return truth[keep], pred[keep]
    if noise_policy == "cluster":
        return truth, pred
    raise ValueError(f"unknown noise policy {noise_policy!r}")


def double_majority(truth, pred, noise_policy="exclude") -> TrackMatchReport:
    """Match predicted to truth tracks when each holds a strict majority of
    the other's points; efficiency = TP / #truth, purity = TP / #predicted.

    Truth tracks below 3 points are excluded from matching and denominators.
    """
    t, p = _apply_noise_policy(truth, pred, noise_policy)
    report = TrackMatchReport()
    if len(t) == 0:
        report.undefined_efficiency = report.undefined_purity = True
        return report
    truth_ids, truth_sizes = np.unique(t, return_counts=True)
    small = {tid for tid, size in zip(truth_ids, truth_sizes)
             if size < MIN_TRACK_POINTS}
    report.skipped_small_truth = len(small)
    truth_size = {tid: s for tid, s in zip(truth_ids, truth_sizes)}
    pred_ids, pred_sizes = np.unique(p, return_counts=True)
    pred_size = {pid: s for pid, s in zip(pred_ids, pred_sizes)}
    ta, pb, joint = _overlap_counts(t, p)
    matched_truth = set()
    matched_pred = set()
    for tid, pid, ov in zip(ta, pb, joint):
        if tid in small:
            continue
        if 2 * ov > pred_size[pid] and 2 * ov > truth_size[tid]:
            # strict majorities imply each side matches at most once
            assert tid not in matched_truth and pid not in matched_pred
            matched_truth.add(tid)
            matched_pred.add(pid)
            report.matched_pairs.append((tid, pid))
            report.capture_fractions.append(
                (float(ov) / truth_size[tid], float(ov) / pred_size[pid]))
    report.tp = len(report.matched_pairs)
    report.n_truth = len(truth_ids) - len(small)
    report.n_pred = len(pred_ids)
    if report.n_truth:
        report.efficiency = report.tp / report.n_truth
    else:
        report.undefined_efficiency = True
    if report.n_pred:
        report.purity = report.tp / report.n_pred
    else:
        report.undefined_purity = True
    return report


def spacepoint_counts(report: TrackMatchReport, truth, pred,
                      noise_policy="exclude"):
    """(matched-overlap points, eligible truth points, matched predicted points)."""
    t, p = _apply_noise_policy(truth, pred, noise_policy)
    if len(t) == 0:
        return 0, 0, 0
    matched = dict(report.matched_pairs)
    truth_ids, truth_sizes = np.unique(t, return_counts=True)
    eff_den = int(sum(s for s in truth_sizes if s >= MIN_TRACK_POINTS))
    numerator = 0
    for tid, pid in report.matched_pairs:
        numerator += int(np.sum((t == tid) & (p == pid)))
    pur_den = int(sum(np.sum(p == pid) for pid in matched.values()))
    return numerator, eff_den, pur_den


def spacepoint_eff_purity(report: TrackMatchReport, truth, pred,
                          noise_policy="exclude"):
    """Point-level efficiency and purity under the matched pairs.

    Efficiency: matched-pair overlap points / all points in (eligible) truth
    tracks. Purity: same numerator / all points in matched predicted tracks.
    Undefined ratios report 0 with the flag set.
    """
    numerator, eff_den, pur_den = spacepoint_counts(report, truth, pred,
                                                    noise_policy)
    eff = numerator / eff_den if eff_den else 0.0
    pur = numerator / pur_den if pur_den else 0.0
    return eff, pur, eff_den == 0 or pur_den == 0


def classification_report(y_true, y_pred, n_classes: int) -> dict:
    """Accuracy plus macro precision/recall; absent classes score 0, flagged."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("label arrays must have equal shape")
    if len(y_true) == 0:
        raise ValueError("no labels to score")
    if y_true.min() < 0 or y_true.max() >= n_classes or \
            y_pred.min() < 0 or y_pred.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    diag = np.diag(conf).astype(np.float64)
    recall = np.divide(diag, support, out=np.zeros(n_classes), where=support > 0)
    precision = np.divide(diag, predicted, out=np.zeros(n_classes),
                          where=predicted > 0)
    return {
        "accuracy": float(diag.sum() / len(y_true)),
        "macro_recall": float(recall.mean()),
        "macro_precision": float(precision.mean()),
        "per_class": [
            {"class": c, "support": int(support[c]), "predicted": int(predicted[c]),
             "recall": float(recall[c]), "precision": float(precision[c]),
             "absent": bool(support[c] == 0)}
            for c in range(n_classes)
        ],
        "has_absent_class": bool(np.any(support == 0)),
    }


def pca_project(embeddings, dims: int, tol: float = 1e-9, max_iter: int = 10_000):
    """Center, extract the top eigenvectors of the covariance by power
    iteration with deflation, and project.

    Returns (projection (S, dims), eigenvalues descending, zero_variance flag).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 samples of shape (S, d)")
    s, d = x.shape
    if not 1 <= dims <= min(s, d):
        raise ValueError(f"dims must lie in [1, {min(s, d)}]")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (s - 1)
    if float(np.trace(cov)) <= 1e-30:
        return np.zeros((s, dims)), np.zeros(dims), True
    rng = np.random.default_rng(0)
    comps = np.zeros((dims, d))
    eigvals = np.zeros(dims)
    deflated = cov.copy()
    for m in range(dims):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = deflated @ v
            nw = np.linalg.norm(w)
            if nw < 1e-30:
                v = np.zeros(d)
                break
            w /= nw
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
                v = w
                break
            v = w
        lam = float(v @ deflated @ v)
        # deterministic sign: largest-magnitude entry positive
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        comps[m] = v
        eigvals[m] = lam
        deflated = deflated - lam * np.outer(v, v)
    return xc @ comps.T, eigvals, False

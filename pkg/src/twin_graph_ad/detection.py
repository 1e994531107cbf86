"""Scoring windows, turning scores into decisions, and evaluation metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .training import residual, scores

log = logging.getLogger(__name__)

MODES = ("classifier", "threshold")


@dataclass
class ScoreTable:
    ends: np.ndarray        # (W,) graph index of each scored window
    re: np.ndarray          # (W, N)
    p_abnormal: np.ndarray  # (W, N)


def score_batch(model, M, L, S):
    """(RE, p_abnormal) arrays for a batch of windows, dropout off."""
    was = model.training
    model.eval()
    with tc.no_grad():
        recon = model(M, L, S)
        R = residual(M[:, -1], L[:, -1], S[:, -1], recon, model.head.trace_proj)
        RE, P = scores(R, model.head)
    model.train(was)
    return RE.data.astype(np.float64), P.data[..., 1].astype(np.float64)


def score_stream(model, ds, batch_size=200):
    """Score every window of ``ds``; one (RE, p) pair per instance per window."""
    cfg = model.cfg
    g = ds.graphs
    if (ds.k, g.V.shape[1], g.n_metrics, g.V.shape[2] - g.n_metrics, g.E.shape[-1]) != \
            (cfg.window, cfg.n_instances, cfg.n_metrics, cfg.n_log_features, cfg.n_request_types):
        raise ValueError(f"dataset schema (k={ds.k}, N={g.V.shape[1]}, F_m={g.n_metrics}, "
                         f"F_l={g.V.shape[2] - g.n_metrics}, F_s={g.E.shape[-1]}) does not match the model "
                         f"(k={cfg.window}, N={cfg.n_instances}, F_m={cfg.n_metrics}, "
                         f"F_l={cfg.n_log_features}, F_s={cfg.n_request_types})")
    res, ps = [], []
    for start in range(0, len(ds), batch_size):
        M, L, S, _ = ds.batch(np.arange(start, min(start + batch_size, len(ds))))
        re, p = score_batch(model, M, L, S)
        res.append(re)
        ps.append(p)
    N = cfg.n_instances
    re = np.concatenate(res) if res else np.zeros((0, N))
    p = np.concatenate(ps) if ps else np.zeros((0, N))
    return ScoreTable(ds.ends.copy(), re, p)


# -- thresholds -------------------------------------------------------------------
def _f1_by_cut(scores, labels):
    """F1 of "score >= s" for every distinct score s, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    pos = y.sum()
    f1 = 2 * tp / (tp + fp + pos)
    return s[last], f1


def select_threshold(scores, labels):
    """Threshold on scores maximising F1 of ``score >= thr``.

    Candidates are the lowest score (flag everything) plus the midpoints
    between consecutive distinct scores; ties go to the lowest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    keep = labels >= 0
    scores, labels = scores[keep], labels[keep].astype(np.int64)
    if labels.size == 0 or labels.min() == labels.max():
        raise ValueError("select_threshold needs both normal and abnormal labels")
    uniq = np.unique(scores)
    if uniq.size == 1:
        return float(uniq[0])
    cands = np.r_[uniq[0], (uniq[:-1] + uniq[1:]) / 2.0]
    # "score >= midpoint(u_j, u_j+1)" predicts exactly the scores >= u_j+1
    cut_scores, f1 = _f1_by_cut(scores, labels)
    f1_at = dict(zip(cut_scores.tolist(), f1.tolist()))
    vals = np.array([f1_at[u] for u in uniq.tolist()])
    best = np.flatnonzero(vals == vals.max())[0]
    return float(cands[best])


def fallback_threshold(scores, n_std=3.0):
    """Label-free rule: mean + n_std * std of (validation) scores."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("no scores to derive a threshold from")
    return float(scores.mean() + n_std * scores.std())


# -- decisions ---------------------------------------------------------------------
@dataclass(frozen=True)
class Decision:
    timestamp: int
    instance_id: str
    re: float
    p_abnormal: float
    decided: int
    mode: str = "classifier"

    def __post_init__(self):
        if self.decided not in (0, 1):
            raise ValueError("decided must be 0 or 1")
        if not 0.0 <= self.p_abnormal <= 1.0:
            raise ValueError(f"p_abnormal {self.p_abnormal} outside [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"unknown decision mode {self.mode!r}")


def decide(table: ScoreTable, mode="classifier", threshold=None):
    """Binary decisions (W, N): p_abnormal > 0.5, or RE >= threshold."""
    if mode == "classifier":
        return (table.p_abnormal > 0.5).astype(np.int8)
    if mode == "threshold":
        if threshold is None:
            raise ValueError("threshold mode needs a threshold")
        return (table.re >= threshold).astype(np.int8)
    raise ValueError(f"unknown decision mode {mode!r}")


def decisions_from_table(table, decided, timestamps, instances, mode):
    out = []
    for w, t in enumerate(table.ends):
        ts = int(timestamps[t])
        for i, inst in enumerate(instances):
            p = min(max(float(table.p_abnormal[w, i]), 0.0), 1.0)
            out.append(Decision(ts, inst, float(table.re[w, i]), p, int(decided[w, i]), mode))
    return out


def write_decisions_csv(path, decisions):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "instance", "re", "p_abnormal", "decided"])
        for d in decisions:
            w.writerow([d.timestamp, d.instance_id, repr(d.re), repr(d.p_abnormal), d.decided])


def read_decisions_csv(path, mode="classifier"):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["timestamp", "instance", "re", "p_abnormal", "decided"]:
            raise ValueError(f"{path}: expected header 'timestamp,instance,re,p_abnormal,decided'")
        return [Decision(int(r["timestamp"]), r["instance"], float(r["re"]), float(r["p_abnormal"]),
                         int(r["decided"]), mode) for r in reader]


# -- metrics --------------------------------------------------------------------------
@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    roc_auc: float
    avg_precision: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self):
        return asdict(self)

    def to_json(self, **extra):
        return json.dumps({**self.to_dict(), **extra}, indent=1, sort_keys=True) + "\n"


def roc_auc(scores, labels):
    """Area under the ROC curve, trapezoid rule over distinct-score cuts."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    pos = labels.sum()
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("ROC-AUC needs both positive and negative labels")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tpr = np.r_[0.0, np.cumsum(y)[last] / pos]
    fpr = np.r_[0.0, ((last + 1) - np.cumsum(y)[last]) / neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def average_precision(scores, labels):
    """sum_i (R_i - R_{i-1}) P_i over distinct-score cuts."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    pos = labels.sum()
    if pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    prec = tp / (last + 1)
    rec = np.r_[0.0, tp / pos]
    return float(np.sum(np.diff(rec) * prec))


def evaluate(scores, labels, decided):
    """Confusion counts of ``decided`` plus ranking metrics of ``scores``.

    Entries with label -1 are dropped. Precision with no positive decision is
    reported as 0.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    decided = np.asarray(decided).ravel()
    if not scores.shape == labels.shape == decided.shape:
        raise ValueError(f"scores {scores.shape}, labels {labels.shape}, decisions {decided.shape} differ in size")
    keep = labels >= 0
    scores, labels, decided = scores[keep], labels[keep].astype(np.int64), decided[keep].astype(np.int64)
    if labels.sum() == 0:
        raise ValueError("no positive labels: recall and ROC-AUC are undefined")
    tp = int(((decided == 1) & (labels == 1)).sum())
    fp = int(((decided == 1) & (labels == 0)).sum())
    tn = int(((decided == 0) & (labels == 0)).sum())
    fn = int(((decided == 0) & (labels == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = roc_auc(scores, labels) if (labels == 0).any() else math.nan
    return MetricsReport(precision, recall, f1, auc, average_precision(scores, labels), tp, fp, tn, fn)


def format_report(rows):
    """Plain-text table; ``rows`` is a list of (name, metrics dict)."""
    cols = [("PR", "precision"), ("RC", "recall"), ("F1", "f1"), ("AUC", "roc_auc"), ("AP", "avg_precision")]
    width = max([len("Method")] + [len(n) for n, _ in rows])
    lines = ["Method".ljust(width) + "".join(f"{c:>8}" for c, _ in cols)]
    lines.append("-" * len(lines[0]))
    for name, m in rows:
        lines.append(name.ljust(width) + "".join(f"{m[k]:>8.3f}" for _, k in cols))
    return "\n".join(lines) + "\n"

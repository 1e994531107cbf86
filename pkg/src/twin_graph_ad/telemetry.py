"""Ingestion of metrics, logs and spans into aligned per-timestamp tensors.

Raw formats (one file per modality):

* metrics: CSV ``timestamp,instance,<metric_1>,...``
* logs: JSON lines with ``ts``, ``instance``, ``message``
* spans: JSON lines with ``trace_id, span_id, parent_span_id, request_type,
  caller, callee, start_ts, duration_ms, finished``
* labels: CSV ``timestamp,instance,label`` with label in {-1, 0, 1}
"""
from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

WILDCARD = "<*>"


@dataclass(frozen=True)
class MetricRecord:
    timestamp: int
    instance_id: str
    values: tuple

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class LogRecord:
    timestamp: int
    instance_id: str
    message: str

    def __post_init__(self):
        if not self.message.strip():
            raise ValueError("empty log message")


@dataclass(frozen=True)
class LogTemplate:
    template_id: int
    tokens: tuple

    def to_dict(self):
        return {"id": self.template_id, "tokens": list(self.tokens)}


@dataclass(frozen=True)
class SpanRecord:
    trace_id: str
    span_id: str
    parent_span_id: str | None
    request_type: str
    caller_instance: str | None
    callee_instance: str
    start_ts: int
    duration: float
    finished: bool = True

    def __post_init__(self):
        if not self.callee_instance:
            raise ValueError(f"span {self.span_id}: empty callee")
        if self.finished and self.duration < 0:
            raise ValueError(f"span {self.span_id}: negative duration")


@dataclass
class NormalizationStats:
    metric_min: np.ndarray
    metric_max: np.ndarray
    log_min: np.ndarray
    log_max: np.ndarray
    trace_mean: np.ndarray
    epsilon: float = 1e-6
    metric_keep: np.ndarray | None = None   # kept columns of the raw metric schema

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.metric_max < self.metric_min) or np.any(self.log_max < self.log_min):
            raise ValueError("max < min in normalisation stats")
        if np.any(self.trace_mean < 0):
            raise ValueError("trace_mean must be non-negative")

    def to_arrays(self, prefix="stats."):
        out = {f"{prefix}{k}": np.asarray(getattr(self, k), dtype=np.float64)
               for k in ("metric_min", "metric_max", "log_min", "log_max", "trace_mean")}
        if self.metric_keep is not None:
            out[f"{prefix}metric_keep"] = np.asarray(self.metric_keep, dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays, epsilon, prefix="stats."):
        keep = arrays.get(f"{prefix}metric_keep")
        return cls(*(arrays[f"{prefix}{k}"] for k in ("metric_min", "metric_max", "log_min", "log_max", "trace_mean")),
                   epsilon=epsilon, metric_keep=None if keep is None else keep.astype(np.intp))


@dataclass
class TelemetrySeries:
    timestamps: np.ndarray          # (T,) bucket start times, uniform interval
    instances: list
    request_types: list
    M: np.ndarray                   # (T, N, F_m)
    L: np.ndarray                   # (T, N, F_l)
    S: np.ndarray                   # (T, N, N, F_s)
    metric_names: list = field(default_factory=list)
    calls: np.ndarray | None = None   # (T, N, N) finished span counts per caller/callee pair
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        T, N = len(self.timestamps), len(self.instances)
        if self.M.shape[:2] != (T, N) or self.L.shape[:2] != (T, N) or self.S.shape[:3] != (T, N, N):
            raise ValueError(f"inconsistent series shapes M={self.M.shape} L={self.L.shape} S={self.S.shape}")
        if T > 1:
            steps = np.diff(self.timestamps)
            if np.any(steps <= 0) or np.any(steps != steps[0]):
                raise ValueError("timestamps must be strictly increasing with a uniform interval")

    @property
    def shape(self):
        return dict(T=len(self.timestamps), N=len(self.instances), F_m=self.M.shape[2],
                    F_l=self.L.shape[2], F_s=self.S.shape[3])

    def slice(self, start, stop):
        return TelemetrySeries(self.timestamps[start:stop], self.instances, self.request_types,
                               self.M[start:stop], self.L[start:stop], self.S[start:stop],
                               self.metric_names, None if self.calls is None else self.calls[start:stop],
                               dict(self.report))

    def replace(self, **kw):
        fields = dict(timestamps=self.timestamps, instances=self.instances, request_types=self.request_types,
                      M=self.M, L=self.L, S=self.S, metric_names=self.metric_names,
                      calls=self.calls, report=dict(self.report))
        fields.update(kw)
        return TelemetrySeries(**fields)


# -- file IO --------------------------------------------------------------------
def read_metrics_csv(path):
    """Return (metric_names, [MetricRecord])."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["timestamp", "instance"]:
            raise ValueError(f"{path}: expected header 'timestamp,instance,...'")
        names = header[2:]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            records.append(MetricRecord(int(row[0]), row[1], tuple(float(v) for v in row[2:])))
    return names, records


def write_metrics_csv(path, metric_names, rows):
    """rows: iterable of (timestamp, instance, values)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "instance", *metric_names])
        for ts, inst, values in rows:
            w.writerow([ts, inst, *(repr(float(v)) for v in values)])


def read_logs_jsonl(path):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                records.append(LogRecord(int(obj["ts"]), str(obj["instance"]), str(obj["message"])))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad log record ({exc})") from None
    return records


def write_logs_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"ts": r.timestamp, "instance": r.instance_id, "message": r.message}) + "\n")


def read_spans_jsonl(path):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            o = json.loads(line)
            try:
                records.append(SpanRecord(str(o["trace_id"]), str(o["span_id"]), o.get("parent_span_id") or None,
                                          str(o["request_type"]), o.get("caller") or None, str(o["callee"]),
                                          int(o["start_ts"]), float(o["duration_ms"]), bool(o.get("finished", True))))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad span record ({exc})") from None
    return records


def write_spans_jsonl(path, records):
    with open(path, "w") as fh:
        for s in records:
            fh.write(json.dumps({"trace_id": s.trace_id, "span_id": s.span_id, "parent_span_id": s.parent_span_id,
                                 "request_type": s.request_type, "caller": s.caller_instance,
                                 "callee": s.callee_instance, "start_ts": s.start_ts,
                                 "duration_ms": s.duration, "finished": s.finished}) + "\n")


def read_labels_csv(path):
    """Return {(timestamp, instance): label}."""
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["timestamp", "instance", "label"]:
            raise ValueError(f"{path}: expected header 'timestamp,instance,label'")
        for row in reader:
            lab = int(row["label"])
            if lab not in (-1, 0, 1):
                raise ValueError(f"{path}: label {lab} not in {{-1,0,1}}")
            labels[(int(row["timestamp"]), row["instance"])] = lab
    return labels


def write_labels_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "instance", "label"])
        for ts, inst, lab in rows:
            w.writerow([ts, inst, int(lab)])


# -- log template mining ----------------------------------------------------------
_HAS_DIGIT = re.compile(r"\d")


def tokenize(message):
    return message.strip().split()


@dataclass
class MinerConfig:
    depth: int = 4
    sim_threshold: float = 0.4
    max_children: int = 100

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("tree depth must be >= 3 (root, length, >= 1 token level)")


class _Node:
    __slots__ = ("children", "clusters")

    def __init__(self):
        self.children = {}
        self.clusters = []


class TemplateMiner:
    """Fixed-depth parse tree miner (Drain).

    Messages are routed by token count and then by their first ``depth - 2``
    tokens (tokens containing digits take the wildcard branch). At the leaf,
    the cluster with the highest share of equal tokens wins if it reaches
    ``sim_threshold``; differing positions are then generalised to ``<*>``.
    """

    def __init__(self, cfg: MinerConfig | None = None):
        self.cfg = cfg or MinerConfig()
        self.root = _Node()
        self._templates = []   # list of token lists, index = template id

    @property
    def templates(self):
        return [LogTemplate(i, tuple(t)) for i, t in enumerate(self._templates)]

    def _leaf(self, tokens):
        node = self.root.children.setdefault(len(tokens), _Node())
        for tok in tokens[: self.cfg.depth - 2]:
            key = WILDCARD if _HAS_DIGIT.search(tok) else tok
            if key in node.children:
                node = node.children[key]
            elif len(node.children) < self.cfg.max_children:
                node = node.children.setdefault(key, _Node())
            else:
                node = node.children.setdefault(WILDCARD, _Node())
        return node

    def add(self, message):
        """Assign ``message`` to a template (creating one if needed); return its id."""
        tokens = tokenize(message)
        if not tokens:
            raise ValueError("cannot mine an empty message")
        leaf = self._leaf(tokens)
        best, best_key = None, None
        n = len(tokens)
        for tid in leaf.clusters:
            same, wild = kernels.seq_similarity(tokens, self._templates[tid], WILDCARD)
            key = (same / n, wild)
            if same / n >= self.cfg.sim_threshold and (best_key is None or key > best_key):
                best, best_key = tid, key
        if best is None:
            best = len(self._templates)
            self._templates.append(list(tokens))
            leaf.clusters.append(best)
        else:
            tpl = self._templates[best]
            for i, (a, b) in enumerate(zip(tpl, tokens)):
                if a != b:
                    tpl[i] = WILDCARD
        return best

    def to_json(self):
        return json.dumps([t.to_dict() for t in self.templates], indent=1) + "\n"


def mine_log_templates(messages, cfg: MinerConfig | None = None):
    """Mine templates from messages (strings or LogRecords) in the given order.

    Returns (templates, assignment) where assignment[i] is the id of message i.
    """
    miner = TemplateMiner(cfg)
    assignment = [miner.add(m.message if isinstance(m, LogRecord) else m) for m in messages]
    return miner.templates, assignment


def templates_to_json(templates):
    return json.dumps([t.to_dict() for t in templates], indent=1) + "\n"


def templates_from_json(text):
    items = json.loads(text)
    templates = [LogTemplate(int(o["id"]), tuple(o["tokens"])) for o in items]
    if [t.template_id for t in templates] != list(range(len(templates))):
        raise ValueError("template ids must be dense 0..F_l-1 in order")
    return templates


class TemplateMatcher:
    """Online matching against a fixed template set.

    Similarity counts positions where the template token equals the message
    token or is a wildcard; the best template at or above ``threshold`` wins
    (ties: more literal matches, then lower id). Otherwise the reserved id
    ``len(templates)`` is returned.
    """

    def __init__(self, templates, threshold=0.4):
        self.templates = list(templates)
        self.threshold = threshold
        self.unknown_id = len(self.templates)
        self._by_len = {}
        for t in self.templates:
            self._by_len.setdefault(len(t.tokens), []).append(t)
        self._cache = {}

    def __call__(self, message):
        hit = self._cache.get(message)
        if hit is not None:
            return hit
        tokens = tokenize(message)
        best, best_key = self.unknown_id, None
        n = len(tokens)
        for t in self._by_len.get(n, ()):
            same, wild = kernels.seq_similarity(tokens, list(t.tokens), WILDCARD)
            sim = (same + wild) / n
            key = (sim, same, -t.template_id)
            if sim >= self.threshold and (best_key is None or key > best_key):
                best, best_key = t.template_id, key
        if len(self._cache) < 100_000:
            self._cache[message] = best
        return best


def match_template(message, templates, threshold=0.4):
    return TemplateMatcher(templates, threshold)(message)


# -- bucketing --------------------------------------------------------------------
def resolve_callers(spans):
    """Fill missing callers from the parent span's callee.

    Returns (resolved spans, number dropped because no caller could be found).
    """
    callee_of = {s.span_id: s.callee_instance for s in spans}
    out, dropped = [], 0
    for s in spans:
        caller = s.caller_instance
        if not caller and s.parent_span_id:
            caller = callee_of.get(s.parent_span_id)
        if not caller:
            dropped += 1
            continue
        if caller != s.caller_instance:
            s = SpanRecord(s.trace_id, s.span_id, s.parent_span_id, s.request_type, caller,
                           s.callee_instance, s.start_ts, s.duration, s.finished)
        out.append(s)
    return out, dropped


def bucket(metrics, logs, spans, interval, instances, request_types, n_metrics=None,
           n_log_features=1, start=None, n_buckets=None, metric_names=None):
    """Align records onto buckets of ``interval`` seconds.

    ``logs`` are (timestamp, instance, template_id) triples. Metrics use the
    latest observation in a bucket, carried forward while an instance is
    silent (zero before its first observation). Log counts and span duration
    sums are accumulated per bucket; unfinished spans are skipped and spans
    are bucketed by start time. Records naming undeclared instances or
    request types are rejected and counted in ``series.report``.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    inst_idx = {name: i for i, name in enumerate(instances)}
    rt_idx = {name: i for i, name in enumerate(request_types)}
    metrics, logs, spans = list(metrics), list(logs), list(spans)
    if n_metrics is None:
        n_metrics = len(metrics[0].values) if metrics else 0
    times = [m.timestamp for m in metrics] + [l[0] for l in logs] + [s.start_ts for s in spans]
    if start is None:
        if not times:
            raise ValueError("no records and no start time given")
        start = min(times)
    if n_buckets is None:
        n_buckets = (max(times) - start) // interval + 1 if times else 0
    T, N, F_s = int(n_buckets), len(instances), len(request_types)
    report = Counter()

    M = np.zeros((T, N, n_metrics))
    seen = np.zeros((T, N), dtype=bool)
    latest = np.full((T, N), -1, dtype=np.int64)
    for m in metrics:
        i = inst_idx.get(m.instance_id)
        if i is None:
            report["metrics_unknown_instance"] += 1
            continue
        if len(m.values) != n_metrics:
            raise ValueError(f"metric record has {len(m.values)} values, schema has {n_metrics}")
        t = (m.timestamp - start) // interval
        if not 0 <= t < T:
            report["metrics_out_of_range"] += 1
            continue
        if m.timestamp >= latest[t, i]:
            latest[t, i] = m.timestamp
            M[t, i] = m.values
            seen[t, i] = True
    for i in range(N):
        last = None
        for t in range(T):
            if seen[t, i]:
                last = M[t, i]
            elif last is not None:
                M[t, i] = last

    L = np.zeros(T * N * n_log_features)
    idx = []
    for ts, inst, tid in logs:
        i = inst_idx.get(inst)
        if i is None:
            report["logs_unknown_instance"] += 1
            continue
        t = (ts - start) // interval
        if not 0 <= t < T:
            report["logs_out_of_range"] += 1
            continue
        if not 0 <= tid < n_log_features:
            raise ValueError(f"template id {tid} outside 0..{n_log_features - 1}")
        idx.append((t * N + i) * n_log_features + tid)
    kernels.accumulate(L, np.asarray(idx, dtype=np.intp), np.ones(len(idx)))
    L = L.reshape(T, N, n_log_features)

    S = np.zeros(T * N * N * F_s)
    calls = np.zeros((T, N, N), dtype=np.int32)
    sidx, dur = [], []
    for s in spans:
        if not s.finished:
            report["spans_unfinished"] += 1
            continue
        ci, ce = inst_idx.get(s.caller_instance), inst_idx.get(s.callee_instance)
        r = rt_idx.get(s.request_type)
        if ci is None or ce is None:
            report["spans_unknown_instance"] += 1
            continue
        if r is None:
            report["spans_unknown_request_type"] += 1
            continue
        t = (s.start_ts - start) // interval
        if not 0 <= t < T:
            report["spans_out_of_range"] += 1
            continue
        sidx.append(((t * N + ci) * N + ce) * F_s + r)
        dur.append(s.duration)
        calls[t, ci, ce] += 1
    kernels.accumulate(S, np.asarray(sidx, dtype=np.intp), np.asarray(dur, dtype=np.float64))
    S = S.reshape(T, N, N, F_s)

    rejected = {k: v for k, v in report.items() if k != "spans_unfinished"}
    if rejected:
        log.warning("bucket: rejected records %s", dict(sorted(rejected.items())))
    timestamps = start + interval * np.arange(T, dtype=np.int64)
    return TelemetrySeries(timestamps, list(instances), list(request_types), M, L, S,
                           list(metric_names or []), calls, dict(sorted(report.items())))


# -- feature filtering and normalisation -------------------------------------------
def filter_low_variance_metrics(series, threshold, keep=None):
    """Drop metric columns whose variance over (t, i) is <= threshold.

    With ``keep`` given (an index map from an earlier fit) the same projection
    is applied instead. Returns (series, keep).
    """
    if threshold < 0:
        raise ValueError("variance threshold must be >= 0")
    if keep is None:
        flat = series.M.reshape(-1, series.M.shape[-1])
        var = flat.var(axis=0) if flat.shape[0] else np.zeros(flat.shape[1])
        keep = np.flatnonzero(var > threshold)
        if keep.size == 0:
            raise ValueError("every metric column has variance <= threshold; nothing left to model")
    keep = np.asarray(keep, dtype=np.intp)
    names = [series.metric_names[i] for i in keep] if series.metric_names else []
    return series.replace(M=series.M[:, :, keep], metric_names=names), keep


def fit_normalization(train, epsilon=1e-6, metric_keep=None):
    """Min/max per metric and log feature; mean per request type over every
    (t, i, j) entry, zeros included."""
    if len(train.timestamps) == 0:
        raise ValueError("cannot fit normalisation on an empty series")
    fm, fl, fs = train.M.shape[-1], train.L.shape[-1], train.S.shape[-1]
    m = train.M.reshape(-1, fm)
    l = train.L.reshape(-1, fl)
    return NormalizationStats(m.min(axis=0), m.max(axis=0), l.min(axis=0), l.max(axis=0),
                              train.S.reshape(-1, fs).mean(axis=0), epsilon, metric_keep)


def normalize(series, stats):
    fm, fl, fs = series.M.shape[-1], series.L.shape[-1], series.S.shape[-1]
    if (stats.metric_min.shape[0], stats.log_min.shape[0], stats.trace_mean.shape[0]) != (fm, fl, fs):
        raise ValueError(f"series feature dims ({fm}, {fl}, {fs}) do not match stats "
                         f"({stats.metric_min.shape[0]}, {stats.log_min.shape[0]}, {stats.trace_mean.shape[0]})")
    eps = stats.epsilon
    M = (series.M - stats.metric_min) / (stats.metric_max - stats.metric_min + eps)
    L = (series.L - stats.log_min) / (stats.log_max - stats.log_min + eps)
    S = series.S / (stats.trace_mean + eps)
    return series.replace(M=M, L=L, S=S)

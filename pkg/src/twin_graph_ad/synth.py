"""Deterministic synthetic microservice telemetry with injected anomalies.

Each modality draws from its own RNG stream (spawned from the seed), so an
anomaly that only touches one modality leaves the other files byte-identical
to the anomaly-free run of the same seed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .telemetry import LogRecord, SpanRecord, write_labels_csv, write_logs_jsonl, write_metrics_csv, write_spans_jsonl

log = logging.getLogger(__name__)

ANOMALY_KINDS = ("cpu_spike", "log_burst", "latency_inflation", "silent_service")

METRIC_NAMES = ["cpu", "mem", "net_in", "net_out", "disk_io", "threads", "gc_ms", "conn_pool"]

WORDS = ["cart", "orders", "users", "items", "search", "auth"]

# template -> token generator; distinct prefixes so the miner keeps them apart
TEMPLATES = [
    lambda r: f"GET /api/{r.choice(WORDS)} completed in {r.integers(2, 400)} ms",
    lambda r: f"Connected to 10.0.{r.integers(0, 255)}.{r.integers(0, 255)}",
    lambda r: f"cache miss for key k{r.integers(0, 1 << 20):x}",
    lambda r: f"user {r.integers(1000, 9999)} logged in from 192.168.{r.integers(0, 255)}.{r.integers(0, 255)}",
    lambda r: f"worker thread {r.integers(1, 64)} started",
    lambda r: f"flushed {r.integers(1, 5000)} records to disk",
    lambda r: f"retrying request r{r.integers(0, 1 << 24):x} attempt {r.integers(1, 5)}",
    lambda r: f"session {r.integers(10**5, 10**6)} expired after {r.integers(60, 3600)} s",
    lambda r: f"queue depth is {r.integers(0, 500)}",
    lambda r: "heartbeat ok",
    lambda r: f"gc pause {r.integers(1, 90)} ms on heap {r.choice(['young', 'old'])}",
    lambda r: f"config reloaded version {r.integers(1, 99)}",
]


@dataclass
class SynthConfig:
    seed: int = 0
    n_instances: int = 5
    edge_prob: float = 0.5
    n_timestamps: int = 2000
    interval: int = 1
    n_metrics: int = 4
    n_templates: int = 8
    n_request_types: int = 2
    anomaly_rate: float = 0.03
    anomaly_kinds: tuple = ANOMALY_KINDS
    label_known_fraction: float = 1.0
    magnitude: tuple = (4.0, 8.0)        # anomaly size, multiples of the baseline scale
    duration: tuple = (5, 15)            # event length in steps, inclusive bounds
    start_ts: int = 1_700_000_000
    requests_per_step: float = 8.0       # per request type
    log_rate: float = 2.0                # mean messages per active template per step
    period: int = 60                     # seasonal period in steps
    unfinished_fraction: float = 0.01
    missing_caller_fraction: float = 0.3
    constant_metrics: int = 0            # extra zero-variance metric columns

    def __post_init__(self):
        self.anomaly_kinds = tuple(self.anomaly_kinds)
        self.magnitude = tuple(self.magnitude)
        self.duration = tuple(self.duration)
        if self.n_instances < 2:
            raise ValueError("n_instances must be >= 2")
        if not 0.0 <= self.anomaly_rate <= 0.5:
            raise ValueError("anomaly_rate must lie in [0, 0.5]")
        if not 0.0 <= self.label_known_fraction <= 1.0:
            raise ValueError("label_known_fraction must lie in [0, 1]")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("edge_prob must lie in [0, 1]")
        bad = set(self.anomaly_kinds) - set(ANOMALY_KINDS)
        if bad:
            raise ValueError(f"unknown anomaly kinds {sorted(bad)}; choose from {ANOMALY_KINDS}")
        if not 1 <= self.n_templates <= len(TEMPLATES):
            raise ValueError(f"n_templates must be in 1..{len(TEMPLATES)}")
        if self.n_metrics < 1 or self.n_request_types < 1 or self.n_timestamps < 1 or self.interval < 1:
            raise ValueError("n_metrics, n_request_types, n_timestamps and interval must be >= 1")
        if self.duration[0] < 1 or self.duration[1] < self.duration[0]:
            raise ValueError("duration must be (lo, hi) with 1 <= lo <= hi")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @property
    def instances(self):
        return [f"svc-{i:02d}" for i in range(self.n_instances)]

    @property
    def request_types(self):
        return [f"req-{r}" for r in range(self.n_request_types)]

    @property
    def metric_names(self):
        names = [METRIC_NAMES[f] if f < len(METRIC_NAMES) else f"metric_{f}" for f in range(self.n_metrics)]
        return names + [f"const_{c}" for c in range(self.constant_metrics)]


@dataclass
class AnomalyEvent:
    kind: str
    instance: int
    start: int           # step index, inclusive
    end: int             # step index, inclusive
    magnitude: float


@dataclass
class SynthWorld:
    """Everything drawn before anomalies are applied."""
    edges: list                          # (caller, callee) pairs of the DAG
    type_edges: list                     # per request type, its edge subset
    load: np.ndarray                     # (T,) shared load signal
    events: list = field(default_factory=list)


def _streams(seed):
    names = ("topology", "load", "metrics", "logs", "spans", "schedule", "labels")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def _topology(cfg, rng):
    N = cfg.n_instances
    edges = [(i, j) for i in range(N) for j in range(i + 1, N) if rng.random() < cfg.edge_prob]
    type_edges = []
    for _ in range(cfg.n_request_types):
        sub = [e for e in edges if rng.random() < 0.7]
        if edges and not sub:
            sub = [edges[rng.integers(len(edges))]]
        type_edges.append(sub)
    return edges, type_edges


def _load(cfg, rng):
    T = cfg.n_timestamps
    t = np.arange(T)
    ar = np.zeros(T)
    z = rng.normal(0.0, 0.05, size=T)
    for s in range(1, T):
        ar[s] = 0.95 * ar[s - 1] + z[s]
    return 1.0 + 0.3 * np.sin(2 * np.pi * t / cfg.period) + ar


def _schedule(cfg, rng, edges):
    """Non-overlapping (per instance) events covering ~anomaly_rate of (t, i)."""
    T, N = cfg.n_timestamps, cfg.n_instances
    budget = int(round(cfg.anomaly_rate * T * N))
    if budget == 0:
        return []
    kinds = list(cfg.anomaly_kinds)
    if not kinds:
        raise ValueError("anomaly_rate > 0 but no anomaly kinds selected")
    callers = sorted({i for i, _ in edges})
    if "latency_inflation" in kinds and not callers:
        raise ValueError("latency_inflation requested but the generated topology has no edges "
                         "(raise edge_prob or n_instances)")
    busy = np.zeros((T, N), dtype=bool)
    events, used, attempts = [], 0, 0
    lo, hi = cfg.duration
    while used < budget:
        attempts += 1
        if attempts > 100_000:
            raise ValueError(f"could not place anomalies covering {budget} instance-steps; lower anomaly_rate")
        kind = kinds[rng.integers(len(kinds))]
        pool = callers if kind == "latency_inflation" else list(range(N))
        inst = int(pool[rng.integers(len(pool))])
        dur = int(min(rng.integers(lo, hi + 1), budget - used))
        if dur > T:
            continue
        start = int(rng.integers(0, T - dur + 1))
        a, b = max(start - 1, 0), min(start + dur + 1, T)
        if busy[a:b, inst].any():
            continue
        busy[start:start + dur, inst] = True
        mag = float(rng.uniform(*cfg.magnitude))
        events.append(AnomalyEvent(kind, inst, start, start + dur - 1, mag))
        used += dur
    events.sort(key=lambda e: (e.start, e.instance))
    return events


def _active(events, T, N, kind):
    """(T, N) magnitude of events of ``kind`` (0 where inactive)."""
    out = np.zeros((T, N))
    for e in events:
        if e.kind == kind:
            out[e.start:e.end + 1, e.instance] = e.magnitude
    return out


def _metrics(cfg, rng, world):
    T, N, F = cfg.n_timestamps, cfg.n_instances, cfg.n_metrics
    base = rng.uniform(20, 60, size=(N, F))
    gain = rng.uniform(5, 15, size=(N, F))
    sigma = rng.uniform(1.0, 2.0, size=(N, F))
    phase = rng.uniform(0, 2 * np.pi, size=(N, F))
    noise = rng.normal(size=(T, N, F))
    t = np.arange(T)[:, None, None]
    X = base + gain * world.load[:, None, None] + 2.0 * np.sin(2 * np.pi * t / (cfg.period * 3) + phase) + sigma * noise
    # baseline scale of a metric = its temporal std under normal operation
    scale = X.std(axis=0)
    spike = _active(world.events, T, N, "cpu_spike")
    X[:, :, 0] += spike * scale[None, :, 0]
    silent = _active(world.events, T, N, "silent_service") > 0
    X[silent] = 0.0
    if cfg.constant_metrics:
        X = np.concatenate([X, np.ones((T, N, cfg.constant_metrics))], axis=-1)
    return X


def _logs(cfg, rng, world):
    T, N, F = cfg.n_timestamps, cfg.n_instances, cfg.n_templates
    weight = rng.uniform(0.2, 2.0, size=(N, F)) * (rng.random((N, F)) < 0.75)
    weight[:, 0] = np.maximum(weight[:, 0], 0.5)  # every instance logs something
    burst = _active(world.events, T, N, "log_burst")
    silent = _active(world.events, T, N, "silent_service") > 0
    instances = cfg.instances
    out = []
    for t in range(T):
        ts = cfg.start_ts + t * cfg.interval
        rate = cfg.log_rate * weight * world.load[t]
        rate = rate * np.where(burst[t] > 0, burst[t], 1.0)[:, None]
        counts = rng.poisson(np.maximum(rate, 0.0))
        for i in range(N):
            for f in np.flatnonzero(counts[i]):
                for _ in range(counts[i, f]):
                    msg = TEMPLATES[f](rng)
                    if not silent[t, i]:
                        out.append(LogRecord(ts + int(rng.integers(cfg.interval)) if cfg.interval > 1 else ts,
                                             instances[i], msg))
    return out


def _spans(cfg, rng, world):
    T, N = cfg.n_timestamps, cfg.n_instances
    base = {e: rng.uniform(5, 50) for e in world.edges}
    type_scale = rng.uniform(0.5, 1.5, size=cfg.n_request_types)
    slow = _active(world.events, T, N, "latency_inflation")
    silent = _active(world.events, T, N, "silent_service") > 0
    instances, rtypes = cfg.instances, cfg.request_types
    children = []
    for sub in world.type_edges:
        ch = {}
        for i, j in sub:
            ch.setdefault(i, []).append(j)
        children.append(ch)
    out, sid = [], 0
    for t in range(T):
        ts = cfg.start_ts + t * cfg.interval
        for r in range(cfg.n_request_types):
            ch = children[r]
            if not ch:
                continue
            root = min(ch)
            for q in range(rng.poisson(cfg.requests_per_step * world.load[t])):
                trace = f"t{t:06d}-{r}-{q}"
                # walk the DAG from the root, visiting each instance once
                stack, seen, parent_of = [root], {root}, {root: None}
                spans = []
                while stack:
                    i = stack.pop(0)
                    for j in ch.get(i, ()):
                        if j in seen:
                            continue
                        seen.add(j)
                        sid += 1
                        span_id = f"s{sid:08d}"
                        dur = float(np.exp(rng.normal(np.log(base[(i, j)] * type_scale[r]), 0.25)))
                        finished = bool(rng.random() >= cfg.unfinished_fraction)
                        hide = bool(rng.random() < cfg.missing_caller_fraction)
                        start = ts + int(rng.integers(cfg.interval)) if cfg.interval > 1 else ts
                        spans.append((i, j, span_id, parent_of[i], dur, finished, hide, start))
                        parent_of[j] = span_id
                        stack.append(j)
                dead = set()
                for i, j, span_id, parent, dur, finished, hide, start in spans:
                    if silent[t, i] or silent[t, j] or parent in dead:
                        dead.add(span_id)
                        continue
                    if slow[t, i] > 0:
                        dur *= slow[t, i]
                    caller = None if (hide and parent is not None) else instances[i]
                    out.append(SpanRecord(trace, span_id, parent, rtypes[r], caller, instances[j],
                                          start, round(dur, 3) if finished else 0.0, finished))
    return out


def generate(cfg: SynthConfig, out_dir=None):
    """Generate the dataset; write files to ``out_dir`` when given.

    Returns a dict with the records, labels (masked), ground-truth labels and
    truth manifest.
    """
    rngs = _streams(cfg.seed)
    edges, type_edges = _topology(cfg, rngs["topology"])
    world = SynthWorld(edges, type_edges, _load(cfg, rngs["load"]))
    world.events = _schedule(cfg, rngs["schedule"], edges)
    T, N = cfg.n_timestamps, cfg.n_instances
    X = _metrics(cfg, rngs["metrics"], world)
    logs = _logs(cfg, rngs["logs"], world)
    spans = _spans(cfg, rngs["spans"], world)

    truth = np.zeros((T, N), dtype=np.int64)
    for e in world.events:
        truth[e.start:e.end + 1, e.instance] = 1
    known = rngs["labels"].random((T, N)) < cfg.label_known_fraction
    labels = np.where(known, truth, -1)

    instances = cfg.instances
    ts = cfg.start_ts + cfg.interval * np.arange(T)
    manifest = {
        "instances": instances,
        "request_types": cfg.request_types,
        "metric_names": cfg.metric_names,
        "interval": cfg.interval,
        "start_ts": cfg.start_ts,
        "n_timestamps": T,
        "edges": [[instances[i], instances[j]] for i, j in edges],
        "events": [{"kind": e.kind, "instances": [instances[e.instance]],
                    "start": int(ts[e.start]), "end": int(ts[e.end]), "magnitude": round(e.magnitude, 6)}
                   for e in world.events],
        "config": cfg.to_dict(),
    }
    result = {"metrics": X, "logs": logs, "spans": spans, "labels": labels, "truth": truth,
              "manifest": manifest, "timestamps": ts, "events": world.events}
    if out_dir is not None:
        write_dataset(out_dir, cfg, result)
    return result


def write_dataset(out_dir, cfg, result):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X, ts, instances = result["metrics"], result["timestamps"], cfg.instances
    write_metrics_csv(out / "metrics.csv", cfg.metric_names,
                      ((int(ts[t]), instances[i], np.round(X[t, i], 6)) for t in range(len(ts))
                       for i in range(len(instances))))
    write_logs_jsonl(out / "logs.jsonl", result["logs"])
    write_spans_jsonl(out / "spans.jsonl", result["spans"])
    lab = result["labels"]
    write_labels_csv(out / "labels.csv", ((int(ts[t]), instances[i], lab[t, i]) for t in range(len(ts))
                                          for i in range(len(instances))))
    (out / "truth.json").write_text(json.dumps(result["manifest"], indent=1, sort_keys=True) + "\n")
    log.info("synth: wrote %d metric rows, %d logs, %d spans, %d events to %s", X.shape[0] * X.shape[1],
             len(result["logs"]), len(result["spans"]), len(result["events"]), out)


def truth_labels(manifest, timestamps, instances):
    """(T, N) 0/1 matrix from a truth manifest's events."""
    pos = {int(t): k for k, t in enumerate(timestamps)}
    idx = {name: i for i, name in enumerate(instances)}
    out = np.zeros((len(timestamps), len(instances)), dtype=np.int64)
    for ev in manifest.get("events", []):
        ts = [t for t in range(int(ev["start"]), int(ev["end"]) + 1) if t in pos]
        for name in ev["instances"]:
            if name in idx:
                for t in ts:
                    out[pos[t], idx[name]] = 1
    return out

"""Per-timestamp twin graphs and sliding windows over them."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc

log = logging.getLogger(__name__)

DATASET_FORMAT = "twin-graph-ad/windows-v1"


@dataclass(frozen=True)
class MstGraph:
    V: np.ndarray          # (N, F_m + F_l)
    A: np.ndarray          # (N, N) {0,1}
    E: np.ndarray          # (N, N, F_s)
    timestamp: int


@dataclass(frozen=True)
class WindowSample:
    graphs: tuple          # k consecutive MstGraphs
    labels: np.ndarray     # (N,) in {-1, 0, 1}
    t: int                 # index of the last graph

    def __post_init__(self):
        idx = [g.timestamp for g in self.graphs]
        if any(b != a + 1 for a, b in zip(idx, idx[1:])):
            raise ValueError(f"window graphs not consecutive: {idx}")


def build_adjacency(calls):
    """A[i, j] = 1 iff any call i -> j was observed, plus self-loops.

    ``calls`` is an (N, N) count matrix, per-bucket (T, N, N) counts, or a
    (T, N, N, F_s) trace series (any positive entry counts as a call).
    """
    calls = np.asarray(calls)
    if calls.ndim == 4:
        seen = (calls > 0).any(axis=(0, 3))
    elif calls.ndim == 3 and calls.shape[1] == calls.shape[2]:
        seen = (calls > 0).any(axis=0)
    elif calls.ndim == 2 and calls.shape[0] == calls.shape[1]:
        seen = calls > 0
    else:
        raise ValueError(f"expected (N, N) / (T, N, N) counts or a (T, N, N, F_s) series, got {calls.shape}")
    A = seen.astype(np.int8)
    np.fill_diagonal(A, 1)
    return A


@dataclass
class GraphSequence:
    """Stacked graphs for a whole series; ``graph(t)`` gives one MstGraph."""
    V: np.ndarray          # (T, N, F_m + F_l)
    E: np.ndarray          # (T, N, N, F_s)
    A: np.ndarray
    n_metrics: int
    masked_count: int = 0

    def __len__(self):
        return self.V.shape[0]

    @property
    def M(self):
        return self.V[..., : self.n_metrics]

    @property
    def L(self):
        return self.V[..., self.n_metrics:]

    def graph(self, t):
        return MstGraph(self.V[t], self.A, self.E[t], int(t))


def build_graphs(series, A):
    """V_t = M_t || L_t and E_t = S_t with entries outside A zeroed.

    Nonzero entries removed by the mask are counted in ``masked_count``.
    """
    A = np.asarray(A)
    N = series.M.shape[1]
    if A.shape != (N, N):
        raise ValueError(f"adjacency {A.shape} does not match {N} instances")
    if series.S.shape[1:3] != (N, N):
        raise ValueError(f"trace tensor {series.S.shape} does not match {N} instances")
    keep = (A != 0)[None, :, :, None]
    outside = (series.S != 0) & ~keep
    masked = int(outside.sum())
    if masked:
        log.warning("build_graphs: %d trace entries on edges outside the adjacency were zeroed", masked)
    E = np.where(keep, series.S, 0.0)
    V = np.concatenate([series.M, series.L], axis=-1)
    return GraphSequence(V, E, (A != 0).astype(np.int8), series.M.shape[2], masked)


def make_windows(graphs, labels, k):
    """All T - k + 1 windows; window j ends at graph j + k - 1 and carries its labels."""
    if k < 1:
        raise ValueError("k must be >= 1")
    T = len(graphs)
    if T < k:
        raise ValueError(f"series has {T} graphs, fewer than window length {k}")
    labels = np.asarray(labels)
    return [WindowSample(tuple(graphs.graph(s) for s in range(t - k + 1, t + 1)), labels[t], t)
            for t in range(k - 1, T)]


@dataclass
class WindowDataset:
    """Graph sequence plus labels, windowed lazily by end index.

    ``ends`` lists the graph index that each window ends at; batches are
    gathered as (B, k, ...) arrays for the model.
    """
    graphs: GraphSequence
    labels: np.ndarray                 # (T, N)
    k: int
    ends: np.ndarray
    timestamps: np.ndarray | None = None
    instances: list = field(default_factory=list)

    def __post_init__(self):
        self.ends = np.asarray(self.ends, dtype=np.intp)
        if self.labels.shape != self.graphs.V.shape[:2]:
            raise ValueError(f"labels {self.labels.shape} do not match graphs {self.graphs.V.shape[:2]}")
        if self.ends.size and (self.ends.min() < self.k - 1 or self.ends.max() >= len(self.graphs)):
            raise ValueError("window end outside the series")

    def __len__(self):
        return len(self.ends)

    def subset(self, ends):
        return WindowDataset(self.graphs, self.labels, self.k, ends, self.timestamps, self.instances)

    def batch(self, positions):
        """Return M, L, S windows (B, k, ...) and the last-graph labels (B, N)."""
        ends = self.ends[np.asarray(positions, dtype=np.intp)]
        idx = ends[:, None] + np.arange(-self.k + 1, 1)[None, :]
        g = self.graphs
        return g.M[idx], g.L[idx], g.E[idx], self.labels[ends]

    def window_labels(self):
        return self.labels[self.ends]

    def sample(self, pos):
        t = int(self.ends[pos])
        return WindowSample(tuple(self.graphs.graph(s) for s in range(t - self.k + 1, t + 1)), self.labels[t], t)


def split_ends(T, k, fractions=(0.6, 0.1, 0.3)):
    """Chronological split of window end indices by the graph they end on."""
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    b1 = int(round(T * f[0]))
    b2 = int(round(T * (f[0] + f[1])))
    ends = np.arange(k - 1, T)
    return ends[ends < b1], ends[(ends >= b1) & (ends < b2)], ends[ends >= b2]


def save_dataset(directory, dataset: WindowDataset, splits, extra_arrays=None, meta=None):
    """Write graphs, labels and split end indices as a tensor container."""
    g = dataset.graphs
    arrays = {"V": g.V, "E": g.E, "A": g.A, "labels": dataset.labels}
    for name, ends in splits.items():
        arrays[f"split.{name}"] = np.asarray(ends, dtype=np.int64)
    if dataset.timestamps is not None:
        arrays["timestamps"] = np.asarray(dataset.timestamps, dtype=np.int64)
    arrays.update(extra_arrays or {})
    info = {"format": DATASET_FORMAT, "k": dataset.k, "n_metrics": g.n_metrics,
            "masked_count": g.masked_count, "instances": list(dataset.instances),
            "splits": sorted(splits)}
    info.update(meta or {})
    tc.save_tensors(directory, arrays, info)


def load_dataset(directory):
    """Return (full WindowDataset, {split: ends}, arrays, meta)."""
    arrays, meta = tc.load_tensors(directory)
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"{directory}: not a window dataset (format={meta.get('format')!r})")
    g = GraphSequence(arrays["V"], arrays["E"], arrays["A"], int(meta["n_metrics"]), int(meta.get("masked_count", 0)))
    k = int(meta["k"])
    labels = arrays["labels"].astype(np.int64)
    ds = WindowDataset(g, labels, k, np.arange(k - 1, len(g)), arrays.get("timestamps"), meta.get("instances", []))
    splits = {name: arrays[f"split.{name}"].astype(np.intp) for name in meta["splits"]}
    return ds, splits, arrays, meta

"""Encoder-decoder with spatial (graph), temporal and cross attention.

Streams are kept per modality throughout: metric and log streams live on
nodes, (B, k, N, d); the trace stream lives on the edges of the adjacency,
(B, k, n_edges, d). Temporal and cross attention see the trace stream through
a per-node aggregate (sum over incident edges) and write their update back to
the edges through the transpose of that aggregation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .attention import GraphEdgeAttention, GraphIndex, GraphNodeAttention, MultiHeadAttention, build_shared_score, causal_mask
from .nn import FeedForward, LayerNorm, Linear, Module


@dataclass
class ModelConfig:
    n_instances: int
    n_metrics: int
    n_log_features: int
    n_request_types: int
    window: int = 10
    d_model: int = 32
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    dropout: float = 0.2
    ffn_hidden: int | None = None
    leaky_slope: float = 0.2
    seed: int = 0
    dtype: str = "float64"
    use_sam: bool = True
    use_tam: bool = True
    use_shared_score: bool = True

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.d_model
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValueError("encoder_layers and decoder_layers must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Reconstruction:
    metrics: tc.Tensor   # (B, N, F_m)
    logs: tc.Tensor      # (B, N, F_l)
    traces: tc.Tensor    # (B, N, N, F_s)


@dataclass
class ModalityStreams:
    metric: tc.Tensor
    log: tc.Tensor
    trace: tc.Tensor

    def map(self, fm, fl, fs):
        return ModalityStreams(fm(self.metric), fl(self.log), fs(self.trace))

    def shapes(self):
        return self.metric.shape, self.log.shape, self.trace.shape


def positional_encoding(k, d, dtype=np.float64):
    pos = np.arange(k)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    pe = np.zeros((k, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe.astype(dtype)


def _nodes_to_time_major(x):
    # (B, k, N, d) <-> (B, N, k, d)
    return tc.swapaxes(x, 1, 2)


def aggregate_edges(trace, index):
    """Per-node sum of incident edge vectors: (..., nE, d) -> (..., N, d)."""
    inc = index.incidence.astype(trace.dtype)
    return tc.swapaxes(tc.matmul(tc.swapaxes(trace, -1, -2), inc.T), -1, -2)


def distribute_nodes(nodes, index):
    """Adjoint of :func:`aggregate_edges`: (..., N, d) -> (..., nE, d)."""
    inc = index.incidence.astype(nodes.dtype)
    return tc.swapaxes(tc.matmul(tc.swapaxes(nodes, -1, -2), inc), -1, -2)


class InputEmbedding(Module):
    """Bias-free per-modality linear maps plus a sinusoidal time encoding."""

    def __init__(self, rng, cfg):
        dt = cfg.np_dtype
        self.metric = Linear(rng, cfg.n_metrics, cfg.d_model, bias=False, dtype=dt)
        self.log = Linear(rng, cfg.n_log_features, cfg.d_model, bias=False, dtype=dt)
        self.trace = Linear(rng, cfg.n_request_types, cfg.d_model, bias=False, dtype=dt)
        self.pe = positional_encoding(cfg.window, cfg.d_model, dt)

    def __call__(self, M, L, S_edges):
        """M, L: (B, k, N, F); S_edges: (B, k, nE, F_s)."""
        k = M.shape[1]
        pe_nodes = self.pe[:k, None, :]
        return ModalityStreams(self.metric(M) + pe_nodes, self.log(L) + pe_nodes, self.trace(S_edges) + pe_nodes)


class SpatialAttention(Module):
    """Node update then edge update on every timestamp's graph independently."""

    def __init__(self, rng, cfg):
        d, h, dt, s = cfg.d_model, cfg.heads, cfg.np_dtype, cfg.leaky_slope
        self.fuse = Linear(rng, 2 * d, d, dtype=dt)
        self.nodes = GraphNodeAttention(rng, d, d, d, h, s, dt)
        self.edges = GraphEdgeAttention(rng, d, d, d, h, s, dt)
        self.to_metric = Linear(rng, d, d, dtype=dt)
        self.to_log = Linear(rng, d, d, dtype=dt)
        self.to_trace = Linear(rng, d, d, dtype=dt)

    def __call__(self, x, index):
        node_in = self.fuse(tc.concat([x.metric, x.log], axis=-1))
        v = self.nodes(node_in, x.trace, index)
        e = self.edges(x.trace, v, index)
        return ModalityStreams(self.to_metric(v), self.to_log(v), self.to_trace(e))


class TemporalAttention(Module):
    """Per-modality multi-head attention across the window, sharing the score
    matrix C between modalities (and heads)."""

    def __init__(self, rng, cfg):
        d, h, dt = cfg.d_model, cfg.heads, cfg.np_dtype
        self.metric = MultiHeadAttention(rng, d, h, dt)
        self.log = MultiHeadAttention(rng, d, h, dt)
        self.trace = MultiHeadAttention(rng, d, h, dt)
        self.use_shared_score = cfg.use_shared_score

    def __call__(self, x, index, mask=None):
        m = _nodes_to_time_major(x.metric)
        l = _nodes_to_time_major(x.log)
        s = _nodes_to_time_major(aggregate_edges(x.trace, index))
        C = build_shared_score(m, l, s) if self.use_shared_score else None
        out_m = self.metric(m, m, m, C=C, mask=mask)
        out_l = self.log(l, l, l, C=C, mask=mask)
        out_s = self.trace(s, s, s, C=C, mask=mask)
        return ModalityStreams(_nodes_to_time_major(out_m), _nodes_to_time_major(out_l),
                               distribute_nodes(_nodes_to_time_major(out_s), index))


class CrossAttention(Module):
    """Queries from the decoder stream, keys/values from the encoder's."""

    def __init__(self, rng, cfg):
        d, h, dt = cfg.d_model, cfg.heads, cfg.np_dtype
        self.metric = MultiHeadAttention(rng, d, h, dt)
        self.log = MultiHeadAttention(rng, d, h, dt)
        self.trace = MultiHeadAttention(rng, d, h, dt)

    def __call__(self, x, z, index):
        out = []
        for att, q, kv in ((self.metric, x.metric, z.metric), (self.log, x.log, z.log)):
            q, kv = _nodes_to_time_major(q), _nodes_to_time_major(kv)
            out.append(_nodes_to_time_major(att(q, kv, kv)))
        q = _nodes_to_time_major(aggregate_edges(x.trace, index))
        kv = _nodes_to_time_major(aggregate_edges(z.trace, index))
        out.append(distribute_nodes(_nodes_to_time_major(self.trace(q, kv, kv)), index))
        return ModalityStreams(*out)


class StreamNorm(Module):
    def __init__(self, d, dtype):
        self.metric = LayerNorm(d, dtype=dtype)
        self.log = LayerNorm(d, dtype=dtype)
        self.trace = LayerNorm(d, dtype=dtype)

    def residual(self, x, update, drop):
        return ModalityStreams(self.metric(x.metric + drop(update.metric)),
                               self.log(x.log + drop(update.log)),
                               self.trace(x.trace + drop(update.trace)))


class StreamFFN(Module):
    def __init__(self, rng, cfg):
        d, hdn, dt, s = cfg.d_model, cfg.ffn_hidden, cfg.np_dtype, cfg.leaky_slope
        self.metric = FeedForward(rng, d, hdn, s, dt)
        self.log = FeedForward(rng, d, hdn, s, dt)
        self.trace = FeedForward(rng, d, hdn, s, dt)

    def __call__(self, x):
        return x.map(self.metric, self.log, self.trace)


class EncoderLayer(Module):
    def __init__(self, rng, cfg):
        dt = cfg.np_dtype
        self.sam = SpatialAttention(rng, cfg) if cfg.use_sam else None
        self.norm_sam = StreamNorm(cfg.d_model, dt) if cfg.use_sam else None
        self.tam = TemporalAttention(rng, cfg) if cfg.use_tam else None
        self.norm_tam = StreamNorm(cfg.d_model, dt) if cfg.use_tam else None
        self.ffn = StreamFFN(rng, cfg)
        self.norm_ffn = StreamNorm(cfg.d_model, dt)

    def __call__(self, x, index, drop):
        if self.sam is not None:
            x = self.norm_sam.residual(x, self.sam(x, index), drop)
        if self.tam is not None:
            x = self.norm_tam.residual(x, self.tam(x, index), drop)
        return self.norm_ffn.residual(x, self.ffn(x), drop)


class DecoderLayer(EncoderLayer):
    def __init__(self, rng, cfg):
        super().__init__(rng, cfg)
        self.cam = CrossAttention(rng, cfg)
        self.norm_cam = StreamNorm(cfg.d_model, cfg.np_dtype)

    def __call__(self, x, z, index, drop):
        if self.sam is not None:
            x = self.norm_sam.residual(x, self.sam(x, index), drop)
        if self.tam is not None:
            mask = causal_mask(x.metric.shape[1])
            x = self.norm_tam.residual(x, self.tam(x, index, mask=mask), drop)
        x = self.norm_cam.residual(x, self.cam(x, z, index), drop)
        return self.norm_ffn.residual(x, self.ffn(x), drop)


class ScoreHead(Module):
    """Trace-residual projection W_s (N*F_s -> F_s) and the two-class MLP."""

    def __init__(self, rng, cfg):
        dt = cfg.np_dtype
        n_feat = cfg.n_metrics + cfg.n_log_features + cfg.n_request_types
        self.trace_proj = Linear(rng, cfg.n_instances * cfg.n_request_types, cfg.n_request_types, bias=False, dtype=dt)
        self.hidden = Linear(rng, n_feat, cfg.d_model, dtype=dt)
        self.out = Linear(rng, cfg.d_model, 2, dtype=dt)
        self.slope = cfg.leaky_slope

    def mlp(self, x):
        return self.out(tc.leaky_relu(self.hidden(x), self.slope))


class TwinGraphModel(Module):
    """All learned parameters plus the fixed adjacency they were trained on."""

    def __init__(self, cfg: ModelConfig, adjacency):
        A = np.asarray(adjacency)
        if A.shape != (cfg.n_instances, cfg.n_instances):
            raise ValueError(f"adjacency shape {A.shape} does not match n_instances={cfg.n_instances}")
        self.cfg = cfg
        self.adjacency = (A != 0).astype(np.int8)
        self.index = GraphIndex(self.adjacency)
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.embed = InputEmbedding(rng, cfg)
        self.encoder = [EncoderLayer(rng, cfg) for _ in range(cfg.encoder_layers)]
        self.decoder = [DecoderLayer(rng, cfg) for _ in range(cfg.decoder_layers)]
        self.out_metric = Linear(rng, cfg.d_model, cfg.n_metrics, dtype=dt)
        self.out_log = Linear(rng, cfg.d_model, cfg.n_log_features, dtype=dt)
        self.out_trace = Linear(rng, cfg.d_model, cfg.n_request_types, dtype=dt)
        self.head = ScoreHead(rng, cfg)
        self.training = False
        self._dropout_rng = np.random.Generator(np.random.Philox(cfg.seed))

    # -- mode --------------------------------------------------------------
    def train(self, flag=True):
        self.training = flag
        return self

    def eval(self):
        return self.train(False)

    def reseed_dropout(self, key):
        self._dropout_rng = np.random.Generator(np.random.Philox(key=int(key)))

    def _drop(self, x):
        return tc.dropout(x, self.cfg.dropout, self.training, self._dropout_rng)

    # -- forward -----------------------------------------------------------
    def check_batch(self, M, L, S):
        cfg = self.cfg
        n = cfg.n_instances
        want = [(cfg.window, n, cfg.n_metrics), (cfg.window, n, cfg.n_log_features),
                (cfg.window, n, n, cfg.n_request_types)]
        for name, arr, shape in zip("MLS", (M, L, S), want):
            if arr.ndim != len(shape) + 1 or arr.shape[1:] != shape:
                raise ValueError(f"{name} batch shape {arr.shape} does not match (B, {', '.join(map(str, shape))})")

    def embed_window(self, M, L, S):
        dt = self.cfg.np_dtype
        S_edges = S[:, :, self.index.src, self.index.dst, :]
        return self.embed(M.astype(dt, copy=False), L.astype(dt, copy=False), S_edges.astype(dt, copy=False))

    def encode(self, M, L, S):
        x = self.embed_window(M, L, S)
        for layer in self.encoder:
            x = layer(x, self.index, self._drop)
        return x

    def decode(self, M, L, S, z):
        x = self.embed_window(*(shift_right(a) for a in (M, L, S)))
        for layer in self.decoder:
            x = layer(x, z, self.index, self._drop)
        m = self.out_metric(x.metric[:, -1])
        l = self.out_log(x.log[:, -1])
        s = self.index.edges_to_dense(self.out_trace(x.trace[:, -1]))
        return Reconstruction(m, l, s)

    def forward(self, M, L, S):
        """Reconstruct the last graph of each window in the batch."""
        M, L, S = (np.asarray(a) for a in (M, L, S))
        self.check_batch(M, L, S)
        z = self.encode(M, L, S)
        return self.decode(M, L, S, z)

    __call__ = forward

    # -- persistence -------------------------------------------------------
    def shape_manifest(self):
        shapes = {name: p.shape for name, p in self.named_parameters()}
        shapes["adjacency"] = self.adjacency.shape
        return shapes

    def save(self, directory, extra=None):
        directory = Path(directory)
        arrays = self.state_dict()
        arrays["adjacency"] = self.adjacency
        meta = {"model_config": self.cfg.to_dict()}
        meta.update(extra or {})
        tc.save_tensors(directory, arrays, meta)
        (directory / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        cfg_path = directory / "config.json"
        if not cfg_path.exists():
            raise FileNotFoundError(f"missing model config: {cfg_path}")
        cfg = ModelConfig.from_dict(json.loads(cfg_path.read_text()))
        arrays, meta = tc.load_tensors(directory)
        if "adjacency" not in arrays:
            raise ValueError("checkpoint lacks adjacency")
        model = cls(cfg, arrays.pop("adjacency"))
        expected = model.shape_manifest()
        expected.pop("adjacency")
        if {k: tuple(v) for k, v in expected.items()} != {k: v.shape for k, v in arrays.items()}:
            tc.load_tensors(directory, expected_shapes={**expected, "adjacency": model.adjacency.shape})
        model.load_state_dict(arrays)
        return model, meta


def shift_right(x):
    """Shift along the time axis (1) by one step, zero-padding position 0."""
    out = np.zeros_like(x)
    out[:, 1:] = x[:, :-1]
    return out

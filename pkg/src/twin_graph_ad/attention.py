"""Attention primitives: dot-product, multi-head, temporal (with a shared score
matrix) and edge-aware graph attention over nodes and over edges."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensorcore as tc
from .nn import Module, init_weight
from .tensorcore import Tensor

NEG_INF = -1e9


def causal_mask(k):
    """Additive k x k mask blocking attention to later positions."""
    if k < 1:
        raise ValueError("mask length must be >= 1")
    return np.triu(np.full((k, k), NEG_INF), 1)


def temporal_attention(Q, K, V, C=None, mask=None, return_weights=False):
    """Softmax(Q K^T / sqrt(d_k) + C + mask) V over the last two axes."""
    Q, K, V = tc.as_tensor(Q), tc.as_tensor(K), tc.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query/key width mismatch: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"key/value length mismatch: {K.shape} vs {V.shape}")
    lq, lk = Q.shape[-2], K.shape[-2]
    scores = tc.scale(tc.matmul(Q, tc.swapaxes(K, -1, -2)), 1.0 / np.sqrt(Q.shape[-1]))
    if C is not None:
        C = tc.as_tensor(C)
        if C.shape[-2:] != (lq, lk):
            raise ValueError(f"score matrix C has shape {C.shape}, expected (..., {lq}, {lk})")
        scores = scores + C
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.dtype)
        if mask.shape[-2:] != (lq, lk):
            raise ValueError(f"mask shape {mask.shape} does not match ({lq}, {lk})")
        scores = scores + mask
    weights = tc.softmax(scores, axis=-1)
    out = tc.matmul(weights, V)
    return (out, weights) if return_weights else out


def scaled_dot_attention(Q, K, V, mask=None, return_weights=False):
    return temporal_attention(Q, K, V, None, mask, return_weights)


def build_shared_score(M_seq, L_seq, S_seq):
    """Average of the three per-modality k x k self-similarity matrices.

    Each input is (..., k, F); each term is scaled by sqrt of its own width.
    """
    seqs = [tc.as_tensor(x) for x in (M_seq, L_seq, S_seq)]
    k = seqs[0].shape[-2]
    if any(s.shape[-2] != k for s in seqs):
        raise ValueError(f"sequence lengths differ: {[s.shape for s in seqs]}")
    terms = [tc.scale(tc.matmul(s, tc.swapaxes(s, -1, -2)), 1.0 / np.sqrt(s.shape[-1])) for s in seqs]
    return tc.scale(terms[0] + terms[1] + terms[2], 1.0 / 3.0)


def _split_heads(x, heads):
    *lead, length, width = x.shape
    x = tc.reshape(x, tuple(lead) + (length, heads, width // heads))
    return tc.swapaxes(x, -2, -3)


def _merge_heads(x):
    x = tc.swapaxes(x, -2, -3)
    *lead, length, heads, width = x.shape
    return tc.reshape(x, tuple(lead) + (length, heads * width))


class MultiHeadAttention(Module):
    """Projections W_Q, W_K, W_V (d_model x h*d_k) and W_O (h*d_v x d_model)."""

    def __init__(self, rng, d_model, heads, dtype=np.float64):
        if heads < 1 or d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible into {heads} heads")
        self.heads = heads
        self.W_Q = init_weight(rng, d_model, d_model, dtype=dtype)
        self.W_K = init_weight(rng, d_model, d_model, dtype=dtype)
        self.W_V = init_weight(rng, d_model, d_model, dtype=dtype)
        self.W_O = init_weight(rng, d_model, d_model, dtype=dtype)

    def __call__(self, q, k, v, C=None, mask=None):
        return multi_head(q, k, v, self, mask=mask, C=C)


def multi_head(Q, K, V, params, mask=None, C=None, return_weights=False):
    """Concat(H_1..H_h) W_O with H_i = attention(Q W_i^Q, K W_i^K, V W_i^V [, C]).

    The same C is added to every head's scores.
    """
    h = params.heads
    q = _split_heads(tc.matmul(Q, params.W_Q), h)
    k = _split_heads(tc.matmul(K, params.W_K), h)
    v = _split_heads(tc.matmul(V, params.W_V), h)
    if C is not None:
        C = tc.as_tensor(C)
        C = tc.reshape(C, C.shape[:-2] + (1,) + C.shape[-2:])
    heads_out, weights = temporal_attention(q, k, v, C, mask, return_weights=True)
    out = tc.matmul(_merge_heads(heads_out), params.W_O)
    return (out, weights) if return_weights else out


# -- graph attention -------------------------------------------------------------
class GraphIndex:
    """Index structures for edge-aware attention on a fixed adjacency.

    Edges are the nonzero entries of ``A`` in row-major order (caller -> callee).
    Node neighbourhoods ignore direction: N(i) = {i} + {u : A[i,u] or A[u,i]}.
    Two edges are neighbours when they share an endpoint; every edge is its
    own neighbour.
    """

    def __init__(self, A):
        A = np.asarray(A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"adjacency must be square, got {A.shape}")
        self.A = (A != 0).astype(np.int8)
        n = self.n_nodes = A.shape[0]
        src, dst = np.nonzero(self.A)
        self.src, self.dst = src.astype(np.intp), dst.astype(np.intp)
        self.n_edges = len(src)
        self.has_self_loops = bool(np.all(np.diag(self.A) == 1))
        edge_id = -np.ones((n, n), dtype=np.intp)
        edge_id[src, dst] = np.arange(self.n_edges)
        self.edge_id = edge_id
        # dense scatter target (pad index = n_edges)
        self.dense_index = np.where(edge_id >= 0, edge_id, self.n_edges)
        self.flat_edge = src * n + dst

        sym = (self.A + self.A.T) > 0
        self.node_mask = sym | np.eye(n, dtype=bool)
        forward = edge_id
        backward_ = edge_id.T
        pair = np.where(forward >= 0, forward, backward_)
        # unused slots point at edge 0; their scores are masked out
        self.pair_edge = np.where(pair >= 0, pair, 0) if self.n_edges else np.zeros((n, n), dtype=np.intp)
        self.pair_valid = (pair >= 0) & self.node_mask

        nbrs, shared = [], []
        for e in range(self.n_edges):
            ends = {int(src[e]), int(dst[e])}
            row, row_shared = [], []
            for f in range(self.n_edges):
                common = sorted(ends & {int(src[f]), int(dst[f])})
                if common:
                    row.append(f)
                    row_shared.append((common[0], common[-1]))
            nbrs.append(row)
            shared.append(row_shared)
        width = max((len(r) for r in nbrs), default=1)
        self.edge_nb = np.zeros((self.n_edges, width), dtype=np.intp)
        self.edge_valid = np.zeros((self.n_edges, width), dtype=bool)
        self.shared_a = np.zeros((self.n_edges, width), dtype=np.intp)
        self.shared_b = np.zeros((self.n_edges, width), dtype=np.intp)
        for e, (row, row_shared) in enumerate(zip(nbrs, shared)):
            m = len(row)
            self.edge_nb[e, :m] = row
            self.edge_nb[e, m:] = e
            self.edge_valid[e, :m] = True
            self.shared_a[e, :m] = [s[0] for s in row_shared]
            self.shared_b[e, :m] = [s[1] for s in row_shared]
            self.shared_a[e, m:] = src[e]
            self.shared_b[e, m:] = src[e]

        self.node_slots = SlotTable(np.tile(np.arange(n), (n, 1)), self.pair_edge, self.pair_edge, self.node_mask)
        self.edge_slots = SlotTable(self.edge_nb, self.shared_a, self.shared_b, self.edge_valid)

        inc = np.zeros((n, self.n_edges))
        np.add.at(inc, (self.src, np.arange(self.n_edges)), 1.0)
        np.add.at(inc, (self.dst, np.arange(self.n_edges)), 1.0)
        self.incidence = inc

    def edges_from_dense(self, E):
        """(..., N, N, F) -> (..., n_edges, F)."""
        E = tc.as_tensor(E)
        n = self.n_nodes
        flat = tc.reshape(E, E.shape[:-3] + (n * n, E.shape[-1]))
        return tc.take(flat, self.flat_edge, axis=-2)

    def edges_to_dense(self, X):
        """(..., n_edges, F) -> (..., N, N, F) with zeros off the edge set."""
        X = tc.as_tensor(X)
        pad = Tensor(np.zeros(X.shape[:-2] + (1, X.shape[-1]), dtype=X.dtype))
        padded = tc.concat([X, pad], axis=-2)
        return tc.take(padded, self.dense_index, axis=-2)


def _expand(x, axis):
    """Insert a unit axis (negative index counted on the output)."""
    shape = list(x.shape)
    pos = axis % (len(shape) + 1)
    shape.insert(pos, 1)
    return tc.reshape(x, tuple(shape))


class SlotTable:
    """Who each row attends to: ``nb[r, s]`` is the neighbour in slot s and
    ``ca``/``cb`` the two context rows averaged into the third score slot."""

    def __init__(self, nb, ca, cb, valid):
        self.nb = np.ascontiguousarray(nb, dtype=np.intp)
        self.ca = np.ascontiguousarray(ca, dtype=np.intp)
        self.cb = np.ascontiguousarray(cb, dtype=np.intp)
        self.valid = np.ascontiguousarray(valid, dtype=np.uint8)
        self.mask = self.valid.astype(bool)


def pair_scores(P, Q, Cc, beta, slots, slope=0.2):
    """scores[..., r, s, h] = beta_h . LeakyReLU(P[r] + Q[nb] + (Cc[ca] + Cc[cb]) / 2).

    P: (..., R, h*H), Q: (..., U, h*H), Cc: (..., W, h*H), beta: (h, H).
    Invalid slots get NEG_INF and no gradient. Fused forward/backward kernel.
    """
    P, Q, Cc, beta = (tc.as_tensor(t) for t in (P, Q, Cc, beta))
    lead = P.shape[:-2]
    if Q.shape[:-2] != lead or Cc.shape[:-2] != lead:
        raise ValueError(f"pair_scores: leading shapes differ {P.shape} {Q.shape} {Cc.shape}")
    width = P.shape[-1]
    heads = beta.shape[0]
    if Q.shape[-1] != width or Cc.shape[-1] != width or heads * beta.shape[1] != width:
        raise ValueError(f"pair_scores: widths differ {P.shape} {Q.shape} {Cc.shape} beta {beta.shape}")
    dt = P.dtype
    p3 = np.ascontiguousarray(P.data.reshape((-1,) + P.shape[-2:]))
    q3 = np.ascontiguousarray(Q.data.reshape((-1,) + Q.shape[-2:]), dtype=dt)
    c3 = np.ascontiguousarray(Cc.data.reshape((-1,) + Cc.shape[-2:]), dtype=dt)
    b2 = np.ascontiguousarray(beta.data, dtype=dt)
    R, S = slots.nb.shape
    out = np.empty((p3.shape[0], R, S, heads), dtype=dt)
    kernels.pair_scores_forward(p3, q3, c3, b2, slots.nb, slots.ca, slots.cb, slots.valid, slope, NEG_INF, out)

    def back(g):
        g4 = np.ascontiguousarray(g.reshape(out.shape), dtype=dt)
        gP, gQ, gC = np.zeros_like(p3), np.zeros_like(q3), np.zeros_like(c3)
        gb = np.zeros_like(b2)
        kernels.pair_scores_backward(g4, p3, q3, c3, b2, slots.nb, slots.ca, slots.cb, slots.valid, slope,
                                     gP, gQ, gC, gb)
        return gP.reshape(P.shape), gQ.reshape(Q.shape), gC.reshape(Cc.shape), gb.astype(beta.dtype)

    return tc._make(out.reshape(lead + (R, S, heads)), (P, Q, Cc, beta), back, "pair_scores")


def node_attention_core(V, X, index, Wc, beta, Wv, heads, slope=0.2, return_weights=False):
    """Multi-head edge-aware node attention.

    V: (..., N, F_v) node features; X: (..., n_edges, F_e) edge features.
    Wc: (2F_v + F_e, h*H) score projection (split into the v_i, v_u, e_iu
    blocks), beta: (h, H), Wv: (F_v, h*d_h). Returns (..., N, h*d_h) with the
    heads concatenated (no output projection).
    """
    if not index.has_self_loops:
        raise ValueError("node attention needs self-loops on every node")
    fv = V.shape[-1]
    a = tc.matmul(V, Wc[:fv])
    b = tc.matmul(V, Wc[fv:2 * fv])
    c = tc.matmul(X, Wc[2 * fv:])
    scores = pair_scores(a, b, c, beta, index.node_slots, slope)   # (..., N, N, h)
    alpha = tc.softmax(scores, axis=-2)
    vals = tc.matmul(V, Wv)
    vals = tc.swapaxes(tc.reshape(vals, vals.shape[:-1] + (heads, vals.shape[-1] // heads)), -2, -3)
    # alpha (..., N_i, N_u, h) -> (..., h, N_i, N_u)
    nd = alpha.ndim
    alpha_h = tc.transpose(alpha, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))
    out = _merge_heads(tc.matmul(alpha_h, vals))
    return (out, alpha) if return_weights else out


def edge_attention_core(X, Vn, index, Wc, beta, Wv, heads, slope=0.2, return_weights=False):
    """Edge attention with node and edge roles exchanged.

    Edge e attends over the edges sharing an endpoint with it; the shared
    endpoint's feature (mean of both when two are shared) fills the third
    score slot. X: (..., n_edges, F_x); Vn: (..., N, F_n);
    Wc: (2F_x + F_n, h*H). Returns (..., n_edges, h*d_h).
    """
    fx = X.shape[-1]
    a = tc.matmul(X, Wc[:fx])
    b = tc.matmul(X, Wc[fx:2 * fx])
    c = tc.matmul(Vn, Wc[2 * fx:])
    scores = pair_scores(a, b, c, beta, index.edge_slots, slope)    # (..., nE, S, h)
    alpha = tc.softmax(scores, axis=-2)
    vals = tc.matmul(X, Wv)
    dh = vals.shape[-1] // heads
    vals_nb = tc.take(vals, index.edge_nb, axis=-2)               # (..., nE, S, h*dh)
    vals_nb = tc.reshape(vals_nb, vals_nb.shape[:-1] + (heads, dh))
    out = tc.tsum(_expand(alpha, -1) * vals_nb, axis=-3)          # (..., nE, h, dh)
    out = tc.reshape(out, out.shape[:-2] + (heads * dh,))
    return (out, alpha) if return_weights else out


@dataclass
class GraphAttentionParams:
    """Single-head weights: W_c (3d x (2F_v+F_e)), beta (3d,), W_v (d x F_v)."""

    W_c: Tensor
    beta: Tensor
    W_v: Tensor

    @classmethod
    def init(cls, rng, f_v, f_e, d, dtype=np.float64):
        return cls(init_weight(rng, 2 * f_v + f_e, 3 * d, shape=(3 * d, 2 * f_v + f_e), dtype=dtype),
                   tc.parameter(rng.normal(0, 1 / np.sqrt(3 * d), size=3 * d).astype(dtype)),
                   init_weight(rng, f_v, d, shape=(d, f_v), dtype=dtype))

    def as_core(self):
        d3 = self.beta.shape[0]
        return tc.transpose(self.W_c), tc.reshape(self.beta, (1, d3)), tc.transpose(self.W_v)


def graph_node_attention(V, E, A, params, slope=0.2, return_weights=False, index=None):
    """Edge-aware graph attention on nodes; E is dense (..., N, N, F_e).

    Returns (..., N, d); with ``return_weights`` also the (..., N, N) weights.
    """
    index = index or GraphIndex(A)
    V = tc.as_tensor(V)
    X = index.edges_from_dense(E)
    Wc, beta, Wv = params.as_core()
    out, alpha = node_attention_core(V, X, index, Wc, beta, Wv, 1, slope, return_weights=True)
    if return_weights:
        return out, tc.reshape(alpha, alpha.shape[:-1])
    return out


def graph_edge_attention(E, V_updated, A, params, slope=0.2, return_weights=False, index=None):
    """Edge-level counterpart: edges attend over edges sharing an endpoint.

    Returns dense (..., N, N, d), zero where A is zero. With
    ``return_weights`` also returns the (..., n_edges, S) slot weights and the
    GraphIndex that names the slots.
    """
    index = index or GraphIndex(A)
    X = index.edges_from_dense(E)
    Wc, beta, Wv = params.as_core()
    out, alpha = edge_attention_core(X, tc.as_tensor(V_updated), index, Wc, beta, Wv, 1, slope, return_weights=True)
    dense = index.edges_to_dense(out)
    if return_weights:
        return dense, tc.reshape(alpha, alpha.shape[:-1]), index
    return dense


class GraphNodeAttention(Module):
    """Multi-head node attention plus the output projection W_O."""

    def __init__(self, rng, f_v, f_e, d_model, heads, slope=0.2, dtype=np.float64):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible into {heads} heads")
        dh = d_model // heads
        self.heads, self.slope = heads, slope
        self.Wc = init_weight(rng, 2 * f_v + f_e, 3 * d_model, dtype=dtype)
        self.beta = tc.parameter(rng.normal(0, 1 / np.sqrt(3 * dh), size=(heads, 3 * dh)).astype(dtype))
        self.Wv = init_weight(rng, f_v, d_model, dtype=dtype)
        self.W_O = init_weight(rng, d_model, d_model, dtype=dtype)

    def __call__(self, V, X, index):
        out = node_attention_core(V, X, index, self.Wc, self.beta, self.Wv, self.heads, self.slope)
        return tc.matmul(out, self.W_O)


class GraphEdgeAttention(GraphNodeAttention):
    def __init__(self, rng, f_x, f_n, d_model, heads, slope=0.2, dtype=np.float64):
        super().__init__(rng, f_x, f_n, d_model, heads, slope, dtype)

    def __call__(self, X, Vn, index):
        out = edge_attention_core(X, Vn, index, self.Wc, self.beta, self.Wv, self.heads, self.slope)
        return tc.matmul(out, self.W_O)

"""Reference numpy implementations of the compiled kernels."""
import numpy as np


def scatter_add_rows(out, idx, src):
    """``out[idx[r]] += src[r]`` for every row r, duplicates accumulated."""
    if src.shape[0] != idx.shape[0] or out.shape[1] != src.shape[1]:
        raise ValueError("scatter_add_rows: shape mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= out.shape[0]):
        raise IndexError("scatter_add_rows: index out of range")
    np.add.at(out, idx, src)


def accumulate(out, flat_idx, weights):
    if weights.shape[0] != flat_idx.shape[0]:
        raise ValueError("accumulate: length mismatch")
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= out.shape[0]):
        raise IndexError("accumulate: index out of range")
    out += np.bincount(flat_idx, weights=weights, minlength=out.shape[0])


def seq_similarity(tokens, template, wildcard):
    """Count (literal matches, wildcard slots); (0, 0) for length mismatch."""
    if len(template) != len(tokens):
        return 0, 0
    same = wild = 0
    for tok, tpl in zip(tokens, template):
        if tpl == wildcard:
            wild += 1
        elif tpl == tok:
            same += 1
    return same, wild


def _pre(P, Q, Cc, nb, ca, cb):
    return P[:, :, None, :] + Q[:, nb, :] + 0.5 * (Cc[:, ca, :] + Cc[:, cb, :])


def pair_scores_forward(P, Q, Cc, beta, nb, ca, cb, valid, slope, fill, out):
    """out[g, r, s, h] = sum_j beta[h, j] * leaky(P[g, r] + Q[g, nb[r, s]] + mean(Cc[g, ca], Cc[g, cb]))."""
    heads, H = beta.shape
    pre = _pre(P, Q, Cc, nb, ca, cb)
    act = np.where(pre > 0, pre, pre * slope).reshape(pre.shape[:3] + (heads, H))
    scores = (act * beta).sum(axis=-1)
    out[...] = np.where(valid.astype(bool)[None, :, :, None], scores, fill)


def pair_scores_backward(grad, P, Q, Cc, beta, nb, ca, cb, valid, slope, gP, gQ, gC, gbeta):
    heads, H = beta.shape
    G, R, S = grad.shape[:3]
    pre = _pre(P, Q, Cc, nb, ca, cb).reshape(G, R, S, heads, H)
    g = grad * valid.astype(grad.dtype)[None, :, :, None]
    pos = pre > 0
    act = np.where(pos, pre, pre * slope)
    gbeta += np.einsum("grsh,grshj->hj", g, act)
    t = (g[..., None] * beta * np.where(pos, 1.0, slope)).reshape(G, R, S, heads * H)
    gP += t.sum(axis=2)
    gQ_t = np.zeros((Q.shape[1], G, heads * H), dtype=t.dtype)
    np.add.at(gQ_t, nb.reshape(-1), np.moveaxis(t.reshape(G, R * S, -1), 1, 0))
    gQ += np.moveaxis(gQ_t, 0, 1)
    gC_t = np.zeros((Cc.shape[1], G, heads * H), dtype=t.dtype)
    half = np.moveaxis(0.5 * t.reshape(G, R * S, -1), 1, 0)
    np.add.at(gC_t, ca.reshape(-1), half)
    np.add.at(gC_t, cb.reshape(-1), half)
    gC += np.moveaxis(gC_t, 0, 1)

# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled inner loops. Same API as ``_kernels_py``."""

ctypedef fused real:
    float
    double


def scatter_add_rows(real[:, ::1] out, const Py_ssize_t[::1] idx, const real[:, ::1] src):
    cdef Py_ssize_t r, c, row
    cdef Py_ssize_t nrows = idx.shape[0]
    cdef Py_ssize_t ncols = src.shape[1]
    cdef Py_ssize_t limit = out.shape[0]
    if src.shape[0] != nrows or out.shape[1] != ncols:
        raise ValueError("scatter_add_rows: shape mismatch")
    for r in range(nrows):
        row = idx[r]
        if row < 0 or row >= limit:
            raise IndexError(f"scatter_add_rows: index {row} out of range")
    with nogil:
        for r in range(nrows):
            row = idx[r]
            for c in range(ncols):
                out[row, c] += src[r, c]


def accumulate(double[::1] out, const Py_ssize_t[::1] flat_idx, const double[::1] weights):
    cdef Py_ssize_t r, pos
    cdef Py_ssize_t n = flat_idx.shape[0]
    cdef Py_ssize_t limit = out.shape[0]
    if weights.shape[0] != n:
        raise ValueError("accumulate: length mismatch")
    for r in range(n):
        pos = flat_idx[r]
        if pos < 0 or pos >= limit:
            raise IndexError(f"accumulate: index {pos} out of range")
    with nogil:
        for r in range(n):
            out[flat_idx[r]] += weights[r]


def seq_similarity(list tokens, list template, str wildcard):
    cdef Py_ssize_t i, n = len(tokens)
    cdef Py_ssize_t same = 0, wild = 0
    cdef object tpl_tok
    if len(template) != n:
        return 0, 0
    for i in range(n):
        tpl_tok = template[i]
        if tpl_tok == wildcard:
            wild += 1
        elif tpl_tok == tokens[i]:
            same += 1
    return same, wild


def pair_scores_forward(const real[:, :, ::1] P, const real[:, :, ::1] Q, const real[:, :, ::1] Cc,
                        const real[:, ::1] beta, const Py_ssize_t[:, ::1] nb, const Py_ssize_t[:, ::1] ca,
                        const Py_ssize_t[:, ::1] cb, const unsigned char[:, ::1] valid, double slope,
                        double fill, real[:, :, :, ::1] out):
    cdef Py_ssize_t G = P.shape[0], R = nb.shape[0], S = nb.shape[1]
    cdef Py_ssize_t heads = beta.shape[0], H = beta.shape[1]
    cdef Py_ssize_t g, r, s, hh, j, col, u, a, b
    cdef double x, acc
    _check_pairs(P.shape[0], P.shape[1], P.shape[2], Q.shape[0], Q.shape[1], Q.shape[2],
                 Cc.shape[0], Cc.shape[1], Cc.shape[2], heads * H, nb, ca, cb, valid)
    with nogil:
        for g in range(G):
            for r in range(R):
                for s in range(S):
                    if not valid[r, s]:
                        for hh in range(heads):
                            out[g, r, s, hh] = <real>fill
                        continue
                    u = nb[r, s]
                    a = ca[r, s]
                    b = cb[r, s]
                    for hh in range(heads):
                        acc = 0.0
                        for j in range(H):
                            col = hh * H + j
                            x = P[g, r, col] + Q[g, u, col] + 0.5 * (Cc[g, a, col] + Cc[g, b, col])
                            if x < 0:
                                x = x * slope
                            acc = acc + beta[hh, j] * x
                        out[g, r, s, hh] = <real>acc


def pair_scores_backward(const real[:, :, :, ::1] grad, const real[:, :, ::1] P, const real[:, :, ::1] Q,
                         const real[:, :, ::1] Cc, const real[:, ::1] beta, const Py_ssize_t[:, ::1] nb,
                         const Py_ssize_t[:, ::1] ca, const Py_ssize_t[:, ::1] cb,
                         const unsigned char[:, ::1] valid, double slope,
                         real[:, :, ::1] gP, real[:, :, ::1] gQ, real[:, :, ::1] gC, real[:, ::1] gbeta):
    cdef Py_ssize_t G = P.shape[0], R = nb.shape[0], S = nb.shape[1]
    cdef Py_ssize_t heads = beta.shape[0], H = beta.shape[1]
    cdef Py_ssize_t g, r, s, hh, j, col, u, a, b
    cdef double x, gs, t, act, d
    _check_pairs(P.shape[0], P.shape[1], P.shape[2], Q.shape[0], Q.shape[1], Q.shape[2],
                 Cc.shape[0], Cc.shape[1], Cc.shape[2], heads * H, nb, ca, cb, valid)
    with nogil:
        for g in range(G):
            for r in range(R):
                for s in range(S):
                    if not valid[r, s]:
                        continue
                    u = nb[r, s]
                    a = ca[r, s]
                    b = cb[r, s]
                    for hh in range(heads):
                        gs = grad[g, r, s, hh]
                        if gs == 0.0:
                            continue
                        for j in range(H):
                            col = hh * H + j
                            x = P[g, r, col] + Q[g, u, col] + 0.5 * (Cc[g, a, col] + Cc[g, b, col])
                            if x < 0:
                                act = x * slope
                                d = slope
                            else:
                                act = x
                                d = 1.0
                            gbeta[hh, j] += <real>(gs * act)
                            t = gs * beta[hh, j] * d
                            gP[g, r, col] += <real>t
                            gQ[g, u, col] += <real>t
                            gC[g, a, col] += <real>(0.5 * t)
                            gC[g, b, col] += <real>(0.5 * t)


cdef _check_pairs(Py_ssize_t pg, Py_ssize_t pr, Py_ssize_t pw, Py_ssize_t qg, Py_ssize_t qu, Py_ssize_t qw,
                  Py_ssize_t cg, Py_ssize_t cu, Py_ssize_t cw, Py_ssize_t width,
                  const Py_ssize_t[:, ::1] nb, const Py_ssize_t[:, ::1] ca, const Py_ssize_t[:, ::1] cb,
                  const unsigned char[:, ::1] valid):
    cdef Py_ssize_t r, s
    if not (pg == qg == cg) or not (pw == qw == cw == width):
        raise ValueError("pair_scores: operand shapes disagree")
    if pr != nb.shape[0] or ca.shape[0] != nb.shape[0] or cb.shape[0] != nb.shape[0] or valid.shape[0] != nb.shape[0]:
        raise ValueError("pair_scores: slot table shapes disagree")
    for r in range(nb.shape[0]):
        for s in range(nb.shape[1]):
            if nb[r, s] < 0 or nb[r, s] >= qu or ca[r, s] < 0 or ca[r, s] >= cu or cb[r, s] < 0 or cb[r, s] >= cu:
                raise IndexError("pair_scores: slot index out of range")

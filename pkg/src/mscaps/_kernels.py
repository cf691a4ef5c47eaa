"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is picked once at import time. Set ``MSCAPS_NUMBA=0`` to force
the numpy path (or ``1`` to require numba). Both paths take and return
float64 arrays with identical shapes; results agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("MSCAPS_NUMBA", "auto").strip().lower()

try:
    if _flag in ("0", "false", "off", "no"):
        raise ImportError("numba disabled by MSCAPS_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    if _flag in ("1", "true", "on", "yes"):
        raise
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"

_jit_opts = {"nogil": True, "cache": True, "fastmath": False, "boundscheck": False}


# ---------------------------------------------------------------------------
# numpy reference path

def _im2col_np(xp, k, dilation, stride, ho, wo):
    # xp: [B, Hp, Wp, C] -> [B, ho, wo, k, k, C]
    b, _, _, c = xp.shape
    out = np.empty((b, ho, wo, k, k, c))
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            r0 = i * dilation
            c0 = j * dilation
            out[:, :, :, i, j, :] = xp[:, r0:r0 + span_h:stride, c0:c0 + span_w:stride, :]
    return out


def _col2im_np(cols, hp, wp, dilation, stride):
    b, ho, wo, k, _, c = cols.shape
    out = np.zeros((b, hp, wp, c))
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            r0 = i * dilation
            c0 = j * dilation
            out[:, r0:r0 + span_h:stride, c0:c0 + span_w:stride, :] += cols[:, :, :, i, j, :]
    return out


def _squash_np(s):
    # s: [N, d]
    sq = np.einsum("nd,nd->n", s, s)
    norm = np.sqrt(sq)
    scale = np.divide(norm, 1.0 + sq, out=np.zeros_like(norm), where=norm > 0)
    return s * scale[:, None]


def _squash_grad_np(s, g):
    sq = np.einsum("nd,nd->n", s, s)
    norm = np.sqrt(sq)
    f = norm / (1.0 + sq)
    # f'(n)/n, only defined away from zero; the term it multiplies vanishes there
    fp_over_n = np.divide(1.0 - sq, (1.0 + sq) ** 2 * norm, out=np.zeros_like(norm), where=norm > 0)
    sg = np.einsum("nd,nd->n", s, g)
    return g * f[:, None] + s * (fp_over_n * sg)[:, None]


def _fcm_memberships_np(x, v, m):
    # x: [n], v: [c] -> u: [n, c]
    d = np.abs(x[:, None] - v[None, :])
    zero = d == 0.0
    hit = zero.any(axis=1)
    expo = 2.0 / (m - 1.0)
    with np.errstate(divide="ignore"):
        inv = np.where(zero, 0.0, d ** (-expo))
    u = inv / np.where(hit, 1.0, inv.sum(axis=1))[:, None]
    if hit.any():
        first = np.argmax(zero[hit], axis=1)
        rows = np.zeros((int(hit.sum()), v.shape[0]))
        rows[np.arange(rows.shape[0]), first] = 1.0
        u[hit] = rows
    return u


def _routing_fwd_np(u, iters):
    # u: [I, N, J, E] (slot-major); returns v [N, J, E] plus per-iteration c, s, v
    i_n, n, j_n, e_n = u.shape
    b = np.zeros((n, i_n, j_n))
    cs = np.empty((iters, n, i_n, j_n))
    ss = np.empty((iters, n, j_n, e_n))
    vs = np.empty((iters, n, j_n, e_n))
    for t in range(iters):
        z = np.exp(b - b.max(axis=2, keepdims=True))
        c = z / z.sum(axis=2, keepdims=True)
        s = np.einsum("nij,inje->nje", c, u)
        v = _squash_np(s.reshape(-1, e_n)).reshape(s.shape)
        cs[t], ss[t], vs[t] = c, s, v
        if t < iters - 1:
            b = b + np.einsum("inje,nje->nij", u, v)
    return vs[-1].copy(), cs, ss, vs


def _routing_bwd_np(u, cs, ss, vs, gv):
    iters = cs.shape[0]
    e_n = u.shape[3]
    gu = np.zeros_like(u)
    gb = np.zeros(cs.shape[1:])
    for t in range(iters - 1, -1, -1):
        if t == iters - 1:
            gvt = gv
        else:
            gvt = np.einsum("nij,inje->nje", gb, u)
            gu += np.einsum("nij,nje->inje", gb, vs[t])
        gs = _squash_grad_np(ss[t].reshape(-1, e_n), gvt.reshape(-1, e_n)).reshape(gvt.shape)
        c = cs[t]
        gu += np.einsum("nij,nje->inje", c, gs)
        gc = np.einsum("nje,inje->nij", gs, u)
        gb = gb + c * (gc - (c * gc).sum(axis=2, keepdims=True))
    return gu


def _confusion_np(pred, truth):
    p = pred.astype(bool).ravel()
    t = truth.astype(bool).ravel()
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, tn, fp, fn


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(**_jit_opts)
    def _im2col_nb(xp, k, dilation, stride, ho, wo):
        b, _, _, c = xp.shape
        out = np.empty((b, ho, wo, k, k, c))
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    for i in range(k):
                        r = y * stride + i * dilation
                        for j in range(k):
                            q = x * stride + j * dilation
                            for ch in range(c):
                                out[n, y, x, i, j, ch] = xp[n, r, q, ch]
        return out

    @njit(**_jit_opts)
    def _col2im_nb(cols, hp, wp, dilation, stride):
        b, ho, wo, k, _, c = cols.shape
        out = np.zeros((b, hp, wp, c))
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    for i in range(k):
                        r = y * stride + i * dilation
                        for j in range(k):
                            q = x * stride + j * dilation
                            for ch in range(c):
                                out[n, r, q, ch] += cols[n, y, x, i, j, ch]
        return out

    @njit(**_jit_opts)
    def _squash_nb(s):
        n, d = s.shape
        out = np.zeros_like(s)
        for a in range(n):
            sq = 0.0
            for e in range(d):
                sq += s[a, e] * s[a, e]
            if sq > 0.0:
                scale = np.sqrt(sq) / (1.0 + sq)
                for e in range(d):
                    out[a, e] = s[a, e] * scale
        return out

    @njit(**_jit_opts)
    def _squash_grad_nb(s, g):
        n, d = s.shape
        out = np.zeros_like(s)
        for a in range(n):
            sq = 0.0
            sg = 0.0
            for e in range(d):
                sq += s[a, e] * s[a, e]
                sg += s[a, e] * g[a, e]
            if sq > 0.0:
                norm = np.sqrt(sq)
                f = norm / (1.0 + sq)
                coef = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq) * norm) * sg
                for e in range(d):
                    out[a, e] = g[a, e] * f + s[a, e] * coef
        return out

    @njit(**_jit_opts)
    def _fcm_memberships_nb(x, v, m):
        n = x.shape[0]
        c = v.shape[0]
        expo = 2.0 / (m - 1.0)
        u = np.zeros((n, c))
        for a in range(n):
            hit = -1
            for i in range(c):
                if x[a] == v[i]:
                    hit = i
                    break
            if hit >= 0:
                u[a, hit] = 1.0
                continue
            total = 0.0
            for i in range(c):
                w = np.abs(x[a] - v[i]) ** (-expo)
                u[a, i] = w
                total += w
            for i in range(c):
                u[a, i] /= total
        return u

    @njit(**_jit_opts)
    def _routing_fwd_nb(u, iters):
        i_n, n, j_n, e_n = u.shape
        cs = np.empty((iters, n, i_n, j_n))
        ss = np.zeros((iters, n, j_n, e_n))
        vs = np.zeros((iters, n, j_n, e_n))
        b = np.zeros((i_n, j_n))
        ua = np.empty((i_n, j_n, e_n))
        for a in range(n):
            b[:, :] = 0.0
            ua[:, :, :] = u[:, a]
            for t in range(iters):
                c = cs[t, a]
                s = ss[t, a]
                for i in range(i_n):
                    mx = b[i, 0]
                    for j in range(1, j_n):
                        if b[i, j] > mx:
                            mx = b[i, j]
                    tot = 0.0
                    for j in range(j_n):
                        z = np.exp(b[i, j] - mx)
                        c[i, j] = z
                        tot += z
                    for j in range(j_n):
                        c[i, j] /= tot
                        w = c[i, j]
                        for e in range(e_n):
                            s[j, e] += w * ua[i, j, e]
                v = vs[t, a]
                for j in range(j_n):
                    sq = 0.0
                    for e in range(e_n):
                        sq += s[j, e] * s[j, e]
                    scale = np.sqrt(sq) / (1.0 + sq) if sq > 0.0 else 0.0
                    for e in range(e_n):
                        v[j, e] = s[j, e] * scale
                if t < iters - 1:
                    for i in range(i_n):
                        for j in range(j_n):
                            acc = 0.0
                            for e in range(e_n):
                                acc += ua[i, j, e] * v[j, e]
                            b[i, j] += acc
        return vs[iters - 1].copy(), cs, ss, vs

    @njit(**_jit_opts)
    def _routing_bwd_nb(u, cs, ss, vs, gv):
        iters = cs.shape[0]
        i_n, n, j_n, e_n = u.shape
        gu = np.zeros_like(u)
        gb = np.zeros((i_n, j_n))
        gvt = np.empty((j_n, e_n))
        gs = np.empty((j_n, e_n))
        ua = np.empty((i_n, j_n, e_n))
        ga = np.empty((i_n, j_n, e_n))
        for a in range(n):
            gb[:, :] = 0.0
            ua[:, :, :] = u[:, a]
            ga[:, :, :] = 0.0
            for t in range(iters - 1, -1, -1):
                v = vs[t, a]
                s = ss[t, a]
                c = cs[t, a]
                if t == iters - 1:
                    for j in range(j_n):
                        for e in range(e_n):
                            gvt[j, e] = gv[a, j, e]
                else:
                    gvt[:, :] = 0.0
                    for i in range(i_n):
                        for j in range(j_n):
                            g = gb[i, j]
                            for e in range(e_n):
                                gvt[j, e] += g * ua[i, j, e]
                                ga[i, j, e] += g * v[j, e]
                for j in range(j_n):
                    sq = 0.0
                    sg = 0.0
                    for e in range(e_n):
                        sq += s[j, e] * s[j, e]
                        sg += s[j, e] * gvt[j, e]
                    if sq > 0.0:
                        nrm = np.sqrt(sq)
                        f = nrm / (1.0 + sq)
                        coef = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq) * nrm) * sg
                        for e in range(e_n):
                            gs[j, e] = gvt[j, e] * f + s[j, e] * coef
                    else:
                        for e in range(e_n):
                            gs[j, e] = 0.0
                for i in range(i_n):
                    dot = 0.0
                    for j in range(j_n):
                        w = c[i, j]
                        acc = 0.0
                        for e in range(e_n):
                            ga[i, j, e] += w * gs[j, e]
                            acc += gs[j, e] * ua[i, j, e]
                        # stash d(loss)/dc in gb's slot after folding the carry
                        gb[i, j] = gb[i, j] + w * acc
                        dot += w * acc
                    for j in range(j_n):
                        gb[i, j] -= c[i, j] * dot
            gu[:, a] = ga
        return gu

    @njit(**_jit_opts)
    def _confusion_nb(pred, truth):
        tp = 0
        tn = 0
        fp = 0
        fn = 0
        for a in range(pred.shape[0]):
            p = pred[a] != 0
            t = truth[a] != 0
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
        return tp, tn, fp, fn


# ---------------------------------------------------------------------------
# public entry points

def im2col(xp: np.ndarray, k: int, dilation: int, stride: int, ho: int, wo: int) -> np.ndarray:
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    if HAVE_NUMBA:
        return _im2col_nb(xp, k, dilation, stride, ho, wo)
    return _im2col_np(xp, k, dilation, stride, ho, wo)


def col2im(cols: np.ndarray, hp: int, wp: int, dilation: int, stride: int) -> np.ndarray:
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if HAVE_NUMBA:
        return _col2im_nb(cols, hp, wp, dilation, stride)
    return _col2im_np(cols, hp, wp, dilation, stride)


def squash_rows(s: np.ndarray) -> np.ndarray:
    s = np.ascontiguousarray(s, dtype=np.float64)
    if HAVE_NUMBA:
        return _squash_nb(s)
    return _squash_np(s)


def squash_rows_grad(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    s = np.ascontiguousarray(s, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if HAVE_NUMBA:
        return _squash_grad_nb(s, g)
    return _squash_grad_np(s, g)


def fcm_memberships(x: np.ndarray, v: np.ndarray, m: float) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if HAVE_NUMBA:
        return _fcm_memberships_nb(x, v, float(m))
    return _fcm_memberships_np(x, v, float(m))


def confusion_counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    """Return (TP, TN, FP, FN) for two equally-shaped binary arrays."""
    if HAVE_NUMBA:
        p = (np.asarray(pred) != 0).astype(np.uint8).ravel()
        t = (np.asarray(truth) != 0).astype(np.uint8).ravel()
        tp, tn, fp, fn = _confusion_nb(p, t)
        return int(tp), int(tn), int(fp), int(fn)
    return _confusion_np(pred, truth)


def routing_forward(u: np.ndarray, iters: int):
    """Unrolled routing-by-agreement on slot-major [I, N, J, E] predictions.

    Returns (v, c_per_iter, s_per_iter, v_per_iter).
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    if HAVE_NUMBA:
        return _routing_fwd_nb(u, int(iters))
    return _routing_fwd_np(u, int(iters))


def routing_backward(u, cs, ss, vs, gv) -> np.ndarray:
    """Gradient w.r.t. the [I, N, J, E] predictions, through every iteration."""
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (u, cs, ss, vs, gv)]
    if HAVE_NUMBA:
        return _routing_bwd_nb(*args)
    return _routing_bwd_np(*args)

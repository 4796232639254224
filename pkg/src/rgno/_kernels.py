"""Fused single-pass kernels for the memory-bound inner loops.

Each kernel has a numpy fallback with identical semantics; numba only removes
intermediate array passes. All loops are sequential (single-threaded), so
accumulation order is fixed and results are run-to-run deterministic.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(fn):
            return fn

        return deco


@njit(cache=True, fastmath=True)
def _seg_sum_add(vals, idx, out):
    b_n, e_n, f_n = vals.shape
    for b in range(b_n):
        for e in range(e_n):
            r = idx[e]
            for f in range(f_n):
                out[b, r, f] += vals[b, e, f]


def segment_sum(vals: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of (B, E, F) into (B, n_rows, F) by index; any index order."""
    out = np.zeros((vals.shape[0], n_rows, vals.shape[2]), dtype=vals.dtype)
    if idx.size == 0:
        return out
    if HAVE_NUMBA:
        _seg_sum_add(np.ascontiguousarray(vals), idx, out)
        return out
    np.add.at(out, (slice(None), idx), vals)
    return out


@njit(cache=True, fastmath=True)
def _seg_mean_fwd(vals, idx, inv_counts, out):
    b_n, e_n, f_n = vals.shape
    for b in range(b_n):
        for e in range(e_n):
            r = idx[e]
            w = inv_counts[r]
            for f in range(f_n):
                out[b, r, f] += vals[b, e, f] * w


def segment_mean_forward(vals, recv, n_rows):
    """(mean-aggregated output, float counts); empty slots stay zero."""
    counts = np.bincount(recv, minlength=n_rows).astype(vals.dtype)
    inv_counts = 1.0 / np.maximum(counts, 1.0)
    out = np.zeros((vals.shape[0], n_rows, vals.shape[2]), dtype=vals.dtype)
    if recv.size == 0:
        return out, counts
    if HAVE_NUMBA:
        _seg_mean_fwd(np.ascontiguousarray(vals), recv, inv_counts, out)
        return out, counts
    np.add.at(out, (slice(None), recv), vals)
    out *= inv_counts[:, None]
    return out, counts


@njit(cache=True, fastmath=True)
def _seg_mean_bw(g, recv, inv_counts, gv):
    b_n, e_n, f_n = gv.shape
    for b in range(b_n):
        for e in range(e_n):
            r = recv[e]
            w = inv_counts[r]
            for f in range(f_n):
                gv[b, e, f] = g[b, r, f] * w


def segment_mean_backward(g, recv, counts):
    gv = np.empty((g.shape[0], recv.shape[0], g.shape[2]), dtype=g.dtype)
    if recv.size == 0:
        return gv
    inv_counts = 1.0 / np.maximum(counts, 1.0)
    if HAVE_NUMBA:
        _seg_mean_bw(np.ascontiguousarray(g), recv, inv_counts, gv)
        return gv
    gv[:] = g[:, recv, :] * inv_counts[recv][:, None]
    return gv


def swish_forward(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(z * sigmoid(z), sigmoid(z)); the sigmoid is reused by the backward pass."""
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


@njit(cache=True, fastmath=True)
def _swish_bw(z, s, g, gz):
    b_n, e_n, f_n = z.shape
    for b in range(b_n):
        for e in range(e_n):
            for f in range(f_n):
                sv = s[b, e, f]
                gz[b, e, f] = g[b, e, f] * (sv * (1.0 + z[b, e, f] * (1.0 - sv)))


def swish_backward(z: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and z.ndim == 3 and g.shape == z.shape:
        gz = np.empty_like(z)
        _swish_bw(z, s, np.ascontiguousarray(g), gz)
        return gz
    gz = 1.0 - s
    gz *= z
    gz += 1.0
    gz *= s
    gz = gz * g
    return gz


@njit(cache=True, fastmath=True)
def _cln_fwd(x, gmul, ladd, eps, mean, inv, out):
    bx_n, e_n, f_n = x.shape
    b_n = out.shape[0]
    bg_n = gmul.shape[0]
    for bx in range(bx_n):
        for e in range(e_n):
            m = 0.0
            for f in range(f_n):
                m += x[bx, e, f]
            m /= f_n
            v = 0.0
            for f in range(f_n):
                d = x[bx, e, f] - m
                v += d * d
            r = 1.0 / np.sqrt(v / f_n + eps)
            mean[bx, e] = m
            inv[bx, e] = r
    for b in range(b_n):
        bx = b if bx_n > 1 else 0
        bg = b if bg_n > 1 else 0
        for e in range(e_n):
            m = mean[bx, e]
            r = inv[bx, e]
            for f in range(f_n):
                xt = (x[bx, e, f] - m) * r
                out[b, e, f] = xt * (1.0 + gmul[bg, 0, f]) + ladd[bg, 0, f]


@njit(cache=True, fastmath=True)
def _cln_bw(g, x, gmul, mean, inv, gx, g_gmul, g_ladd):
    """Recomputes the normalized rows on the fly; one pass over g and x."""
    b_n, e_n, f_n = g.shape
    bx_n = x.shape[0]
    bg_n = gmul.shape[0]
    shared_x = bx_n == 1 and b_n > 1
    for b in range(b_n):
        bx = b if bx_n > 1 else 0
        bg = b if bg_n > 1 else 0
        for e in range(e_n):
            m = mean[bx, e]
            r = inv[bx, e]
            gm = 0.0
            gym = 0.0
            for f in range(f_n):
                xt = (x[bx, e, f] - m) * r
                gv = g[b, e, f]
                g_ladd[bg, 0, f] += gv
                g_gmul[bg, 0, f] += gv * xt
                gxt = gv * (1.0 + gmul[bg, 0, f])
                gm += gxt
                gym += gxt * xt
            gm /= f_n
            gym /= f_n
            for f in range(f_n):
                xt = (x[bx, e, f] - m) * r
                gxt = g[b, e, f] * (1.0 + gmul[bg, 0, f])
                contrib = r * (gxt - gm - xt * gym)
                if shared_x:
                    gx[bx, e, f] += contrib
                else:
                    gx[bx, e, f] = contrib


def cond_layer_norm_forward(x, gmul, ladd, eps):
    """Row-normalize the last axis, then scale by (1 + gmul) and shift by ladd.

    ``x`` is (Bx, E, F) with Bx in {1, B}; ``gmul``/``ladd`` are (Bg, 1, F).
    Returns (out, mean, inv); the normalized rows are recomputed from these in
    the backward pass instead of being stored.
    """
    b_n = max(x.shape[0], gmul.shape[0])
    if HAVE_NUMBA:
        x = np.ascontiguousarray(x)
        mean = np.empty(x.shape[:2], dtype=x.dtype)
        inv = np.empty(x.shape[:2], dtype=x.dtype)
        out = np.empty((b_n, x.shape[1], x.shape[2]), dtype=x.dtype)
        _cln_fwd(x, np.ascontiguousarray(gmul), np.ascontiguousarray(ladd),
                 eps, mean, inv, out)
        return out, mean, inv
    mean = x.mean(axis=-1)
    xc = x - mean[..., None]
    var = (xc * xc).mean(axis=-1)
    inv = 1.0 / np.sqrt(var + eps)
    xt = xc * inv[..., None]
    out = xt * (1.0 + gmul) + ladd
    return out, mean, inv


def cond_layer_norm_backward(g, x, mean, inv, gmul):
    """Gradients (gx, g_gmul, g_ladd) of the fused conditioned normalization."""
    if HAVE_NUMBA:
        g = np.ascontiguousarray(g)
        shared_x = x.shape[0] == 1 and g.shape[0] > 1
        gx = np.zeros_like(x) if shared_x else np.empty_like(x)
        g_gmul = np.zeros_like(gmul)
        g_ladd = np.zeros_like(gmul)
        _cln_bw(g, x, np.ascontiguousarray(gmul), mean, inv, gx, g_gmul, g_ladd)
        return gx, g_gmul, g_ladd
    xt = (x - mean[..., None]) * inv[..., None]
    g_ladd = g.sum(axis=1, keepdims=True)
    if gmul.shape[0] == 1 and g.shape[0] > 1:
        g_ladd = g_ladd.sum(axis=0, keepdims=True)
    gxt_full = g * (1.0 + gmul)
    if xt.shape[0] == g.shape[0]:
        g_gmul = (g * xt).sum(axis=1, keepdims=True)
        gxt = gxt_full
    else:
        g_gmul = (g * xt[0]).sum(axis=1, keepdims=True)
        gxt = gxt_full.sum(axis=0, keepdims=True)
    if gmul.shape[0] == 1 and g_gmul.shape[0] > 1:
        g_gmul = g_gmul.sum(axis=0, keepdims=True)
    gm = gxt.mean(axis=-1, keepdims=True)
    gym = (gxt * xt).mean(axis=-1, keepdims=True)
    gx = inv[..., None] * (gxt - gm - xt * gym)
    return gx, g_gmul, g_ladd


@njit(cache=True, fastmath=True)
def _msg_pre(ps, pr, ep, send, recv, bias, z):
    b_n, e_n, f_n = z.shape
    ps_b = ps.shape[0] > 1
    pr_b = pr.shape[0] > 1
    ep_b = ep.shape[0] > 1
    for b in range(b_n):
        bs = b if ps_b else 0
        br = b if pr_b else 0
        be = b if ep_b else 0
        for e in range(e_n):
            s = send[e]
            r = recv[e]
            for f in range(f_n):
                z[b, e, f] = ps[bs, s, f] + pr[br, r, f] + ep[be, e, f] + bias[f]


def message_preactivation(ps, pr, ep, send, recv, bias):
    """Gather projected sender/receiver rows onto edges and add the edge part.

    Batch axes of extent 1 broadcast against the others.
    """
    b_n = max(ps.shape[0], pr.shape[0], ep.shape[0])
    if HAVE_NUMBA:
        z = np.empty((b_n, ep.shape[1], ep.shape[2]), dtype=ep.dtype)
        _msg_pre(np.ascontiguousarray(ps), np.ascontiguousarray(pr),
                 np.ascontiguousarray(ep), send, recv, bias, z)
        return z
    return ps[:, send, :] + pr[:, recv, :] + ep + bias


@njit(cache=True, fastmath=True)
def _gather_rows(x, idx, out):
    b_n, e_n, f_n = out.shape
    for b in range(b_n):
        for e in range(e_n):
            r = idx[e]
            for f in range(f_n):
                out[b, e, f] = x[b, r, f]


def gather_rows(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and x.ndim == 3 and x.flags.c_contiguous:
        out = np.empty((x.shape[0], idx.shape[0], x.shape[2]), dtype=x.dtype)
        _gather_rows(x, idx, out)
        return out
    return x[..., idx, :]

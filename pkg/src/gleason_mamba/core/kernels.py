"""Inner loops: the diagonal linear-recurrence scan (forward and reverse)
and depthwise 2-D cross-correlation (forward and backward).

Every kernel has a numpy implementation (``*_numpy``) and, when numba is
importable and not disabled, a jitted twin (``*_numba``). The public names
point at whichever is active.
"""
import numpy as np

from .._accel import HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# scan: h_t = a_t * h_{t-1} + u_t ; y_t[d] = sum_n c_t[n] * h_t[d, n]
# shapes: a, u (N, L, D, S); c (N, L, S); h0 (N, D, S)
# ---------------------------------------------------------------------------


def scan_forward_numpy(a, u, c, h0):
    N, L, D, S = a.shape
    h = np.empty_like(a)
    prev = h0
    for t in range(L):
        prev = a[:, t] * prev + u[:, t]
        h[:, t] = prev
    y = np.einsum("nlds,nls->nld", h, c)
    return h, y


def _scan_forward_loops(a, u, c, h0):
    N, L, D, S = a.shape
    h = np.empty_like(a)
    y = np.zeros((N, L, D))
    for i in range(N):
        for d in range(D):
            for s in range(S):
                prev = h0[i, d, s]
                for t in range(L):
                    prev = a[i, t, d, s] * prev + u[i, t, d, s]
                    h[i, t, d, s] = prev
        for t in range(L):
            for d in range(D):
                acc = 0.0
                for s in range(S):
                    acc += h[i, t, d, s] * c[i, t, s]
                y[i, t, d] = acc
    return h, y


def scan_reverse_numpy(a, dy, c):
    """Adjoint of the recurrence: g_t = dy_t * c_t + a_{t+1} * g_{t+1}."""
    N, L, D, S = a.shape
    g = np.empty_like(a)
    nxt = np.zeros((N, D, S))
    for t in range(L - 1, -1, -1):
        cur = dy[:, t, :, None] * c[:, t, None, :]
        if t + 1 < L:
            cur = cur + a[:, t + 1] * nxt
        g[:, t] = cur
        nxt = cur
    return g


def _scan_reverse_loops(a, dy, c):
    N, L, D, S = a.shape
    g = np.empty_like(a)
    for i in range(N):
        for d in range(D):
            for s in range(S):
                nxt = 0.0
                for t in range(L - 1, -1, -1):
                    cur = dy[i, t, d] * c[i, t, s]
                    if t + 1 < L:
                        cur = cur + a[i, t + 1, d, s] * nxt
                    g[i, t, d, s] = cur
                    nxt = cur
    return g


# ---------------------------------------------------------------------------
# depthwise cross-correlation, zero "same" padding, odd square kernels
# x (B, C, H, W); w (C, K, K)
# ---------------------------------------------------------------------------


def dwconv_forward_numpy(x, w):
    B, C, H, W = x.shape
    K = w.shape[-1]
    r = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    y = np.zeros_like(x)
    for p in range(K):
        for q in range(K):
            y += xp[:, :, p:p + H, q:q + W] * w[None, :, p, q, None, None]
    return y


def _dwconv_forward_loops(x, w):
    B, C, H, W = x.shape
    K = w.shape[-1]
    r = K // 2
    y = np.zeros_like(x)
    for b in range(B):
        for ch in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for p in range(K):
                        ii = i + p - r
                        if ii < 0 or ii >= H:
                            continue
                        for q in range(K):
                            jj = j + q - r
                            if jj < 0 or jj >= W:
                                continue
                            acc += x[b, ch, ii, jj] * w[ch, p, q]
                    y[b, ch, i, j] = acc
    return y


def dwconv_backward_numpy(x, w, dy):
    B, C, H, W = x.shape
    K = w.shape[-1]
    r = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for p in range(K):
        for q in range(K):
            dw[:, p, q] = np.einsum("bchw,bchw->c", dy, xp[:, :, p:p + H, q:q + W])
            dxp[:, :, p:p + H, q:q + W] += dy * w[None, :, p, q, None, None]
    return dxp[:, :, r:r + H, r:r + W], dw


def _dwconv_backward_loops(x, w, dy):
    B, C, H, W = x.shape
    K = w.shape[-1]
    r = K // 2
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for b in range(B):
        for ch in range(C):
            for i in range(H):
                for j in range(W):
                    g = dy[b, ch, i, j]
                    for p in range(K):
                        ii = i + p - r
                        if ii < 0 or ii >= H:
                            continue
                        for q in range(K):
                            jj = j + q - r
                            if jj < 0 or jj >= W:
                                continue
                            dx[b, ch, ii, jj] += g * w[ch, p, q]
                            dw[ch, p, q] += g * x[b, ch, ii, jj]
    return dx, dw


scan_forward_numba = njit(_scan_forward_loops)
scan_reverse_numba = njit(_scan_reverse_loops)
dwconv_forward_numba = njit(_dwconv_forward_loops)
dwconv_backward_numba = njit(_dwconv_backward_loops)

if HAVE_NUMBA:
    scan_forward = scan_forward_numba
    scan_reverse = scan_reverse_numba
    dwconv_forward = dwconv_forward_numba
    dwconv_backward = dwconv_backward_numba
else:
    scan_forward = scan_forward_numpy
    scan_reverse = scan_reverse_numpy
    dwconv_forward = dwconv_forward_numpy
    dwconv_backward = dwconv_backward_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"

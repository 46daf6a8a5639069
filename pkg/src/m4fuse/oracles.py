"""Slow, independent reference implementations used to check the fast paths.

Everything here is written with explicit loops or dense algebra in float64
numpy and shares no code with the operations it verifies.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv3d_loops(x, w, b=None, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c_in, d, h, wd = x.shape
    c_out, _, kd, kh, kw = w.shape
    p = padding
    xp = np.zeros((n, c_in, d + 2 * p, h + 2 * p, wd + 2 * p))
    xp[:, :, p : p + d, p : p + h, p : p + wd] = x
    od, oh, ow = d + 2 * p - kd + 1, h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    out = np.zeros((n, c_out, od, oh, ow))
    for bi in range(n):
        for co in range(c_out):
            for i in range(od):
                for j in range(oh):
                    for k in range(ow):
                        acc = 0.0 if b is None else float(b[co])
                        for ci in range(c_in):
                            acc += float((xp[bi, ci, i : i + kd, j : j + kh, k : k + kw] * w[co, ci]).sum())
                        out[bi, co, i, j, k] = acc
    return out


def maxpool_loops(x):
    x = np.asarray(x, dtype=np.float64)
    n, c, d, h, w = x.shape
    out = np.empty((n, c, d // 2, h // 2, w // 2))
    for idx in itertools.product(range(n), range(c), range(d // 2), range(h // 2), range(w // 2)):
        bi, ci, i, j, k = idx
        out[idx] = max(
            x[bi, ci, 2 * i + a, 2 * j + bb, 2 * k + cc] for a in (0, 1) for bb in (0, 1) for cc in (0, 1)
        )
    return out


def _linear_taps(n_in, i):
    # half-voxel source coordinate for output index i at scale 2, clamped at the low edge
    src = max((i + 0.5) / 2.0 - 0.5, 0.0)
    lo = min(int(math.floor(src)), n_in - 1)
    hi = min(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def upsample_loops(x):
    x = np.asarray(x, dtype=np.float64)
    n, c, d, h, w = x.shape
    out = np.empty((n, c, 2 * d, 2 * h, 2 * w))
    for i, j, k in itertools.product(range(2 * d), range(2 * h), range(2 * w)):
        di = _linear_taps(d, i)
        hj = _linear_taps(h, j)
        wk = _linear_taps(w, k)
        acc = 0.0
        for zi, zw in ((di[0], 1 - di[2]), (di[1], di[2])):
            for yi, yw in ((hj[0], 1 - hj[2]), (hj[1], hj[2])):
                for xi, xw in ((wk[0], 1 - wk[2]), (wk[1], wk[2])):
                    acc = acc + zw * yw * xw * x[:, :, zi, yi, xi]
        out[:, :, i, j, k] = acc
    return out


def group_norm_loops(x, groups, gain, bias, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    n, c = x.shape[:2]
    per = c // groups
    out = np.empty_like(x)
    for bi in range(n):
        for g in range(groups):
            block = x[bi, g * per : (g + 1) * per]
            mu = block.sum() / block.size
            var = ((block - mu) ** 2).sum() / block.size
            for ci in range(g * per, (g + 1) * per):
                out[bi, ci] = (x[bi, ci] - mu) / math.sqrt(var + eps) * gain[ci] + bias[ci]
    return out


def layer_norm_loops(s, gain, bias, eps=1e-5):
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    for bi, k in itertools.product(range(s.shape[0]), range(s.shape[1])):
        row = s[bi, k]
        mu = row.sum() / row.size
        var = ((row - mu) ** 2).sum() / row.size
        out[bi, k] = (row - mu) / math.sqrt(var + eps) * np.asarray(gain) + np.asarray(bias)
    return out


def discretize_quadrature(a, delta, b_in, n=200_001):
    """Trapezoid rule for ``int_0^delta exp(a*tau) dtau`` times ``b_in``, diagonal A."""
    a = np.asarray(a, dtype=np.float64)
    tau = np.linspace(0.0, delta, n)
    vals = np.exp(np.outer(a, tau))
    step = delta / (n - 1)
    integral = step * (vals.sum(axis=1) - 0.5 * (vals[:, 0] + vals[:, -1]))
    return np.exp(a * delta), integral[:, None] * np.asarray(b_in, dtype=np.float64)


def scan_dense(x, abar, bbar, c_out):
    """Per-step dense-matrix recursion ``h = A h + B x_k; y_k = C h``."""
    x = np.asarray(x, dtype=np.float64)
    a_mat = np.diag(np.asarray(abar, dtype=np.float64)) if np.ndim(abar) == 1 else np.asarray(abar)
    bbar = np.asarray(bbar, dtype=np.float64)
    c_out = np.asarray(c_out, dtype=np.float64)
    n, length, _ = x.shape
    y = np.zeros((n, length, c_out.shape[0]))
    for bi in range(n):
        h = np.zeros(a_mat.shape[0])
        for k in range(length):
            h = a_mat @ h + bbar @ x[bi, k]
            y[bi, k] = c_out @ h
    return y


def mixer_reference(v, ln_in, groups, s, ln_out, proj, eps=1e-5):
    """Un-grouped mixer: one block-diagonal state space over all channels at once.

    ``groups`` is a list of ``(abar, bbar, c_out)`` per channel group.
    """
    v = np.asarray(v, dtype=np.float64)
    n, c, d, h, w = v.shape
    seq = np.empty((n, d * h * w, c))
    for bi, ci, i, j, k in itertools.product(range(n), range(c), range(d), range(h), range(w)):
        seq[bi, i * h * w + j * w + k, ci] = v[bi, ci, i, j, k]
    x = layer_norm_loops(seq, *ln_in, eps=eps)
    dims = [len(g[0]) for g in groups]
    widths = [g[1].shape[1] for g in groups]
    a_big = np.zeros((sum(dims), sum(dims)))
    b_big = np.zeros((sum(dims), c))
    c_big = np.zeros((c, sum(dims)))
    r = q = 0
    for (abar, bbar, cmat), dj, wj in zip(groups, dims, widths):
        a_big[r : r + dj, r : r + dj] = np.diag(abar)
        b_big[r : r + dj, q : q + wj] = bbar
        c_big[q : q + wj, r : r + dj] = cmat
        r += dj
        q += wj
    z = scan_dense(x, a_big, b_big, c_big) + s * x
    z = layer_norm_loops(z, *ln_out, eps=eps)
    u = z @ np.asarray(proj, dtype=np.float64)
    out = np.empty((n, u.shape[2], d, h, w))
    for bi, ci, i, j, k in itertools.product(range(n), range(u.shape[2]), range(d), range(h), range(w)):
        out[bi, ci, i, j, k] = u[bi, i * h * w + j * w + k, ci]
    return out


def dice_bruteforce(a, b):
    a = np.asarray(a, dtype=bool).ravel()
    b = np.asarray(b, dtype=bool).ravel()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def _boundary_loops(mask):
    mask = np.asarray(mask, dtype=bool)
    pts = []
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def hd95_bruteforce(a, b, spacing=(1.0, 1.0, 1.0)):
    """All-pairs boundary distances, pooled both ways, 95th percentile by linear interpolation."""
    sp = np.asarray(spacing, dtype=np.float64)
    pa = _boundary_loops(a) * sp
    pb = _boundary_loops(b) * sp
    dists = []
    for src, dst in ((pa, pb), (pb, pa)):
        for p in src:
            dists.append(min(math.dist(p, q) for q in dst))
    dists.sort()
    pos = 0.95 * (len(dists) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(dists) - 1)
    return dists[lo] + (pos - lo) * (dists[hi] - dists[lo])

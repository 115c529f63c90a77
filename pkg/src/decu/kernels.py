"""Hot numeric kernels, each in a pure-numpy and a numba flavour.

The public names at the bottom dispatch to the numba flavour unless
``DECU_NUMBA=0``. Both flavours are importable under their suffixed names so
they can be benchmarked and cross-checked against each other.
"""

import math

import numpy as np

from decu._jit import USE_NUMBA, njit


# --------------------------------------------------------------------------
# pairwise distance matrices
# --------------------------------------------------------------------------

def pairwise_w2_numpy(means, stds):
    """M x M matrix of squared 2-Wasserstein distances between diagonal Gaussians.

    ``stds`` holds per-dimension standard deviations (square roots of the
    variances). The diagonal is exactly zero.
    """
    dm = means[:, None, :] - means[None, :, :]
    ds = stds[:, None, :] - stds[None, :, :]
    out = np.sum(dm * dm, axis=-1) + np.sum(ds * ds, axis=-1)
    np.fill_diagonal(out, 0.0)
    return out


@njit
def pairwise_w2_numba(means, stds):
    m, d = means.shape
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            mt = 0.0
            vt = 0.0
            for k in range(d):
                a = means[i, k] - means[j, k]
                b = stds[i, k] - stds[j, k]
                mt += a * a
                vt += b * b
            out[i, j] = mt + vt
            out[j, i] = mt + vt
    return out


# --------------------------------------------------------------------------
# pairwise-distance estimator from a distance matrix
# --------------------------------------------------------------------------
#
# ln sum_j w_j exp(-D_ij) is evaluated as log1p(-s_i) with
# s_i = sum_{j != i} w_j * (1 - exp(-D_ij)), using D_ii = 0. s_i >= 0 so every
# row term is <= 0 and the estimate is >= 0 without cancellation; for large
# distances the terms tend to w_j exactly, so the row saturates at ln w_i.

def paide_from_distances_numpy(dist, weights):
    dist = np.asarray(dist, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    disagree = -np.expm1(-dist)
    np.fill_diagonal(disagree, 0.0)
    s = disagree @ w
    rows = np.log1p(-np.minimum(s, 1.0))
    val = -float(np.dot(w, rows))
    return min(max(val, 0.0), math.log(len(w)))


@njit
def paide_from_distances_numba(dist, weights):
    m = weights.shape[0]
    total = 0.0
    for i in range(m):
        s = 0.0
        for j in range(m):
            if j != i:
                s += weights[j] * (-math.expm1(-dist[i, j]))
        if s > 1.0:
            s = 1.0
        total += weights[i] * math.log1p(-s)
    val = -total
    if val < 0.0:
        val = 0.0
    cap = math.log(m)
    if val > cap:
        val = cap
    return val


def paide_point_batch_numpy(points, weights):
    """Estimator with squared-Euclidean distances for a batch of point ensembles.

    ``points`` has shape (B, M, d): B independent ensembles of M zero-variance
    Gaussians in d dimensions. Returns shape (B,).
    """
    points = np.asarray(points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    diff = points[:, :, None, :] - points[:, None, :, :]
    dist = np.sum(diff * diff, axis=-1)
    disagree = -np.expm1(-dist)
    m = w.shape[0]
    disagree[:, np.arange(m), np.arange(m)] = 0.0
    s = np.minimum(disagree @ w, 1.0)
    vals = -(np.log1p(-s) @ w)
    return np.clip(vals, 0.0, math.log(m))


@njit
def paide_point_batch_numba(points, weights):
    nb, m, d = points.shape
    out = np.empty(nb)
    dist = np.zeros((m, m))
    for b in range(nb):
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for k in range(d):
                    a = points[b, i, k] - points[b, j, k]
                    acc += a * a
                dist[i, j] = acc
                dist[j, i] = acc
        out[b] = paide_from_distances_numba(dist, weights)
    return out


# --------------------------------------------------------------------------
# Gaussian mixture log-density
# --------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def mixture_logpdf_numpy(y, means, variances, log_weights):
    """log sum_j w_j N(y; mu_j, diag var_j) for each row of ``y`` (n, d)."""
    y = np.asarray(y, dtype=np.float64)
    n, d = y.shape
    out = np.empty(n)
    norm = -0.5 * (d * _LOG_2PI + np.sum(np.log(variances), axis=1))
    inv = 1.0 / variances
    chunk = 8192
    for s in range(0, n, chunk):
        yy = y[s:s + chunk]
        diff = yy[:, None, :] - means[None, :, :]
        comp = log_weights + norm - 0.5 * np.sum(diff * diff * inv[None], axis=-1)
        top = np.max(comp, axis=1)
        out[s:s + chunk] = top + np.log(np.sum(np.exp(comp - top[:, None]), axis=1))
    return out


@njit
def mixture_logpdf_numba(y, means, variances, log_weights):
    n, d = y.shape
    m = means.shape[0]
    norm = np.empty(m)
    for j in range(m):
        acc = d * _LOG_2PI
        for k in range(d):
            acc += math.log(variances[j, k])
        norm[j] = -0.5 * acc
    out = np.empty(n)
    comp = np.empty(m)
    for s in range(n):
        top = -np.inf
        for j in range(m):
            q = 0.0
            for k in range(d):
                a = y[s, k] - means[j, k]
                q += a * a / variances[j, k]
            comp[j] = log_weights[j] + norm[j] - 0.5 * q
            if comp[j] > top:
                top = comp[j]
        acc = 0.0
        for j in range(m):
            acc += math.exp(comp[j] - top)
        out[s] = top + math.log(acc)
    return out


# --------------------------------------------------------------------------
# windowed SSIM over image pairs
# --------------------------------------------------------------------------

def ssim_batch_numpy(a, b, win, c1, c2):
    """Mean SSIM between ``a[n]`` and ``b[n]`` over all win x win windows (stride 1).

    Window statistics are uniform-weight population moments.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    wa = sliding_window_view(a, (win, win), axis=(-2, -1))
    wb = sliding_window_view(b, (win, win), axis=(-2, -1))
    ma = wa.mean(axis=(-2, -1))
    mb = wb.mean(axis=(-2, -1))
    va = (wa * wa).mean(axis=(-2, -1)) - ma * ma
    vb = (wb * wb).mean(axis=(-2, -1)) - mb * mb
    cov = (wa * wb).mean(axis=(-2, -1)) - ma * mb
    num = (2.0 * ma * mb + c1) * (2.0 * cov + c2)
    den = (ma * ma + mb * mb + c1) * (va + vb + c2)
    return (num / den).mean(axis=(-2, -1))


@njit
def ssim_batch_numba(a, b, win, c1, c2):
    n, h, w = a.shape
    nh = h - win + 1
    nw = w - win + 1
    inv = 1.0 / (win * win)
    out = np.empty(n)
    for p in range(n):
        total = 0.0
        for r in range(nh):
            for c in range(nw):
                sa = 0.0
                sb = 0.0
                saa = 0.0
                sbb = 0.0
                sab = 0.0
                for i in range(r, r + win):
                    for j in range(c, c + win):
                        x = a[p, i, j]
                        y = b[p, i, j]
                        sa += x
                        sb += y
                        saa += x * x
                        sbb += y * y
                        sab += x * y
                ma = sa * inv
                mb = sb * inv
                va = saa * inv - ma * ma
                vb = sbb * inv - mb * mb
                cov = sab * inv - ma * mb
                num = (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                den = (ma * ma + mb * mb + c1) * (va + vb + c2)
                total += num / den
        out[p] = total / (nh * nw)
    return out


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def _contig(x):
    return np.ascontiguousarray(x, dtype=np.float64)


if USE_NUMBA:
    def pairwise_w2(means, stds):
        return pairwise_w2_numba(_contig(means), _contig(stds))

    def paide_from_distances(dist, weights):
        return float(paide_from_distances_numba(_contig(dist), _contig(weights)))

    def paide_point_batch(points, weights):
        return paide_point_batch_numba(_contig(points), _contig(weights))

    def mixture_logpdf(y, means, variances, log_weights):
        return mixture_logpdf_numba(_contig(y), _contig(means), _contig(variances),
                                    _contig(log_weights))

    def ssim_batch(a, b, win, c1, c2):
        return ssim_batch_numba(_contig(a), _contig(b), int(win), float(c1), float(c2))
else:
    pairwise_w2 = pairwise_w2_numpy
    paide_from_distances = paide_from_distances_numpy
    paide_point_batch = paide_point_batch_numpy
    mixture_logpdf = mixture_logpdf_numpy
    ssim_batch = ssim_batch_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"

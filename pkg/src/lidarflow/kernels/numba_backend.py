"""Numba-compiled versions of the hot inner kernels.

Importing this module triggers no compilation; each kernel compiles lazily
on first call. Semantics match `numpy_backend` (ties to lower index).
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def neighborhood_eigenvalues(points, neighbor_idx):
    n, k = neighbor_idx.shape
    out = np.empty((n, 3))
    for i in prange(n):
        mx = 0.0
        my = 0.0
        mz = 0.0
        for j in range(k):
            p = points[neighbor_idx[i, j]]
            mx += p[0]
            my += p[1]
            mz += p[2]
        mx /= k
        my /= k
        mz /= k
        cov = np.zeros((3, 3))
        for j in range(k):
            p = points[neighbor_idx[i, j]]
            dx = p[0] - mx
            dy = p[1] - my
            dz = p[2] - mz
            cov[0, 0] += dx * dx
            cov[0, 1] += dx * dy
            cov[0, 2] += dx * dz
            cov[1, 1] += dy * dy
            cov[1, 2] += dy * dz
            cov[2, 2] += dz * dz
        cov[1, 0] = cov[0, 1]
        cov[2, 0] = cov[0, 2]
        cov[2, 1] = cov[1, 2]
        w = np.linalg.eigvalsh(cov / k)
        out[i, 0] = w[2]
        out[i, 1] = w[1]
        out[i, 2] = w[0]
    return out


@njit(cache=True, parallel=True)
def octant_mean_pool(rel, attrs):
    n, k, a = attrs.shape
    out = np.zeros((n, 8 * a))
    for i in prange(n):
        counts = np.zeros(8)
        for j in range(k):
            o = 0
            if rel[i, j, 0] >= 0:
                o += 4
            if rel[i, j, 1] >= 0:
                o += 2
            if rel[i, j, 2] >= 0:
                o += 1
            counts[o] += 1.0
            base = o * a
            for c in range(a):
                out[i, base + c] += attrs[i, j, c]
        for o in range(8):
            if counts[o] > 0:
                base = o * a
                for c in range(a):
                    out[i, base + c] /= counts[o]
    return out


@njit(cache=True, parallel=True)
def best_two_neighbors(src, dst):
    ns, d = src.shape
    nd = dst.shape[0]
    best_idx = np.empty(ns, dtype=np.int64)
    d1 = np.empty(ns)
    d2 = np.empty(ns)
    for i in prange(ns):
        b1 = np.inf
        b2 = np.inf
        bi = -1
        for j in range(nd):
            acc = 0.0
            for c in range(d):
                diff = src[i, c] - dst[j, c]
                acc += diff * diff
            if acc < b1:
                b2 = b1
                b1 = acc
                bi = j
            elif acc < b2:
                b2 = acc
        best_idx[i] = bi
        d1[i] = np.sqrt(b1)
        d2[i] = np.sqrt(b2)
    return best_idx, d1, d2

"""Pure-numpy implementations of the hot inner kernels.

These are the reference semantics; the numba backend must agree bitwise up
to floating-point associativity (tests pin agreement at 1e-10).
"""

import numpy as np


def neighborhood_eigenvalues(points, neighbor_idx):
    """Eigenvalues of the covariance of each point's neighborhood.

    points : (n, 3) float64
    neighbor_idx : (n, k) int64, rows index into `points`
    returns (n, 3) float64, eigenvalues sorted descending per row
    """
    gathered = points[neighbor_idx]                     # (n, k, 3)
    mean = gathered.mean(axis=1, keepdims=True)
    centered = gathered - mean
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbor_idx.shape[1]
    eigvals = np.linalg.eigvalsh(cov)                   # ascending
    return eigvals[:, ::-1].copy()


def octant_mean_pool(rel, attrs):
    """Average neighbor attributes per sign-octant.

    rel : (n, k, 3) neighbor coordinates relative to each center point
    attrs : (n, k, a) per-neighbor attribute vectors
    returns (n, 8 * a); empty octants contribute zeros
    """
    n, k, a = attrs.shape
    octant = (
        (rel[:, :, 0] >= 0).astype(np.int64) * 4
        + (rel[:, :, 1] >= 0).astype(np.int64) * 2
        + (rel[:, :, 2] >= 0).astype(np.int64)
    )
    out = np.zeros((n, 8, a))
    counts = np.zeros((n, 8))
    rows = np.repeat(np.arange(n), k)
    occ = octant.ravel()
    np.add.at(out, (rows, occ), attrs.reshape(n * k, a))
    np.add.at(counts, (rows, occ), 1.0)
    nonempty = counts > 0
    out[nonempty] /= counts[nonempty, None]
    return out.reshape(n, 8 * a)


def best_two_neighbors(src, dst):
    """Nearest and second-nearest `dst` row for every `src` row.

    src : (ns, d), dst : (nd, d) float64 feature matrices
    returns (best_idx, d1, d2); with a single dst row d2 = inf.
    Distances are Euclidean; ties go to the lower dst index.
    """
    ns = src.shape[0]
    best_idx = np.empty(ns, dtype=np.int64)
    d1 = np.empty(ns)
    d2 = np.empty(ns)
    dst_sq = np.einsum("ij,ij->i", dst, dst)
    block = max(1, int(2e7) // max(1, dst.shape[0]))
    for start in range(0, ns, block):
        chunk = src[start:start + block]
        sq = (
            np.einsum("ij,ij->i", chunk, chunk)[:, None]
            + dst_sq[None, :]
            - 2.0 * chunk @ dst.T
        )
        np.maximum(sq, 0.0, out=sq)
        idx1 = np.argmin(sq, axis=1)
        rows = np.arange(sq.shape[0])
        v1 = sq[rows, idx1]
        sq[rows, idx1] = np.inf
        if dst.shape[0] > 1:
            v2 = np.min(sq, axis=1)
        else:
            v2 = np.full(sq.shape[0], np.inf)
        best_idx[start:start + block] = idx1
        d1[start:start + block] = np.sqrt(v1)
        d2[start:start + block] = np.sqrt(v2)
    return best_idx, d1, d2

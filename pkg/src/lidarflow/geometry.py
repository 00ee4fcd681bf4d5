"""Rigid-body geometry: SE(3) transforms, the closed-form alignment solver
and point-to-point ICP.

Point clouds are plain ``(n, 3)`` float64 arrays throughout the library;
row order is identity-preserving so per-point flow differences stay
well-defined after warping.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCorrespondences
from .spatial import KdIndex

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation, applied as ``R @ p + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    def is_valid(self, tol=ORTHONORMAL_TOL):
        return (
            np.abs(self.R.T @ self.R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(self.R) - 1.0) <= tol
            and np.all(np.isfinite(self.t))
        )

    def inverse(self):
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def rotation_angle(self):
        """Rotation magnitude in radians."""
        c = (np.trace(self.R) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def validate_cloud(points):
    """Coerce to an (n, 3) float64 array, rejecting NaN/Inf coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def apply_transform(points, transform):
    """Warp every point by ``R @ p + t``, preserving row order."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ transform.R.T + transform.t


def compose(a, b):
    """Transform equivalent to applying ``a`` first, then ``b``."""
    return RigidTransform(b.R @ a.R, b.R @ a.t + b.t)


@dataclass
class Correspondences:
    """Index pairs between a source and destination cloud.

    ``src`` indices are unique within a set; ``dist`` holds the feature- or
    point-space distance that produced each pair.
    """

    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray = field(default=None)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if self.dist is None:
            self.dist = np.zeros(len(self.src))
        self.dist = np.asarray(self.dist, dtype=np.float64)

    def __len__(self):
        return len(self.src)


def rigid_align(src, dst, pairs):
    """Least-squares rigid transform mapping paired src points onto dst.

    Closed-form solution: cross-covariance of the centered pairs, SVD, and
    rotation ``V @ U.T`` with the usual determinant guard (negate the
    singular vector of the smallest singular value when the raw product is
    a reflection, which happens for planar configurations).
    """
    if len(pairs) < 3:
        raise DegenerateCorrespondences(f"need >= 3 pairs, got {len(pairs)}")
    p = np.asarray(src, dtype=np.float64)[pairs.src]
    q = np.asarray(dst, dtype=np.float64)[pairs.dst]
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    cross = (p - p_mean).T @ (q - q_mean)
    try:
        u, s, vt = np.linalg.svd(cross)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise DegenerateCorrespondences(str(exc))
    if s[0] <= 0 or s[1] <= s[0] * 1e-12:
        raise DegenerateCorrespondences("correspondences are collinear")
    # cross = sum (p - p̄)(q - q̄)^T = U S V^T; rotation carries src onto dst
    v = vt.T
    rot = v @ u.T
    if np.linalg.det(rot) < 0:
        v = v.copy()
        v[:, 2] *= -1.0
        rot = v @ u.T
    t = q_mean - rot @ p_mean
    return RigidTransform(rot, t)


def alignment_rms(src, dst, pairs, transform):
    """Root-mean-square residual of the paired points under a transform."""
    p = apply_transform(np.asarray(src)[pairs.src], transform)
    q = np.asarray(dst)[pairs.dst]
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


def icp(src, dst, max_iter=30, tol=1e-4, max_pair_dist=1.0, init=None):
    """Point-to-point ICP, by default from the identity initialization.

    Alternates nearest-neighbor pairing against a kd-index on ``dst`` with
    the closed-form rigid fit. Pairs farther than ``max_pair_dist`` are
    rejected unless that leaves fewer than 3, in which case the gate is
    dropped for the iteration (keeps far-apart inputs from erroring out).
    Returns the transform whose mean nearest-neighbor residual was lowest;
    the per-iteration residual sequence is therefore non-increasing.
    """
    src = validate_cloud(src)
    dst = validate_cloud(dst)
    if len(src) == 0 or len(dst) == 0:
        raise DegenerateCorrespondences("icp requires non-empty clouds")
    index = KdIndex(dst)

    def gated_pairs(transform):
        dist, nn = index.nearest(apply_transform(src, transform))
        keep = dist <= max_pair_dist
        if keep.sum() < 3:
            keep = np.ones(len(src), dtype=bool)
        pairs = Correspondences(np.nonzero(keep)[0], nn[keep], dist[keep])
        return pairs, float(np.mean(dist[keep]))

    best = init if init is not None else RigidTransform.identity()
    _, best_res = gated_pairs(best)
    for _ in range(max_iter):
        pairs, _ = gated_pairs(best)
        candidate = rigid_align(src, dst, pairs)
        _, res = gated_pairs(candidate)
        if res < best_res:
            improvement = best_res - res
            best, best_res = candidate, res
        else:
            improvement = 0.0
        if improvement < tol:
            break
    return best

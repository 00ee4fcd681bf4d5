"""Ego-motion estimation and compensation.

A single pass of view-partitioned feature matching: sample salient points
in both scans, split them into front/left/right/rear views by azimuth,
match learned features per view with a ratio test, and solve one rigid
alignment over the pooled pairs.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NoCorrespondences
from .features import eigen_features, extract_features, geometry_aware_sample
from .geometry import (
    Correspondences,
    RigidTransform,
    alignment_rms,
    apply_transform,
    icp,
    rigid_align,
)
from .spatial import KdIndex

VIEW_NAMES = ("front", "left", "rear", "right")


@dataclass
class EgoConfig:
    sample_size: int = 1024
    top_m: int = 256
    ratio_max: float = 0.9
    eigen_k: int = 32
    trim_fraction: float = 0.25  # residual-trimmed refit: fraction dropped per pass
    trim_passes: int = 5
    max_pair_dist: float = 5.0   # spatial feasibility gate on feature matches
    icp_polish: bool = True      # dense coarse-to-fine polish of the fit
    polish_gates: tuple = (2.0, 1.0, 0.5, 0.3, 0.2, 0.15, 0.1)


@dataclass
class EgoEstimate:
    transform: RigidTransform
    pairs: Correspondences
    residual_rms: float


def view_partition(points, indices):
    """Split sampled indices into the four azimuth views.

    Boundaries at +-45 and +-135 degrees, half-open toward increasing
    angle, so every azimuth lands in exactly one view.
    """
    pts = np.asarray(points, dtype=np.float64)[indices]
    azimuth = np.arctan2(pts[:, 1], pts[:, 0])
    # front [-45, 45), left [45, 135), rear [135, 180] U [-180, -135), right [-135, -45)
    view = np.full(len(pts), 2, dtype=np.int64)
    view[(azimuth >= -np.pi / 4) & (azimuth < np.pi / 4)] = 0
    view[(azimuth >= np.pi / 4) & (azimuth < 3 * np.pi / 4)] = 1
    view[(azimuth >= -3 * np.pi / 4) & (azimuth < -np.pi / 4)] = 3
    indices = np.asarray(indices, dtype=np.int64)
    return [indices[view == v] for v in range(4)]


def match_features(src_feats, dst_feats, top_m, ratio_max):
    """Ratio-tested one-to-one feature matches.

    For each src row, the nearest and second-nearest dst rows in feature
    space; a pair survives iff d1/d2 <= ratio_max. Survivors are taken
    greedily by ascending d1, each dst consumed at most once, capped at
    ``top_m``. Returned src/dst values index into the feature rows.
    """
    src = np.ascontiguousarray(src_feats, dtype=np.float64)
    dst = np.ascontiguousarray(dst_feats, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise NoCorrespondences("empty feature set")
    if not 0 < ratio_max <= 1:
        raise ValueError("ratio_max must be in (0, 1]")
    best, d1, d2 = kernels.best_two_neighbors(src, dst)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(d1 == 0, 0.0, d1 / np.where(d2 > 0, d2, np.inf))
    survivors = np.nonzero(ratio <= ratio_max)[0]
    if len(survivors) == 0:
        raise NoCorrespondences("ratio test rejected all candidate pairs")
    order = survivors[np.argsort(d1[survivors], kind="stable")]
    used = np.zeros(len(dst), dtype=bool)
    src_keep, dst_keep, dist_keep = [], [], []
    for i in order:
        j = best[i]
        if used[j]:
            continue
        used[j] = True
        src_keep.append(i)
        dst_keep.append(j)
        dist_keep.append(d1[i])
        if len(src_keep) == top_m:
            break
    return Correspondences(
        np.array(src_keep, dtype=np.int64),
        np.array(dst_keep, dtype=np.int64),
        np.array(dist_keep),
    )


def estimate_ego(cloud_t, cloud_t1, model, config=None, eigen_t=None, eigen_t1=None):
    """Estimate the sensor's rigid motion between two scans.

    Returns the EgoEstimate plus the eigen features of both clouds (they
    are reused by the scene classifier downstream).
    """
    config = config or EgoConfig()
    cloud_t = np.asarray(cloud_t, dtype=np.float64)
    cloud_t1 = np.asarray(cloud_t1, dtype=np.float64)
    index_t = KdIndex(cloud_t)
    index_t1 = KdIndex(cloud_t1)
    if eigen_t is None:
        eigen_t, _ = eigen_features(cloud_t, config.eigen_k, index_t)
    if eigen_t1 is None:
        eigen_t1, _ = eigen_features(cloud_t1, config.eigen_k, index_t1)

    sel_t = geometry_aware_sample(cloud_t, config.sample_size, eigen_t)
    sel_t1 = geometry_aware_sample(cloud_t1, config.sample_size, eigen_t1)
    views_t = view_partition(cloud_t, sel_t)
    views_t1 = view_partition(cloud_t1, sel_t1)

    feats_t = extract_features(model, cloud_t, targets=sel_t, index=index_t)
    feats_t1 = extract_features(model, cloud_t1, targets=sel_t1, index=index_t1)
    pos_t = {int(i): row for row, i in enumerate(sel_t)}
    pos_t1 = {int(i): row for row, i in enumerate(sel_t1)}

    per_view_budget = max(1, config.top_m // 4)
    src_all, dst_all, dist_all = [], [], []
    for view_t, view_t1 in zip(views_t, views_t1):
        if len(view_t) == 0 or len(view_t1) == 0:
            continue
        rows_t = np.array([pos_t[int(i)] for i in view_t])
        rows_t1 = np.array([pos_t1[int(i)] for i in view_t1])
        try:
            pairs = match_features(
                feats_t[rows_t], feats_t1[rows_t1],
                per_view_budget, config.ratio_max,
            )
        except NoCorrespondences:
            continue
        src_all.append(view_t[pairs.src])
        dst_all.append(view_t1[pairs.dst])
        dist_all.append(pairs.dist)
    if not src_all:
        raise NoCorrespondences("no view produced any feature matches")
    pooled = Correspondences(
        np.concatenate(src_all), np.concatenate(dst_all), np.concatenate(dist_all)
    )
    # spatial feasibility: the platform cannot jump farther than a few
    # meters between scans, so wildly separated matches are mismatches
    if config.max_pair_dist > 0:
        sep = np.linalg.norm(
            cloud_t[pooled.src] - cloud_t1[pooled.dst], axis=1
        )
        keep = sep <= config.max_pair_dist
        if keep.sum() >= 3:
            pooled = Correspondences(
                pooled.src[keep], pooled.dst[keep], pooled.dist[keep]
            )
    transform = rigid_align(cloud_t, cloud_t1, pooled)
    if config.trim_fraction > 0:
        for _ in range(config.trim_passes):
            if len(pooled) < 5:
                break
            warped = apply_transform(cloud_t[pooled.src], transform)
            residual = np.linalg.norm(warped - cloud_t1[pooled.dst], axis=1)
            cut = np.quantile(residual, 1.0 - config.trim_fraction)
            keep = residual <= cut
            if keep.sum() < 3:
                break
            pooled = Correspondences(
                pooled.src[keep], pooled.dst[keep], pooled.dist[keep]
            )
            transform = rigid_align(cloud_t, cloud_t1, pooled)
    # coarse-to-fine dense polish: the feature fit seeds a short ICP whose
    # shrinking pair gate progressively excludes moving objects (their
    # residual stays near the object speed while the static mass locks in)
    if config.icp_polish:
        for gate in config.polish_gates:
            transform = icp(
                cloud_t, cloud_t1, max_iter=10, tol=1e-5,
                max_pair_dist=gate, init=transform,
            )
    rms = alignment_rms(cloud_t, cloud_t1, pooled, transform)
    estimate = EgoEstimate(transform=transform, pairs=pooled, residual_rms=rms)
    return estimate, eigen_t, eigen_t1


def compensate(cloud_t, ego):
    """Warp scan t into the t+1 frame; row identity is preserved."""
    return apply_transform(cloud_t, ego.transform)

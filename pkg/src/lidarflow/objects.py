"""Object discovery and association.

Moving points are clustered with DBSCAN, clusters are associated across
the two scans by nearest centroids, and labels are refined by a
radius-neighborhood sweep over the originally moving points.
"""

from dataclasses import dataclass, field

import numpy as np

from .sceneclass import MOVING, STATIC, SceneLabeling
from .spatial import KdIndex

OUTLIER = -1


@dataclass
class Clustering:
    """Per-point cluster ids (-1 = outlier) over a point subset."""

    labels: np.ndarray          # cluster id per clustered point
    centroids: np.ndarray       # (n_clusters, 3)
    eps: float
    min_pts: int
    point_indices: np.ndarray = None   # indices into the parent cloud

    @property
    def n_clusters(self):
        return len(self.centroids)

    def members(self, cid):
        """Parent-cloud indices of one cluster."""
        mask = self.labels == cid
        if self.point_indices is None:
            return np.nonzero(mask)[0]
        return self.point_indices[mask]


def dbscan(points, eps, min_pts):
    """Classic DBSCAN with deterministic seed order (ascending index).

    Core points have >= min_pts neighbors within eps (self included);
    clusters grow by density reachability; border points join the first
    core point that discovers them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return Clustering(np.empty(0, dtype=np.int64), np.empty((0, 3)),
                          eps, min_pts)
    index = KdIndex(pts)
    neighborhoods = index.radius_batch(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])
    UNDEFINED = -2
    labels = np.full(n, UNDEFINED, dtype=np.int64)
    next_id = 0
    for seed in range(n):
        if labels[seed] != UNDEFINED:
            continue
        if not core[seed]:
            labels[seed] = OUTLIER   # may become a border point later
            continue
        labels[seed] = next_id
        frontier = list(neighborhoods[seed])
        head = 0
        while head < len(frontier):
            q = frontier[head]
            head += 1
            if labels[q] == OUTLIER:
                labels[q] = next_id   # border point joins this cluster
                continue
            if labels[q] != UNDEFINED:
                continue
            labels[q] = next_id
            if core[q]:
                frontier.extend(neighborhoods[q])
        next_id += 1
    labels[labels == UNDEFINED] = OUTLIER
    centroids = np.array(
        [pts[labels == cid].mean(axis=0) for cid in range(next_id)]
    ).reshape(next_id, 3)
    return Clustering(labels, centroids, eps, min_pts)


@dataclass
class ObjectPair:
    """A source cluster associated with its nearest destination cluster."""

    obj_id: int
    src_members: np.ndarray
    dst_members: np.ndarray
    src_centroid: np.ndarray
    dst_centroid: np.ndarray
    centroid_dist: float


def associate(clustering_t, clustering_t1, assoc_max=5.0):
    """Map each source cluster to its nearest destination centroid.

    Many-to-one is allowed. Pairs farther apart than ``assoc_max`` are
    dropped (their points fall back to static handling downstream).
    """
    pairs = []
    if clustering_t.n_clusters == 0 or clustering_t1.n_clusters == 0:
        return pairs
    diffs = (
        clustering_t.centroids[:, None, :] - clustering_t1.centroids[None, :, :]
    )
    dist = np.linalg.norm(diffs, axis=2)
    nearest = np.argmin(dist, axis=1)
    for cid in range(clustering_t.n_clusters):
        did = int(nearest[cid])
        d = float(dist[cid, did])
        if d > assoc_max:
            continue
        pairs.append(ObjectPair(
            obj_id=cid,
            src_members=clustering_t.members(cid),
            dst_members=clustering_t1.members(did),
            src_centroid=clustering_t.centroids[cid],
            dst_centroid=clustering_t1.centroids[did],
            centroid_dist=d,
        ))
    return pairs


def refine_objects(labeling, points, r):
    """Flip static points within radius r of any originally moving point.

    Single, non-transitive sweep: only points moving *before* the call
    spread the label, so a chain of static points is not absorbed.
    """
    if r <= 0:
        raise ValueError("refinement radius must be positive")
    labels = np.asarray(labeling.labels)
    moving_idx = np.nonzero(labels == MOVING)[0]
    out = labeling.copy()
    if len(moving_idx) == 0:
        return out
    pts = np.asarray(points, dtype=np.float64)
    index = KdIndex(pts[moving_idx])
    static_idx = np.nonzero(labels == STATIC)[0]
    if len(static_idx) == 0:
        return out
    dist, _ = index.nearest(pts[static_idx])
    out.labels[static_idx[dist <= r]] = MOVING
    return out


def outliers_to_static(clustering, labeling):
    """Demote DBSCAN outliers back to the static set."""
    out = labeling.copy()
    if clustering.point_indices is None:
        outlier_points = np.nonzero(clustering.labels == OUTLIER)[0]
    else:
        outlier_points = clustering.point_indices[clustering.labels == OUTLIER]
    out.labels[outlier_points] = STATIC
    return out


def split_extended_clusters(clustering, points, extent_max, shrink=0.5):
    """Re-cluster clusters whose bounding-box diagonal exceeds extent_max.

    A cluster that stretches far beyond a plausible single-body size has
    likely bridged several rigid bodies; re-running DBSCAN over just its
    members with a smaller radius separates bodies that only touched
    through a thin bridge.  Sub-cluster outliers become clustering
    outliers.  Returns a new Clustering over the same point subset.
    """
    pts = np.asarray(points, dtype=np.float64)
    labels = clustering.labels.copy()
    next_id = 0
    remap = {}
    for cid in range(clustering.n_clusters):
        mask = clustering.labels == cid
        member_pts = (
            pts[clustering.point_indices[mask]]
            if clustering.point_indices is not None else pts[mask]
        )
        extent = float(
            np.linalg.norm(member_pts.max(axis=0) - member_pts.min(axis=0))
        )
        if extent <= extent_max:
            remap[cid] = next_id
            next_id += 1
            continue
        sub = dbscan(member_pts, clustering.eps * shrink, clustering.min_pts)
        sub_labels = np.where(
            sub.labels == OUTLIER, OUTLIER, sub.labels + next_id
        )
        labels[mask] = sub_labels
        next_id += sub.n_clusters
    for cid, new_cid in remap.items():
        labels[clustering.labels == cid] = new_cid
    centroids = np.array([
        (
            pts[clustering.point_indices[labels == cid]]
            if clustering.point_indices is not None
            else pts[labels == cid]
        ).mean(axis=0)
        for cid in range(next_id)
    ]).reshape(next_id, 3)
    return Clustering(labels, centroids, clustering.eps, clustering.min_pts,
                      point_indices=clustering.point_indices)


def cluster_moving(points, labeling, eps=0.75, min_pts=10):
    """DBSCAN over the moving subset, reporting parent-cloud indices."""
    moving_idx = np.nonzero(labeling.moving_mask)[0]
    sub = dbscan(np.asarray(points, dtype=np.float64)[moving_idx], eps, min_pts)
    sub.point_indices = moving_idx
    sub.centroids = sub.centroids  # centroids are in parent coordinates already
    return sub


def attach_recovered_points(clustering, points, recovered_idx, eps):
    """Join newly recovered moving points to the nearest cluster within eps.

    Returns (clustering, attached_mask); points with no cluster within eps
    are left out (their label reverts to static by the caller).
    """
    attached = np.zeros(len(recovered_idx), dtype=bool)
    if clustering.n_clusters == 0 or len(recovered_idx) == 0:
        return clustering, attached
    pts = np.asarray(points, dtype=np.float64)
    member_points = clustering.point_indices
    member_labels = clustering.labels
    in_cluster = member_labels != OUTLIER
    index = KdIndex(pts[member_points[in_cluster]])
    dist, nn = index.nearest(pts[recovered_idx])
    ok = dist <= eps
    attached[ok] = True
    new_ids = member_labels[in_cluster][nn[ok]]
    new_points = np.concatenate([member_points, recovered_idx[ok]])
    new_labels = np.concatenate([member_labels, new_ids])
    order = np.argsort(new_points, kind="stable")
    merged = Clustering(
        labels=new_labels[order],
        centroids=clustering.centroids,
        eps=clustering.eps,
        min_pts=clustering.min_pts,
        point_indices=new_points[order],
    )
    # refresh centroids with the new members
    merged.centroids = np.array([
        pts[merged.members(cid)].mean(axis=0)
        for cid in range(clustering.n_clusters)
    ]).reshape(clustering.n_clusters, 3)
    return merged, attached

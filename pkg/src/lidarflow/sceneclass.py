"""Moving/static scene classification.

Each point gets a 5-wide feature row: the four eigen features plus a
motion distance (distance to the nearest occupied 2 m voxel centroid of
the other scan). A boosted-tree model turns those into per-point
moving/static labels.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyGrid
from .spatial import KdIndex, VoxelGrid

MOTION_VOXEL_SIZE = 2.0
STATIC, MOVING = 0, 1


@dataclass
class SceneLabeling:
    """Per-point class (0 static / 1 moving) and moving probability."""

    labels: np.ndarray
    probability: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.probability = np.asarray(self.probability, dtype=np.float64)

    @property
    def moving_mask(self):
        return self.labels == MOVING

    def copy(self):
        return SceneLabeling(self.labels.copy(), self.probability.copy())


def motion_feature(points, other_grid):
    """Distance from each point to the nearest occupied voxel centroid of
    the other scan's grid."""
    if other_grid.n_cells == 0:
        raise EmptyGrid("other scan has no occupied voxels")
    index = KdIndex(other_grid.centroids)
    dist, _ = index.nearest(np.asarray(points, dtype=np.float64))
    return dist


def scene_features(points, other_points, eigen_feats, voxel_size=MOTION_VOXEL_SIZE):
    """Assemble the 5-wide feature rows for one cloud against the other."""
    grid = VoxelGrid(other_points, voxel_size)
    motion = motion_feature(points, grid)
    return np.column_stack([eigen_feats, motion])


def classify_scene(warped_t, cloud_t1, eigen_t, eigen_t1, model, threshold=0.5):
    """Label every point of both clouds as moving or static.

    Eigen features come from the ego stage; a rigid warp does not change
    them, so the unwarped-geometry features remain valid for ``warped_t``.
    """
    feats_t = scene_features(warped_t, cloud_t1, eigen_t)
    feats_t1 = scene_features(cloud_t1, warped_t, eigen_t1)
    prob_t = model.predict_proba(feats_t)
    prob_t1 = model.predict_proba(feats_t1)
    return (
        SceneLabeling((prob_t >= threshold).astype(np.int8), prob_t),
        SceneLabeling((prob_t1 >= threshold).astype(np.int8), prob_t1),
    )


def save_labels(labels, path):
    """One byte per point: 0 = static, 1 = moving."""
    np.asarray(labels, dtype=np.uint8).tofile(path)


def load_labels(path, expected_n=None):
    data = np.fromfile(path, dtype=np.uint8)
    if expected_n is not None and len(data) != expected_n:
        raise ValueError(
            f"label file has {len(data)} entries, expected {expected_n}"
        )
    return data.astype(np.int8)

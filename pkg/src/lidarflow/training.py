"""Model fitting from synthetic scenes or user-provided scans."""

import numpy as np

from .boosting import GbtConfig, gbt_fit
from .features import HopConfig, eigen_features, hopmodel_fit
from .geometry import apply_transform
from .sceneclass import scene_features
from .synth import SceneConfig, generate_scene


def train_from_synthetic(train_seeds, scene_config=None, hop_config=None,
                         gbt_config=None, eigen_k=32):
    """Fit the feature model and the scene classifier from seeded scenes.

    The feature model is label-free; the classifier trains on the
    generator's exact moving/static labels, with scan t warped by the
    ground-truth ego motion (mirroring how features are assembled at
    inference time after compensation).
    """
    scene_config = scene_config or SceneConfig()
    hop_model = None
    rows, labels = [], []
    hop_clouds = []
    for seed in train_seeds:
        scene = generate_scene(seed, scene_config)
        hop_clouds.append(scene.cloud_t)
        warped = apply_transform(scene.cloud_t, scene.gt_ego)
        ef_t, _ = eigen_features(scene.cloud_t, eigen_k)
        ef_t1, _ = eigen_features(scene.cloud_t1, eigen_k)
        rows.append(scene_features(warped, scene.cloud_t1, ef_t))
        rows.append(scene_features(scene.cloud_t1, warped, ef_t1))
        labels.append(scene.gt_labels)
        labels.append(scene.gt_labels_t1)
    hop_model = hopmodel_fit(hop_clouds[:2], hop_config or HopConfig())
    gbt_model = gbt_fit(np.vstack(rows), np.concatenate(labels),
                        gbt_config or GbtConfig())
    return hop_model, gbt_model


def train_classifier_from_files(feature_rows, label_arrays, gbt_config=None):
    """Fit only the classifier from externally supplied per-point labels."""
    return gbt_fit(np.vstack(feature_rows), np.concatenate(label_arrays),
                   gbt_config or GbtConfig())

"""Synthetic LiDAR scene pairs with exact ground truth.

Builds a desk-scale driving scene: ground disk, static structures (walls,
boxes, poles) and a few moving boxes. Each scan samples the surfaces
independently, the way a real sensor re-samples the world every sweep, so
correspondences between scans are never one-to-one. Scan t+1 additionally
applies the ego motion, per-object rigid motions, measurement noise and
ray dropout. The flow ground truth is the exact rigid motion of each
observed point of scan t, so a perfect pipeline can reach zero error.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, apply_transform, compose


@dataclass
class SceneConfig:
    extent: float = 40.0             # ground radius, meters
    n_ground: int = 6000
    n_structures: int = 10
    pts_per_structure: int = 600
    n_objects: int = 4
    pts_per_object: int = 450
    max_speed: float = 1.0           # max object displacement per frame
    min_speed: float = 0.25
    max_obj_yaw_deg: float = 4.0
    ego_forward: tuple = (0.8, 1.5)  # forward translation per frame
    ego_lateral: float = 0.15
    ego_yaw_deg: float = 1.0         # per-frame yaw bound, gentle driving
    noise_sigma: float = 0.01
    dropout: float = 0.10            # fraction of rays missing in scan t+1
    slow_object: bool = True         # force one barely-moving object

    def validate(self):
        if self.extent <= 0 or self.n_ground < 0 or self.n_objects < 0:
            raise ValueError("invalid scene config")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.min_speed > self.max_speed:
            raise ValueError("min_speed exceeds max_speed")
        return self


@dataclass
class SyntheticScene:
    cloud_t: np.ndarray
    cloud_t1: np.ndarray
    gt_flow: np.ndarray              # per point of cloud_t, ego convention
    gt_labels: np.ndarray            # 1 = moving, per point of cloud_t
    gt_labels_t1: np.ndarray         # per point of cloud_t1
    gt_ego: RigidTransform
    gt_object_motions: list          # RigidTransform per object, t+1 frame
    object_ids: np.ndarray = field(default=None)   # -1 static


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _box_surface(rng, center, dims, yaw, n):
    """Uniform point sample on the surface of a yawed box."""
    faces = rng.integers(0, 6, size=n)
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.zeros((n, 3))
    half = np.asarray(dims) / 2
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    others = np.array([[1, 2], [0, 2], [0, 1]])
    for a in range(3):
        sel = axis == a
        pts[sel, a] = sign[sel] * half[a]
        pts[sel, others[a][0]] = u[sel, 0] * dims[others[a][0]]
        pts[sel, others[a][1]] = u[sel, 1] * dims[others[a][1]]
    return pts @ _rot_z(yaw).T + center


def _structure_params(rng, config):
    """Draw the pose and shape of one static structure."""
    kind = int(rng.integers(0, 3))
    azimuth = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(6.0, config.extent * 0.85)
    center = np.array([dist * np.cos(azimuth), dist * np.sin(azimuth), 0.0])
    if kind == 0:      # wall
        length = rng.uniform(6.0, 15.0)
        height = rng.uniform(2.5, 6.0)
        direction = rng.uniform(0, 2 * np.pi)
        return ("wall", center, length, height, direction)
    if kind == 1:      # building-ish box
        dims = rng.uniform([4, 4, 3], [10, 10, 8])
        return ("box", center + np.array([0, 0, dims[2] / 2]), dims,
                rng.uniform(0, 2 * np.pi))
    return ("pole", center, rng.uniform(3.0, 7.0))


def _sample_structure(rng, params, n):
    """Draw a fresh point sample from a structure's surface."""
    kind = params[0]
    if kind == "wall":
        _, center, length, height, direction = params
        u = rng.uniform(-0.5, 0.5, n) * length
        v = rng.uniform(0, 1, n) * height
        d = np.array([np.cos(direction), np.sin(direction), 0.0])
        return center + u[:, None] * d + v[:, None] * np.array([0, 0, 1.0])
    if kind == "box":
        _, center, dims, yaw = params
        return _box_surface(rng, center, dims, yaw, n)
    _, center, height = params
    z = rng.uniform(0, height, n)
    jitter = rng.normal(scale=0.03, size=(n, 2))
    return center + np.column_stack([jitter, z])


def _sample_ground(rng, config):
    r = config.extent * np.sqrt(rng.uniform(0.02, 1.0, config.n_ground))
    a = rng.uniform(0, 2 * np.pi, config.n_ground)
    return np.column_stack([
        r * np.cos(a),
        r * np.sin(a),
        rng.normal(scale=0.02, size=config.n_ground),
    ])


def generate_scene(seed, config=None):
    """Deterministic scene pair for a seed; labels and flow are exact."""
    config = (config or SceneConfig()).validate()
    rng = np.random.default_rng(seed)

    # scene parameters, shared by both scans
    structures = [_structure_params(rng, config)
                  for _ in range(config.n_structures)]
    obj_params = []
    for _ in range(config.n_objects):
        azimuth = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(5.0, config.extent * 0.6)
        center = np.array([dist * np.cos(azimuth), dist * np.sin(azimuth), 0.8])
        dims = rng.uniform([3.5, 1.6, 1.3], [5.0, 2.2, 1.8])
        yaw = rng.uniform(0, 2 * np.pi)
        obj_params.append((center, dims, yaw))

    # ego motion: frame-t coordinates -> frame-t+1 coordinates
    yaw = np.deg2rad(rng.uniform(-config.ego_yaw_deg, config.ego_yaw_deg))
    forward = rng.uniform(*config.ego_forward)
    lateral = rng.uniform(-config.ego_lateral, config.ego_lateral)
    gt_ego = RigidTransform(_rot_z(yaw), np.array([forward, lateral, 0.0]))

    # object motions, expressed in the t+1 frame (applied after the warp);
    # rotation about each object's warped center plus a horizontal slide
    motions = []
    for i, (center, dims, obj_yaw0) in enumerate(obj_params):
        pivot = gt_ego.R @ center + gt_ego.t
        if config.slow_object and i == 0:
            speed = config.min_speed
        else:
            speed = rng.uniform(config.min_speed, config.max_speed)
        direction = rng.uniform(0, 2 * np.pi)
        slide = speed * np.array([np.cos(direction), np.sin(direction), 0.0])
        obj_yaw = np.deg2rad(
            rng.uniform(-config.max_obj_yaw_deg, config.max_obj_yaw_deg)
        )
        rot = _rot_z(obj_yaw)
        t = pivot - rot @ pivot + slide
        motions.append(RigidTransform(rot, t))

    def sample_scene(rng_s):
        """One independent observation of every surface, frame-t coords."""
        parts = [_sample_ground(rng_s, config)]
        parts += [_sample_structure(rng_s, p, config.pts_per_structure)
                  for p in structures]
        n_static = sum(len(p) for p in parts)
        for center, dims, obj_yaw0 in obj_params:
            parts.append(
                _box_surface(rng_s, center, dims, obj_yaw0,
                             config.pts_per_object)
            )
        pts = np.vstack(parts)
        labels = np.zeros(len(pts), dtype=np.int8)
        object_ids = np.full(len(pts), -1, dtype=np.int64)
        offset = n_static
        for i in range(len(obj_params)):
            labels[offset:offset + config.pts_per_object] = 1
            object_ids[offset:offset + config.pts_per_object] = i
            offset += config.pts_per_object
        return pts, labels, object_ids

    rng_t = np.random.default_rng([seed, 1])
    rng_t1 = np.random.default_rng([seed, 2])
    base_t, labels, object_ids = sample_scene(rng_t)
    base_t1, labels_t1, object_ids_t1 = sample_scene(rng_t1)

    cloud_t = base_t + rng_t.normal(scale=config.noise_sigma,
                                    size=base_t.shape)

    # scan t+1: warp the second sample, then noise and dropout
    observed = apply_transform(base_t1, gt_ego)
    for i, motion in enumerate(motions):
        members = object_ids_t1 == i
        observed[members] = apply_transform(
            base_t1[members], compose(gt_ego, motion)
        )
    observed = observed + rng_t1.normal(scale=config.noise_sigma,
                                        size=observed.shape)
    keep = rng_t1.uniform(size=len(observed)) >= config.dropout
    cloud_t1 = observed[keep]

    # exact flow of the observed t points under their true motions
    gt_flow = apply_transform(cloud_t, gt_ego) - cloud_t
    for i, motion in enumerate(motions):
        members = object_ids == i
        gt_flow[members] = apply_transform(
            cloud_t[members], compose(gt_ego, motion)
        ) - cloud_t[members]

    return SyntheticScene(
        cloud_t=cloud_t,
        cloud_t1=cloud_t1,
        gt_flow=gt_flow,
        gt_labels=labels,
        gt_labels_t1=labels_t1[keep].copy(),
        gt_ego=gt_ego,
        gt_object_motions=motions,
        object_ids=object_ids,
    )

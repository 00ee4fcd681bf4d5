"""Flow assembly: per-object rigid motion, flow initialization, region-wise
refinement, and the end-to-end pipeline."""

import json
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .boosting import GbtModel
from .egomotion import EgoConfig, compensate, estimate_ego, match_features
from .errors import (
    DegenerateCorrespondences,
    MalformedFile,
    NoCorrespondences,
    StageError,
    TooFewPoints,
    TruncatedRecord,
)
from .features import extract_features
from .geometry import (
    Correspondences,
    RigidTransform,
    apply_transform,
    compose,
    icp,
    rigid_align,
    validate_cloud,
)
from .objects import (
    associate,
    attach_recovered_points,
    cluster_moving,
    dbscan,
    outliers_to_static,
    refine_objects,
)
from .sceneclass import MOVING, STATIC, classify_scene
from .spatial import KdIndex

FLOW_MAGIC = b"LFFLW\x00"
FLOW_VERSION = 1
PROV_STATIC = -1


@dataclass
class FlowConfig:
    """Defaults for the object/flow stages; ego settings ride along."""

    ego: EgoConfig = field(default_factory=EgoConfig)
    eps: float = 0.75
    min_pts: int = 10
    assoc_max: float = 5.0
    refine_radius: float = 0.5
    min_obj_points: int = 10
    obj_ratio_max: float = 0.9
    obj_keep_fraction: float = 0.7
    obj_trim_fraction: float = 0.25
    obj_trim_passes: int = 3
    obj_gain_ratio: float = 0.8      # fit must beat ego residual by this factor
    obj_abs_res_max: float = 0.22    # kept motion must align this well
    obj_purge_dist: float = 0.15     # fit ignores members this close to t+1
    obj_max_motion: float = 1.3      # candidate motions above this are bogus
    obj_cover_max: float = 0.3       # moved src must explain the dst points
    obj_survivor_frac: float = 0.25  # purge must leave this member fraction
    obj_polish_gates: tuple = (0.5, 0.3, 0.2)  # member-to-member ICP polish
    region_size: float = 4.0
    min_region_points: int = 20
    region_icp_iters: int = 10
    region_icp_tol: float = 1e-3
    region_icp_pair_dist: float = 0.5   # pair gate for the polish ICP
    object_icp_gates: tuple = (0.5, 0.3, 0.2)  # coarse-to-fine object regions
    object_trim_steps: int = 2          # trimmed re-fits after the gates
    mode_eps: float = 0.2
    split_inlier_dist: float = 0.25
    split_inlier_frac: float = 0.8
    max_cluster_splits: int = 4
    part_rounds: int = 3
    part_cell: float = 4.0
    part_margin: float = 1.5
    part_icp_gates: tuple = (0.5, 0.3, 0.2)
    merge_suspect_extent: float = 7.0   # bbox diagonal above this -> per-cell
    region_accept_ratio: float = 0.85   # static cells: require a real gain
    region_max_shift: float = 0.4       # static cells: reject large steps
    region_max_rot_deg: float = 3.0
    object_accept_ratio: float = 1.0    # object regions: keep any non-worsening
    object_max_shift: float = 1.2       # object regions: correction bound
    object_max_rot_deg: float = 15.0
    object_refinement: bool = True
    flow_refinement: bool = True
    ego_method: str = "features"       # "features" | "icp" (ablation)
    zero_flow_static: bool = False     # emit ego-compensated static flow


@dataclass
class ObjectMotion:
    obj_id: int
    transform: RigidTransform
    pairs: Correspondences
    residual_rms: float


@dataclass
class FlowField:
    """Per-point flow for scan t with provenance and refinement flags."""

    flow: np.ndarray          # (n, 3)
    provenance: np.ndarray    # (n,) int64; -1 static, else object id
    refined: np.ndarray       # (n,) bool

    def __len__(self):
        return len(self.flow)


def split_matched_modes(
    pair, model, warped_t, cloud_t1, config, index_t1, index_warped,
):
    """Split one associated pair into per-body sub-pairs, if warranted.

    The displacement vectors of the feature matches form one dense mode
    per rigid body; a cluster that bridged several bodies (or swept in a
    static patch) shows several modes.  Members are assigned to the mode
    of their nearest matched point.  Returns a list of
    (src_members, dst_members) per body, or None when the pair moves as
    one body.
    """
    src_members = np.asarray(pair.src_members)
    dst_members = np.asarray(pair.dst_members)
    src_keep = (
        index_t1.nearest(warped_t[src_members])[0] >= config.obj_purge_dist
    )
    dst_keep = (
        index_warped.nearest(cloud_t1[dst_members])[0] >= config.obj_purge_dist
    )
    src_idx = src_members[src_keep]
    dst_idx = dst_members[dst_keep]
    floor = 2 * config.min_obj_points
    if len(src_idx) < floor or len(dst_idx) < floor:
        return None
    src_pts = warped_t[src_idx]
    dst_pts = cloud_t1[dst_idx]
    feats_src = extract_features(model, src_pts)
    feats_dst = extract_features(model, dst_pts)
    top_m = max(3, int(config.obj_keep_fraction * len(src_pts)))
    matches = match_features(feats_src, feats_dst, top_m, config.obj_ratio_max)
    if len(matches.src) < floor:
        return None
    disp = dst_pts[matches.dst] - src_pts[matches.src]
    modes = dbscan(disp, config.mode_eps, config.min_obj_points)
    mode_ids = [
        cid for cid in range(modes.n_clusters)
        if int((modes.labels == cid).sum()) >= config.min_obj_points
    ]
    if len(mode_ids) < 2:
        return None
    good = np.isin(modes.labels, mode_ids)
    mode_of = np.searchsorted(np.array(mode_ids), modes.labels[good])
    anchor_src = src_pts[matches.src[good]]
    anchor_dst = dst_pts[matches.dst[good]]
    _, nn_src = KdIndex(anchor_src).nearest(warped_t[src_members])
    _, nn_dst = KdIndex(anchor_dst).nearest(cloud_t1[dst_members])
    src_mode = mode_of[nn_src]
    dst_mode = mode_of[nn_dst]
    subs = []
    for k in range(len(mode_ids)):
        s = src_members[src_mode == k]
        d = dst_members[dst_mode == k]
        if len(s) >= config.min_obj_points and len(d) >= config.min_obj_points:
            subs.append((s, d))
    if len(subs) < 2:
        return None
    return subs


def estimate_object_motion(
    pair, model, warped_t, cloud_t1, config=None, index_t1=None,
    index_warped=None,
):
    """Rigid motion of one associated object pair from feature matches.

    Raises TooFewPoints / NoCorrespondences; the pipeline demotes such
    objects to static (ego-only flow) instead of failing the frame.
    """
    config = config or FlowConfig()
    if (
        len(pair.src_members) < config.min_obj_points
        or len(pair.dst_members) < config.min_obj_points
    ):
        raise TooFewPoints(
            f"object {pair.obj_id}: {len(pair.src_members)}/"
            f"{len(pair.dst_members)} member points"
        )
    warped_t = np.asarray(warped_t, dtype=np.float64)
    cloud_t1 = np.asarray(cloud_t1, dtype=np.float64)
    src_pts = warped_t[pair.src_members]
    dst_pts = cloud_t1[pair.dst_members]
    # drop members the ego alignment already explains; they are static
    # points swept into the cluster and would bias the rigid fit
    if index_t1 is None:
        index_t1 = KdIndex(cloud_t1)
    if index_warped is None:
        index_warped = KdIndex(warped_t)
    n_src, n_dst = len(src_pts), len(dst_pts)
    src_pts = src_pts[index_t1.nearest(src_pts)[0] >= config.obj_purge_dist]
    dst_pts = dst_pts[index_warped.nearest(dst_pts)[0] >= config.obj_purge_dist]
    min_src = max(config.min_obj_points, config.obj_survivor_frac * n_src)
    min_dst = max(config.min_obj_points, config.obj_survivor_frac * n_dst)
    if len(src_pts) < min_src or len(dst_pts) < min_dst:
        raise TooFewPoints(
            f"object {pair.obj_id}: members are explained by the ego "
            "alignment"
        )
    feats_src = extract_features(model, src_pts)
    feats_dst = extract_features(model, dst_pts)
    top_m = max(3, int(config.obj_keep_fraction * len(src_pts)))
    matches = match_features(feats_src, feats_dst, top_m, config.obj_ratio_max)
    try:
        transform = rigid_align(src_pts, dst_pts, matches)
        # trimmed refit, as in the ego stage: noisy surface matches are common
        for _ in range(config.obj_trim_passes):
            if len(matches) < 5:
                break
            warped = apply_transform(src_pts[matches.src], transform)
            residual = np.linalg.norm(warped - dst_pts[matches.dst], axis=1)
            keep = residual <= np.quantile(residual, 1 - config.obj_trim_fraction)
            if keep.sum() < 3:
                break
            matches = Correspondences(
                matches.src[keep], matches.dst[keep], matches.dist[keep]
            )
            transform = rigid_align(src_pts, dst_pts, matches)
    except DegenerateCorrespondences:
        transform = None
        matches = Correspondences(
            np.empty(0, dtype=np.intp),
            np.empty(0, dtype=np.intp),
            np.empty(0, dtype=np.float64),
        )
    # Candidate motions, scored by how close they bring the (purged)
    # members to the raw next scan.  The centroid shift is a coarse but
    # robust alternative that survives feature mismatches on self-similar
    # surfaces; region refinement later polishes whichever one wins.
    candidates = []
    empty = Correspondences(
        np.empty(0, dtype=np.intp),
        np.empty(0, dtype=np.intp),
        np.empty(0, dtype=np.float64),
    )
    if transform is not None:
        candidates.append((transform, matches))
        if len(matches.src) > 0:
            # translation voting: the median matched displacement is in
            # the right basin even when the rotation of the fit is not
            vote = np.median(
                dst_pts[matches.dst] - src_pts[matches.src], axis=0
            )
            candidates.append((RigidTransform(np.eye(3), vote), empty))
    # centroid shift: robust when feature matching fails outright, though
    # it degrades when the next scan's cluster covers only part of the
    # object
    shift = dst_pts.mean(axis=0) - src_pts.mean(axis=0)
    candidates.append((RigidTransform(np.eye(3), shift), empty))

    def plausible(cand):
        """A real object motion is bounded and explains the dst points."""
        moved = apply_transform(src_pts, cand)
        disp = float(np.mean(np.linalg.norm(moved - src_pts, axis=1)))
        if disp > config.obj_max_motion:
            return False
        cover = float(np.median(KdIndex(moved).nearest(dst_pts)[0]))
        return cover <= config.obj_cover_max

    candidates = [(c, m) for c, m in candidates if plausible(c)]
    if not candidates:
        raise NoCorrespondences(
            f"object {pair.obj_id}: no plausible motion candidate"
        )
    # ICP-polished versions of each candidate, aligned member-to-member:
    # a genuinely moving object locks onto its true motion here, while a
    # cluster of static points polishes back toward the identity.  The
    # polish informs only the keep/demote decision below — the coarse
    # candidate is what gets returned, and the region-wise flow refinement
    # is responsible for the fine alignment.
    probes = []
    for base, _ in candidates:
        polished = base
        try:
            for gate in config.obj_polish_gates:
                polished = icp(
                    src_pts, dst_pts, max_iter=10, tol=1e-4,
                    max_pair_dist=gate, init=polished,
                )
        except DegenerateCorrespondences:
            continue
        if plausible(polished):
            probes.append(polished)
    def score(cand):
        """Two-sided residual: the moved src must sit on the next scan AND
        explain the observed dst points.  A wrong-basin fit that lands the
        members on some other surface cheats the forward term but not the
        coverage term."""
        moved = apply_transform(src_pts, cand)
        forward = float(np.median(index_t1.nearest(moved)[0]))
        cover = float(np.median(KdIndex(moved).nearest(dst_pts)[0]))
        return max(forward, cover)

    scored = [(score(cand), cand, corr) for cand, corr in candidates]
    obj_res, transform, matches = min(scored, key=lambda item: item[0])
    probe_res = min([obj_res] + [score(probe) for probe in probes])
    # Verify against the raw next scan: the motion is kept only when some
    # rigid motion does meaningfully better than the ego transform already
    # does.  For the ego baseline, the coverage term measures how far the
    # associated dst cluster sits from the ego-aligned previous scan —
    # about the object's speed for a true mover (the object was not there
    # yet), near zero when the dst surface already existed, which marks a
    # misclassified static patch paired across a dropout hole.  Taking the
    # min of both terms demotes a pair as soon as either side is already
    # explained without object motion.
    ego_res = min(
        float(np.median(index_t1.nearest(src_pts)[0])),
        float(np.median(index_warped.nearest(dst_pts)[0])),
    )
    if (
        probe_res > config.obj_gain_ratio * ego_res
        or probe_res > config.obj_abs_res_max
    ):
        raise NoCorrespondences(
            f"object {pair.obj_id}: fitted motion does not beat the ego "
            f"alignment ({obj_res:.3f} vs {ego_res:.3f} m median residual)"
        )
    return ObjectMotion(pair.obj_id, transform, matches, obj_res)


def pointwise_flow_naive(pairs, warped_t, cloud_t1):
    """Per-pair displacement vectors; diagnostic baseline only."""
    src = np.asarray(warped_t, dtype=np.float64)[pairs.src]
    dst = np.asarray(cloud_t1, dtype=np.float64)[pairs.dst]
    return dst - src


def initialize_flow(cloud_t, ego, motions, labeling_t, membership, config=None):
    """Draft flow: ego for static points, ego-then-object for members.

    ``membership`` maps point index -> object id for points of scan t that
    belong to an estimated object. Returns the transformed cloud and the
    draft FlowField (flow = transformed - original coordinates).
    """
    config = config or FlowConfig()
    cloud_t = np.asarray(cloud_t, dtype=np.float64)
    n = len(cloud_t)
    transformed = apply_transform(cloud_t, ego.transform)
    provenance = np.full(n, PROV_STATIC, dtype=np.int64)
    by_id = {m.obj_id: m for m in motions}
    for idx, obj_id in membership.items():
        if obj_id in by_id:
            provenance[idx] = obj_id
    for obj_id, motion in by_id.items():
        members = np.nonzero(provenance == obj_id)[0]
        if len(members):
            full = compose(ego.transform, motion.transform)
            transformed[members] = apply_transform(cloud_t[members], full)
    flow = transformed - cloud_t
    if config.zero_flow_static:
        ego_disp = apply_transform(cloud_t, ego.transform) - cloud_t
        flow = flow - ego_disp
    return transformed, FlowField(
        flow=flow,
        provenance=provenance,
        refined=np.zeros(n, dtype=bool),
    )


def _region_step(positions, members, src_sub, targets, config,
                 accept_ratio, max_shift, max_rot, gates, trim_passes=0):
    """One guarded rigid correction of a region against its targets.

    ICP runs on the src_sub subset of the region's current positions but a
    kept step moves every member.  Returns the updated positions for the
    members, or None when the step fails a guard.
    """
    if len(src_sub) < config.min_region_points or len(targets) < 3:
        return None
    try:
        step = None
        for gate in gates:
            step = icp(
                positions[src_sub], targets,
                max_iter=config.region_icp_iters,
                tol=config.region_icp_tol,
                max_pair_dist=gate,
                init=step,
            )
        # residual trimming: misclassified members dragged along with the
        # region stall the plain alignment, so re-fit on the best-aligned
        # subset only
        target_index = KdIndex(targets)
        for _ in range(trim_passes):
            resid = target_index.nearest(
                apply_transform(positions[src_sub], step)
            )[0]
            inlier = src_sub[resid <= np.quantile(resid, 0.75)]
            if len(inlier) < config.min_region_points:
                break
            step = icp(
                positions[inlier], targets,
                max_iter=config.region_icp_iters,
                tol=config.region_icp_tol,
                max_pair_dist=gates[-1],
                init=step,
            )
    except DegenerateCorrespondences:
        return None
    moved_sub = apply_transform(positions[src_sub], step)
    # bound the correction by what it actually does to the region:
    # step.t alone is misleading because the rotation acts about the
    # world origin, not the region
    shift = float(
        np.mean(np.linalg.norm(moved_sub - positions[src_sub], axis=1))
    )
    if shift > max_shift or np.degrees(step.rotation_angle()) > max_rot:
        return None
    before = float(np.mean(target_index.nearest(positions[src_sub])[0]))
    after = float(np.mean(target_index.nearest(moved_sub)[0]))
    if after > accept_ratio * before:
        return None
    return apply_transform(positions[members], step)


def refine_flow(transformed, cloud_t, cloud_t1, draft, config=None,
                object_targets=None):
    """Region-wise ICP touch-up of the draft flow.

    Static-provenance points are partitioned into non-overlapping cubic
    cells, each ICP-aligned against the t+1 points of the cell dilated by
    one cell; a step is kept only if it is a small rigid correction that
    clearly lowers the cell's nearest-neighbor residual.  Each object is
    corrected as a whole first and then cell by cell, so a cluster that
    merged more than one rigid body still gets per-part corrections.  When
    object_targets supplies the object's membership in the next scan
    (src_keep, dst_members index arrays), alignment uses those points only;
    the surrounding ground and walls otherwise pull the correction toward
    zero.  Regions where ICP fails or overfits keep the draft flow.
    """
    config = config or FlowConfig()
    transformed = np.asarray(transformed, dtype=np.float64)
    cloud_t1 = np.asarray(cloud_t1, dtype=np.float64)
    size = config.region_size
    keys = np.floor(transformed / size).astype(np.int64)
    keys_t1 = np.floor(cloud_t1 / size).astype(np.int64)
    refined_pos = transformed.copy()
    refined_mask = np.zeros(len(transformed), dtype=bool)

    def dilated(members, pool=None):
        cells = np.unique(keys[members], axis=0)
        near = np.zeros(len(cloud_t1), dtype=bool)
        for cell in cells:
            near |= np.all(np.abs(keys_t1 - cell) <= 1, axis=1)
        if pool is not None:
            pool = np.asarray(pool)
            sub = pool[near[pool]]
            if len(sub) >= config.min_region_points:
                return cloud_t1[sub]
        return cloud_t1[near]

    static_mask = draft.provenance < 0
    if static_mask.any():
        static_idx = np.nonzero(static_mask)[0]
        uniq, inverse = np.unique(
            keys[static_idx], axis=0, return_inverse=True
        )
        for cell_id in range(len(uniq)):
            members = static_idx[inverse == cell_id]
            if len(members) < config.min_region_points:
                continue
            moved = _region_step(
                refined_pos, members, members, dilated(members), config,
                config.region_accept_ratio, config.region_max_shift,
                config.region_max_rot_deg, (config.region_icp_pair_dist,),
            )
            if moved is not None:
                refined_pos[members] = moved
                refined_mask[members] = True

    for obj_id in np.unique(draft.provenance[~static_mask]):
        members = np.nonzero(draft.provenance == obj_id)[0]
        src_keep, pool = members, None
        if object_targets is not None and int(obj_id) in object_targets:
            src_keep, pool = object_targets[int(obj_id)]
            if len(src_keep) < config.min_region_points:
                src_keep = members
        obj_args = (
            config.object_accept_ratio, config.object_max_shift,
            config.object_max_rot_deg, config.object_icp_gates,
        )
        moved = _region_step(
            refined_pos, members, src_keep, dilated(members, pool),
            config, *obj_args, trim_passes=config.object_trim_steps,
        )
        if moved is not None:
            refined_pos[members] = moved
            refined_mask[members] = True
        # per-cell pass, only for clusters too extended to be one rigid
        # body: a merged cluster needs a separate correction per part
        extent = float(
            np.linalg.norm(
                refined_pos[members].max(axis=0)
                - refined_pos[members].min(axis=0)
            )
        )
        if extent <= config.merge_suspect_extent:
            continue
        part_keys = np.floor(
            transformed[members] / config.part_cell
        ).astype(np.int64)
        uniq, inverse = np.unique(part_keys, axis=0, return_inverse=True)
        parts = []
        leftover = []
        for cell_id in range(len(uniq)):
            part = members[inverse == cell_id]
            if len(part) >= config.min_region_points:
                parts.append(part)
            else:
                leftover.append(part)
        if leftover:
            parts.append(np.concatenate(leftover))
        if len(parts) < 2:
            continue
        keep_set = set(src_keep.tolist())
        pool_pts = cloud_t1[pool] if pool is not None else dilated(members)
        # iterate: each round starts every part closer to its own body, so
        # the alignment progressively stops being pulled by the other
        # bodies sharing the merged cluster's target pool; targets come
        # from a box around the part so a distant body cannot capture it
        for _ in range(config.part_rounds):
            any_moved = False
            for part in parts:
                part_keep = np.array(
                    [idx for idx in part if idx in keep_set], dtype=np.intp
                )
                if len(part_keep) < config.min_region_points:
                    part_keep = part
                lo = refined_pos[part].min(axis=0) - config.part_margin
                hi = refined_pos[part].max(axis=0) + config.part_margin
                near = np.all((pool_pts >= lo) & (pool_pts <= hi), axis=1)
                targets = pool_pts[near] if near.sum() >= config.min_region_points else pool_pts
                moved = _region_step(
                    refined_pos, part, part_keep, targets,
                    config, *obj_args[:3], config.part_icp_gates,
                    trim_passes=config.object_trim_steps,
                )
                if moved is not None:
                    any_moved = True
                    refined_pos[part] = moved
                    refined_mask[part] = True
            if not any_moved:
                break
    flow = refined_pos - np.asarray(cloud_t, dtype=np.float64)
    if config.zero_flow_static:
        flow = draft.flow + (refined_pos - transformed)
    return FlowField(flow=flow, provenance=draft.provenance.copy(),
                     refined=refined_mask)


@dataclass
class PipelineResult:
    """FlowField plus every intermediate artifact, for ablation studies."""

    flow: FlowField
    ego: object
    labeling_t: object
    labeling_t1: object
    clustering_t: object
    clustering_t1: object
    object_pairs: list
    motions: list
    demoted: list
    timings: dict


def run_pipeline(cloud_t, cloud_t1, hop_model, gbt_model, config=None):
    """Execute the six pipeline stages in order."""
    config = config or FlowConfig()
    cloud_t = validate_cloud(cloud_t)
    cloud_t1 = validate_cloud(cloud_t1)
    timings = {}

    def stage(name):
        timings[name] = time.perf_counter()

    def done(name):
        timings[name] = time.perf_counter() - timings[name]

    # 1. ego-motion
    stage("ego")
    try:
        if config.ego_method == "icp":
            transform = icp(cloud_t, cloud_t1, max_iter=30, tol=1e-4)
            from .egomotion import EgoEstimate
            from .features import eigen_features

            pairs = Correspondences(np.empty(0, np.int64), np.empty(0, np.int64))
            ego = EgoEstimate(transform=transform, pairs=pairs, residual_rms=0.0)
            eigen_t, _ = eigen_features(cloud_t, config.ego.eigen_k)
            eigen_t1, _ = eigen_features(cloud_t1, config.ego.eigen_k)
        else:
            ego, eigen_t, eigen_t1 = estimate_ego(
                cloud_t, cloud_t1, hop_model, config.ego
            )
    except Exception as exc:
        raise StageError("ego", exc)
    warped = compensate(cloud_t, ego)
    done("ego")

    # 2. scene classification
    stage("classify")
    labeling_t, labeling_t1 = classify_scene(
        warped, cloud_t1, eigen_t, eigen_t1, gbt_model
    )
    done("classify")

    # 3. clustering + association
    stage("objects")
    clustering_t = cluster_moving(warped, labeling_t, config.eps, config.min_pts)
    clustering_t1 = cluster_moving(cloud_t1, labeling_t1, config.eps, config.min_pts)
    labeling_t = outliers_to_static(clustering_t, labeling_t)
    labeling_t1 = outliers_to_static(clustering_t1, labeling_t1)

    # 4. object refinement (radius sweep + attach recovered points)
    if config.object_refinement:
        before_t = labeling_t.copy()
        labeling_t = refine_objects(labeling_t, warped, config.refine_radius)
        labeling_t1 = refine_objects(labeling_t1, cloud_t1, config.refine_radius)
        recovered = np.nonzero(
            (labeling_t.labels == MOVING) & (before_t.labels == STATIC)
        )[0]
        clustering_t, attached = attach_recovered_points(
            clustering_t, warped, recovered, config.eps
        )
        labeling_t.labels[recovered[~attached]] = STATIC
    pairs = associate(clustering_t, clustering_t1, config.assoc_max)
    done("objects")

    # 5. object motion estimation
    stage("motion")
    motions = []
    demoted = []
    membership = {}
    index_t1 = KdIndex(cloud_t1) if pairs else None
    index_warped = KdIndex(warped) if pairs else None
    object_targets = {}
    next_id = max((int(p.obj_id) for p in pairs), default=-1) + 1
    queue = list(pairs)
    splits = 0
    while queue:
        pair = queue.pop(0)
        if splits < config.max_cluster_splits:
            subs = split_matched_modes(
                pair, hop_model, warped, cloud_t1, config,
                index_t1, index_warped,
            )
            if subs is not None:
                splits += 1
                for k, (src_sub, dst_sub) in enumerate(subs):
                    sub_id = pair.obj_id if k == 0 else next_id
                    if k > 0:
                        next_id += 1
                    queue.append(replace(
                        pair, obj_id=sub_id, src_members=src_sub,
                        dst_members=dst_sub,
                        src_centroid=warped[src_sub].mean(axis=0),
                        dst_centroid=cloud_t1[dst_sub].mean(axis=0),
                    ))
                continue
        try:
            motion = estimate_object_motion(
                pair, hop_model, warped, cloud_t1, config,
                index_t1, index_warped,
            )
        except (TooFewPoints, NoCorrespondences) as exc:
            demoted.append((pair.obj_id, str(exc)))
            continue
        # split clusters that merged more than one rigid body: members the
        # fitted motion does not carry onto the next scan become their own
        # candidate object and are estimated separately; the unexplained
        # side of the destination cluster goes with them
        if splits < config.max_cluster_splits:
            moved = apply_transform(warped[pair.src_members], motion.transform)
            inlier = (
                index_t1.nearest(moved)[0] < config.split_inlier_dist
            )
            n_out = int((~inlier).sum())
            if (
                inlier.mean() < config.split_inlier_frac
                and inlier.sum() >= config.min_obj_points
                and n_out >= config.min_obj_points
            ):
                dst_pts = cloud_t1[pair.dst_members]
                dst_far = (
                    KdIndex(moved[inlier]).nearest(dst_pts)[0]
                    > config.split_inlier_dist
                )
                src_in = pair.src_members[inlier]
                src_out = pair.src_members[~inlier]
                splits += 1
                queue.append(replace(
                    pair, src_members=src_in,
                    src_centroid=warped[src_in].mean(axis=0),
                ))
                if int(dst_far.sum()) >= config.min_obj_points:
                    dst_out = pair.dst_members[dst_far]
                    queue.append(replace(
                        pair, obj_id=next_id, src_members=src_out,
                        dst_members=dst_out,
                        src_centroid=warped[src_out].mean(axis=0),
                        dst_centroid=cloud_t1[dst_out].mean(axis=0),
                    ))
                    next_id += 1
                continue
        # refinement aligns the full membership of both scans: subsets
        # chosen by ego residual are biased toward the faces the motion
        # exposes, and aligning onto such a subset overshoots
        object_targets[int(pair.obj_id)] = (
            pair.src_members, pair.dst_members
        )
        for idx in pair.src_members:
            membership[int(idx)] = pair.obj_id
        motions.append(motion)
    done("motion")

    # 6. flow initialization and refinement
    stage("flow")
    transformed, draft = initialize_flow(
        cloud_t, ego, motions, labeling_t, membership, config
    )
    if config.flow_refinement:
        flow = refine_flow(transformed, cloud_t, cloud_t1, draft, config,
                           object_targets)
    else:
        flow = draft
    done("flow")

    return PipelineResult(
        flow=flow, ego=ego, labeling_t=labeling_t, labeling_t1=labeling_t1,
        clustering_t=clustering_t, clustering_t1=clustering_t1,
        object_pairs=pairs, motions=motions, demoted=demoted, timings=timings,
    )


# ---------------------------------------------------------------------------
# serialization


def save_flowfield(field_, path):
    """Binary flow file: header, n float32 triplets, n provenance bytes."""
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", FLOW_VERSION, len(field_)))
        f.write(np.ascontiguousarray(field_.flow, dtype="<f4").tobytes())
        prov = np.where(
            field_.provenance < 0, 0, np.minimum(field_.provenance + 1, 255)
        ).astype(np.uint8)
        f.write(prov.tobytes())


def load_flowfield(path):
    with open(path, "rb") as f:
        if f.read(len(FLOW_MAGIC)) != FLOW_MAGIC:
            raise MalformedFile("bad flow-file magic", offset=0)
        header = f.read(8)
        if len(header) != 8:
            raise TruncatedRecord("truncated flow header", offset=f.tell())
        version, n = struct.unpack("<II", header)
        if version != FLOW_VERSION:
            raise MalformedFile(f"unsupported flow-file version {version}")
        raw = f.read(12 * n)
        if len(raw) != 12 * n:
            raise TruncatedRecord("truncated flow vectors", offset=f.tell())
        flow = np.frombuffer(raw, dtype="<f4").reshape(n, 3).astype(np.float64)
        praw = f.read(n)
        if len(praw) != n:
            raise TruncatedRecord("truncated provenance bytes", offset=f.tell())
        prov = np.frombuffer(praw, dtype=np.uint8).astype(np.int64) - 1
    return FlowField(flow=flow, provenance=prov,
                     refined=np.zeros(n, dtype=bool))


def summary_record(result):
    """Human-readable run summary (stage timings and counts)."""
    return json.dumps({
        "n_points": len(result.flow),
        "moving_t": int(result.labeling_t.moving_mask.sum()),
        "moving_t1": int(result.labeling_t1.moving_mask.sum()),
        "clusters_t": result.clustering_t.n_clusters,
        "clusters_t1": result.clustering_t1.n_clusters,
        "object_pairs": len(result.object_pairs),
        "motions_estimated": len(result.motions),
        "objects_demoted": len(result.demoted),
        "ego_residual_rms": result.ego.residual_rms,
        "timings_s": {k: round(v, 4) for k, v in result.timings.items()},
    }, indent=2, sort_keys=True)

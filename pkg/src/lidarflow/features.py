"""Unsupervised point representation learning.

Covers the per-point shape descriptors (eigen features), geometry-aware
sampling, octant pooling, and the two-hop channel-wise data-driven
transform whose kernel banks are fit by PCA with a constant DC kernel.
A single trained :class:`HopModel` serves both the ego-motion and the
object-motion stages.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InsufficientSamples, MalformedFile, TruncatedRecord
from .spatial import KdIndex

MODEL_MAGIC = b"LFHOP\x00"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# eigen features


def eigen_features(points, k, index=None):
    """Per-point shape features from the k-NN covariance (self included).

    Returns ``(features, degenerate)`` where features is an (n, 4) array of
    [linearity, planarity, eigen_sum, eigen_entropy] and degenerate marks
    points whose neighborhood has zero extent (their features are zeroed).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k < 3 or k > n:
        raise ValueError(f"k={k} out of range [3, {n}]")
    if index is None:
        index = KdIndex(pts)
    _, nn = index.knn_batch(pts, k)
    eig = kernels.neighborhood_eigenvalues(pts, nn)
    eig = np.maximum(eig, 0.0)
    l1, l2, l3 = eig[:, 0], eig[:, 1], eig[:, 2]
    degenerate = l1 <= 0.0
    safe_l1 = np.where(degenerate, 1.0, l1)
    linearity = np.where(degenerate, 0.0, (l1 - l2) / safe_l1)
    planarity = np.where(degenerate, 0.0, (l2 - l3) / safe_l1)
    eigen_sum = l1 + l2 + l3
    safe_sum = np.where(eigen_sum > 0, eigen_sum, 1.0)
    lam = eig / safe_sum[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(lam > 0, lam * np.log(lam), 0.0)
    entropy = np.where(degenerate, 0.0, -plogp.sum(axis=1))
    feats = np.column_stack([linearity, planarity, eigen_sum, entropy])
    return feats, degenerate


# ---------------------------------------------------------------------------
# geometry-aware sampling


def geometry_aware_sample(points, m, ef, n_azimuth=8, n_range=4):
    """Select ``m`` spatially spread, salient point indices.

    Points are binned by azimuth angle and horizontal range (range edges at
    the range quantiles, so bins are balanced); within a bin they are
    ranked by saliency = linearity + planarity. Selection round-robins
    across non-empty bins taking each bin's best remaining point, which
    guarantees spatial spread. Deterministic; returns sorted indices.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if m >= n:
        return np.arange(n, dtype=np.int64)
    azimuth = np.arctan2(pts[:, 1], pts[:, 0])
    az_bin = np.minimum(
        ((azimuth + np.pi) / (2 * np.pi) * n_azimuth).astype(np.int64),
        n_azimuth - 1,
    )
    rng_dist = np.hypot(pts[:, 0], pts[:, 1])
    edges = np.quantile(rng_dist, np.linspace(0, 1, n_range + 1)[1:-1])
    r_bin = np.searchsorted(edges, rng_dist, side="right")
    bin_id = az_bin * n_range + r_bin
    saliency = ef[:, 0] + ef[:, 1]

    # per-bin queues sorted by descending saliency, index as tiebreak
    order = np.lexsort((np.arange(n), -saliency, bin_id))
    sorted_bins = bin_id[order]
    starts = np.searchsorted(sorted_bins, np.arange(n_azimuth * n_range))
    ends = np.searchsorted(sorted_bins, np.arange(n_azimuth * n_range), "right")
    cursors = starts.copy()
    selected = np.empty(m, dtype=np.int64)
    taken = 0
    while taken < m:
        progressed = False
        for b in range(n_azimuth * n_range):
            if cursors[b] < ends[b] and taken < m:
                selected[taken] = order[cursors[b]]
                cursors[b] += 1
                taken += 1
                progressed = True
        if not progressed:
            break
    return np.sort(selected[:taken])


# ---------------------------------------------------------------------------
# octant descriptors


def neighbor_table(points, centers, index, k):
    """(len(centers), k) neighbor indices excluding each center itself."""
    pts = np.asarray(points, dtype=np.float64)
    k_eff = min(k, index.n - 1)
    if k_eff < 1:
        raise InsufficientSamples("need at least 2 points for neighborhoods")
    centers = np.asarray(centers, dtype=np.int64)
    _, nn = index.knn_batch(pts[centers], k_eff + 1)
    # drop each center from its own list (first k_eff survivors per row)
    keep = nn != centers[:, None]
    rank = np.where(keep, np.arange(k_eff + 1)[None, :], k_eff + 1)
    cols = np.argsort(rank, axis=1, kind="stable")[:, :k_eff]
    return np.take_along_axis(nn, cols, axis=1)


def octant_descriptors(points, centers, neighbor_idx, point_attrs=None):
    """Octant-pooled descriptors for the given center points.

    The base attribute of a neighbor is its coordinate relative to the
    center (width 3); ``point_attrs`` (n, a) appends per-point scalars.
    Descriptor width is ``8 * (3 + a)``. Empty octants contribute zeros.
    """
    pts = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    rel = pts[neighbor_idx] - pts[centers][:, None, :]
    if point_attrs is None:
        attrs = rel
    else:
        extra = np.asarray(point_attrs, dtype=np.float64)[neighbor_idx]
        attrs = np.concatenate([rel, extra], axis=2)
    return kernels.octant_mean_pool(rel, np.ascontiguousarray(attrs))


def octant_descriptor(points, attrs, index, point, k):
    """Single-point octant descriptor.

    ``attrs`` is an (n, a) per-point attribute table, or None to use the
    neighbor coordinates relative to the center as attributes.
    """
    pts = np.asarray(points, dtype=np.float64)
    nn = neighbor_table(pts, np.array([point]), index, k)
    rel = pts[nn[0]] - pts[point]
    if attrs is None:
        vals = rel
    else:
        vals = np.asarray(attrs, dtype=np.float64)[nn[0]]
    return kernels.octant_mean_pool(
        rel[None], np.ascontiguousarray(vals[None])
    )[0]


# ---------------------------------------------------------------------------
# Saab-style kernel bank


@dataclass
class SaabKernelBank:
    """Constant DC kernel plus energy-ordered orthonormal AC kernels."""

    dc: np.ndarray            # (d,)
    ac: np.ndarray            # (n_ac, d), rows orthonormal
    energies: np.ndarray      # (n_ac,), non-increasing
    bias: float               # max training-sample norm, recorded only
    total_energy: float       # trace of the centered sample covariance

    @property
    def input_dim(self):
        return len(self.dc)

    @property
    def num_kernels(self):
        return 1 + len(self.ac)

    def transform(self, x):
        """Project rows of x onto [dc, ac...]; responses stay signed."""
        x = np.asarray(x, dtype=np.float64)
        return np.column_stack([x @ self.dc, x @ self.ac.T])

    def parameter_count(self):
        return self.num_kernels * self.input_dim


def saab_fit(samples, max_kernels):
    """Fit a kernel bank: constant DC plus PCA of the DC-removed residue.

    Eigenvector signs are fixed (largest-magnitude component positive) so
    the fit is deterministic for a given input.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise InsufficientSamples("saab_fit needs >= 2 sample vectors")
    n, d = x.shape
    dc = np.full(d, 1.0 / np.sqrt(d))
    residue = x - np.outer(x @ dc, dc)
    centered = residue - residue.mean(axis=0)
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(d)])
    flip[flip == 0] = 1.0
    evecs = evecs * flip
    n_ac = min(max_kernels - 1, d - 1)
    return SaabKernelBank(
        dc=dc,
        ac=np.ascontiguousarray(evecs[:, :n_ac].T),
        energies=evals[:n_ac].copy(),
        bias=float(np.max(np.linalg.norm(x, axis=1))),
        total_energy=float(np.trace(cov)),
    )


# ---------------------------------------------------------------------------
# two-hop model


@dataclass
class HopConfig:
    """Architecture and neighborhood sizes for the two-hop transform."""

    k1_kernels: int = 13
    hop1_k: int = 32
    hop2_k: int = 16
    hop2_max_kernels: int = 8
    attr_width: int = 3        # per-octant attribute width; 3 = relative coords
    energy_threshold: float = 0.0   # hop-1 channel retention (fraction of energy)
    fit_points_per_cloud: int = 2048


@dataclass
class HopModel:
    """Trained two-hop channel-wise transform."""

    config: HopConfig
    hop1: SaabKernelBank
    hop2: list = field(default_factory=list)   # one bank per retained channel
    retained: np.ndarray = None                # hop-1 channel indices

    @property
    def feature_width(self):
        return self.hop1.num_kernels + sum(b.num_kernels for b in self.hop2)

    def parameter_count(self):
        return self.hop1.parameter_count() + sum(
            b.parameter_count() for b in self.hop2
        )


def _hop1_responses(points, index, config, point_attrs=None):
    n = len(points)
    centers = np.arange(n, dtype=np.int64)
    nn = neighbor_table(points, centers, index, config.hop1_k)
    desc = octant_descriptors(points, centers, nn, point_attrs)
    return desc


def _extra_attrs(points, config, point_attrs):
    """Validate/pad the optional per-point attribute table."""
    extra_width = config.attr_width - 3
    if extra_width == 0:
        return None
    if point_attrs is None:
        return np.zeros((len(points), extra_width))
    attrs = np.asarray(point_attrs, dtype=np.float64)
    if attrs.shape != (len(points), extra_width):
        raise ValueError(
            f"expected per-point attrs of shape ({len(points)}, {extra_width})"
        )
    return attrs


def hopmodel_fit(training_clouds, config=None, point_attrs=None):
    """Fit both hops from unlabeled clouds in a single feedforward pass.

    Hop 1 is fit on octant descriptors of (a subset of) training points;
    hop 2 fits one small bank per retained hop-1 channel on the
    octant-pooled single-channel responses of the same points.
    """
    config = config or HopConfig()
    clouds = [np.asarray(c, dtype=np.float64) for c in training_clouds]
    if not clouds or any(len(c) < 4 for c in clouds):
        raise InsufficientSamples("training clouds must be non-empty")
    attr_tables = point_attrs or [None] * len(clouds)

    desc1_all = []
    per_cloud = []
    for cloud, attrs in zip(clouds, attr_tables):
        index = KdIndex(cloud)
        stride = max(1, len(cloud) // config.fit_points_per_cloud)
        centers = np.arange(0, len(cloud), stride, dtype=np.int64)
        nn = neighbor_table(cloud, centers, index, config.hop1_k)
        desc = octant_descriptors(
            cloud, centers, nn, _extra_attrs(cloud, config, attrs)
        )
        desc1_all.append(desc)
        per_cloud.append((cloud, index, centers))
    hop1 = saab_fit(np.vstack(desc1_all), config.k1_kernels)

    # hop-1 channel retention by energy fraction (DC always kept)
    k1 = hop1.num_kernels
    ac_energy = hop1.energies
    total = ac_energy.sum()
    if config.energy_threshold > 0 and total > 0:
        keep_ac = np.nonzero(ac_energy / total >= config.energy_threshold)[0]
    else:
        keep_ac = np.arange(len(ac_energy))
    retained = np.concatenate([[0], keep_ac + 1]).astype(np.int64)

    # hop-2 descriptors: octant-pooled per-channel responses
    desc2_per_channel = [[] for _ in retained]
    for (cloud, index, centers), attrs in zip(per_cloud, attr_tables):
        all_centers = np.arange(len(cloud), dtype=np.int64)
        nn1 = neighbor_table(cloud, all_centers, index, config.hop1_k)
        resp1 = hop1.transform(
            octant_descriptors(
                cloud, all_centers, nn1, _extra_attrs(cloud, config, attrs)
            )
        )
        nn2 = neighbor_table(cloud, centers, index, config.hop2_k)
        rel = cloud[nn2] - cloud[centers][:, None, :]
        for slot, channel in enumerate(retained):
            vals = np.ascontiguousarray(resp1[nn2][:, :, channel : channel + 1])
            desc2_per_channel[slot].append(kernels.octant_mean_pool(rel, vals))
    hop2 = [
        saab_fit(np.vstack(chunks), config.hop2_max_kernels)
        for chunks in desc2_per_channel
    ]
    return HopModel(config=config, hop1=hop1, hop2=hop2, retained=retained)


def extract_features(model, points, targets=None, index=None, point_attrs=None):
    """Per-point features: hop-1 responses concatenated with all hop-2
    channel responses, rows aligned with ``targets`` (default: all points).
    """
    pts = np.asarray(points, dtype=np.float64)
    config = model.config
    if index is None:
        index = KdIndex(pts)
    if targets is None:
        targets = np.arange(len(pts), dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)

    all_centers = np.arange(len(pts), dtype=np.int64)
    nn1 = neighbor_table(pts, all_centers, index, config.hop1_k)
    desc1 = octant_descriptors(
        pts, all_centers, nn1, _extra_attrs(pts, config, point_attrs)
    )
    resp1 = model.hop1.transform(desc1)

    nn2 = neighbor_table(pts, targets, index, config.hop2_k)
    rel = pts[nn2] - pts[targets][:, None, :]
    blocks = [resp1[targets]]
    for slot, channel in enumerate(model.retained):
        vals = np.ascontiguousarray(resp1[nn2][:, :, channel : channel + 1])
        desc2 = kernels.octant_mean_pool(rel, vals)
        blocks.append(model.hop2[slot].transform(desc2))
    return np.hstack(blocks)


# ---------------------------------------------------------------------------
# serialization (versioned little-endian binary, bit-exact round trip)


def _write_bank(buf, bank):
    buf.write(struct.pack("<IIdd", bank.input_dim, len(bank.ac),
                          bank.bias, bank.total_energy))
    buf.write(bank.dc.astype("<f8").tobytes())
    buf.write(np.ascontiguousarray(bank.ac, dtype="<f8").tobytes())
    buf.write(bank.energies.astype("<f8").tobytes())


def _read_exact(buf, count, what):
    data = buf.read(count)
    if len(data) != count:
        raise TruncatedRecord(f"truncated {what}", offset=buf.tell())
    return data


def _read_bank(buf):
    d, n_ac, bias, total = struct.unpack("<IIdd", _read_exact(buf, 24, "bank header"))
    dc = np.frombuffer(_read_exact(buf, 8 * d, "dc kernel"), dtype="<f8")
    ac = np.frombuffer(
        _read_exact(buf, 8 * n_ac * d, "ac kernels"), dtype="<f8"
    ).reshape(n_ac, d)
    energies = np.frombuffer(_read_exact(buf, 8 * n_ac, "energies"), dtype="<f8")
    return SaabKernelBank(dc=dc.copy(), ac=ac.copy(), energies=energies.copy(),
                          bias=bias, total_energy=total)


def save_hopmodel(model, path):
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        cfg = model.config
        f.write(struct.pack(
            "<IIIIIIIdI",
            MODEL_VERSION, cfg.k1_kernels, cfg.hop1_k, cfg.hop2_k,
            cfg.hop2_max_kernels, cfg.attr_width, cfg.fit_points_per_cloud,
            cfg.energy_threshold, len(model.retained),
        ))
        f.write(model.retained.astype("<i8").tobytes())
        _write_bank(f, model.hop1)
        for bank in model.hop2:
            _write_bank(f, bank)


def load_hopmodel(path):
    with open(path, "rb") as f:
        magic = f.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise MalformedFile("bad model magic", offset=0)
        fmt = "<IIIIIIIdI"
        header = struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt), "model header"))
        version = header[0]
        if version != MODEL_VERSION:
            raise MalformedFile(f"unsupported model version {version}")
        cfg = HopConfig(
            k1_kernels=header[1], hop1_k=header[2], hop2_k=header[3],
            hop2_max_kernels=header[4], attr_width=header[5],
            fit_points_per_cloud=header[6], energy_threshold=header[7],
        )
        n_ret = header[8]
        retained = np.frombuffer(
            _read_exact(f, 8 * n_ret, "retained channels"), dtype="<i8"
        ).copy()
        hop1 = _read_bank(f)
        hop2 = [_read_bank(f) for _ in range(n_ret)]
    return HopModel(config=cfg, hop1=hop1, hop2=hop2, retained=retained)

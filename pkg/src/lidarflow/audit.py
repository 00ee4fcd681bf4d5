"""Model-size and inference-FLOP accounting.

Counting conventions (printed with every report, since none are standard):
one fused multiply-add = 2 FLOPs; a comparison or square root = 1 FLOP.
The tree-parameter figure is reported twice: as values actually stored
(thresholds + leaf values) and under a capacity convention of
``2 * internal_nodes + leaves`` per full tree (feature ids counted as
parameters), which is the convention the headline totals use. That
convention is inferred, not definitive; treat cross-model comparisons
accordingly.
"""

from dataclasses import dataclass


@dataclass
class AuditReport:
    hop_params: int
    gbt_params_stored: int
    gbt_params_convention: int
    total_convention: int
    flops_total: float
    flops_per_point: float
    n_points: int
    convention_note: str

    def as_dict(self):
        return {
            "hop_kernel_weights": self.hop_params,
            "classifier_params_stored": self.gbt_params_stored,
            "classifier_params_convention": self.gbt_params_convention,
            "total_params_convention": self.total_convention,
            "inference_flops_total": self.flops_total,
            "inference_flops_per_point": self.flops_per_point,
            "flop_input_points": self.n_points,
            "note": self.convention_note,
        }


CONVENTION_NOTE = (
    "tree params counted at full-tree capacity (feature id + threshold per "
    "internal node, one value per leaf); FLOPs: multiply-add=2, "
    "comparison/sqrt=1. Both conventions are choices, not standards."
)


def _gbt_capacity_params(config):
    internal = 2 ** config.max_depth - 1
    leaves = 2 ** config.max_depth
    return config.n_trees * (2 * internal + leaves)


def estimate_flops(hop_model, gbt_model, n_points, sample_size=1024, top_m=256):
    """Analytic inference FLOP count for a scan pair of ``n_points`` each.

    Counts the dominating stages of one end-to-end run: eigen features,
    descriptor builds, kernel projections, per-view feature matching, the
    classifier, and region ICP. Bookkeeping (binning, sorting, hashing) is
    excluded.
    """
    cfg = hop_model.config
    d1 = 8 * cfg.attr_width
    width = hop_model.feature_width
    k1, k2 = cfg.hop1_k, cfg.hop2_k

    # per-cloud costs, x2 clouds
    eigen = n_points * (k1 * 9 * 2 + 60)            # covariance MACs + 3x3 eig
    desc1 = n_points * k1 * (3 + cfg.attr_width)    # relative coords + pooling
    proj1 = n_points * hop_model.hop1.num_kernels * d1 * 2
    hop2 = n_points * len(hop_model.retained) * (k2 * 2 + 8 * 8 * 2)
    classify = n_points * (
        gbt_model.config.n_trees * (gbt_model.config.max_depth + 1)
    )
    per_cloud = eigen + desc1 + proj1 + hop2 + classify

    # matching + alignment on sampled points
    matching = sample_size * sample_size // 4 * width * 2 * 4  # 4 views
    align = top_m * 9 * 2 + 200                                # covariance + svd
    # region ICP refinement: iterations x points x (NN probe + transform)
    region_icp = 10 * n_points * (30 + 9 * 2)

    total = 2 * per_cloud + matching + align + region_icp
    return float(total)


def audit_model(hop_model, gbt_model, n_points=8192):
    """Parameter and FLOP audit for a trained model pair."""
    hop_params = hop_model.parameter_count()
    stored = gbt_model.parameter_count()
    convention = _gbt_capacity_params(gbt_model.config)
    flops = estimate_flops(hop_model, gbt_model, n_points)
    return AuditReport(
        hop_params=hop_params,
        gbt_params_stored=stored,
        gbt_params_convention=convention,
        total_convention=hop_params + convention,
        flops_total=flops,
        flops_per_point=flops / n_points,
        n_points=n_points,
        convention_note=CONVENTION_NOTE,
    )

"""Flow evaluation metrics: endpoint error, strict/relaxed accuracy,
outlier fraction and mean angular error."""

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch

EPS_NORM = 1e-6   # guard for the relative-error denominator and angle pairs


@dataclass
class MetricsReport:
    epe3d: float
    acc3ds: float
    acc3dr: float
    outlier_frac: float
    mae: float
    n_evaluated: int
    n_angle_excluded: int = 0

    def as_dict(self):
        return {
            "epe3d_m": self.epe3d,
            "acc3ds": self.acc3ds,
            "acc3dr": self.acc3dr,
            "outliers": self.outlier_frac,
            "mae_rad": self.mae,
            "n_evaluated": self.n_evaluated,
            "n_angle_excluded": self.n_angle_excluded,
        }


def compute_metrics(est_flow, gt_flow):
    """Compare an estimated flow field against ground truth.

    Per point: epe = ||est - gt||, rel = epe / max(||gt||, eps).
    Acc3DS counts epe < 0.05 or rel < 0.05; Acc3DR epe < 0.1 or rel < 0.1;
    outliers epe > 0.3 or rel > 0.1. MAE is the mean angle between the
    vectors; pairs where either norm is below eps are excluded (angle
    undefined at zero), with the exclusion count reported.
    """
    est = np.asarray(est_flow, dtype=np.float64)
    gt = np.asarray(gt_flow, dtype=np.float64)
    if est.shape != gt.shape:
        raise LengthMismatch(f"flow shapes differ: {est.shape} vs {gt.shape}")
    n = len(est)
    if n == 0:
        raise LengthMismatch("empty flow fields")
    epe = np.linalg.norm(est - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    est_norm = np.linalg.norm(est, axis=1)
    rel = epe / np.maximum(gt_norm, EPS_NORM)

    acc3ds = float(np.mean((epe < 0.05) | (rel < 0.05)))
    acc3dr = float(np.mean((epe < 0.1) | (rel < 0.1)))
    outliers = float(np.mean((epe > 0.3) | (rel > 0.1)))

    usable = (gt_norm >= EPS_NORM) & (est_norm >= EPS_NORM)
    if usable.any():
        cosang = np.einsum("ij,ij->i", est[usable], gt[usable]) / (
            est_norm[usable] * gt_norm[usable]
        )
        mae = float(np.mean(np.arccos(np.clip(cosang, -1.0, 1.0))))
    else:
        mae = 0.0
    return MetricsReport(
        epe3d=float(np.mean(epe)),
        acc3ds=acc3ds,
        acc3dr=acc3dr,
        outlier_frac=outliers,
        mae=mae,
        n_evaluated=n,
        n_angle_excluded=int(n - usable.sum()),
    )

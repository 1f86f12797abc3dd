"""Benchmark error metrics for dense depth against sparse ground truth.

Two families: absolute errors in millimeters (RMSE, MAE) plus inverse-depth
errors per kilometer (iRMSE, iMAE), and the relative family (REL and the
delta thresholds at 1.25, 1.25^2, 1.25^3, strict max-ratio form). Pixels
where the prediction is non-positive are excluded from the inverse and
ratio metrics (counted), but stay in RMSE/MAE. Evaluation is restricted to
ground-truth-valid pixels; everything here is pure and aggregation is
order independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import DepthMap
from .errors import ContractError, EmptyInputError, ShapeError

_DELTA_THRESHOLDS = (1.25, 1.25**2, 1.25**3)


@dataclass(frozen=True)
class MetricReport:
    rmse: float         # mm
    mae: float          # mm
    irmse: float        # 1/km
    imae: float         # 1/km
    rel: float
    delta1: float       # percent
    delta2: float
    delta3: float
    valid_count: int
    excluded_nonpositive: int = 0

    @property
    def ratio_count(self) -> int:
        """Pixels that entered the inverse/ratio metrics."""
        return self.valid_count - self.excluded_nonpositive


def evaluate(pred: DepthMap, gt: DepthMap) -> MetricReport:
    """Compare a prediction against ground truth over the gt-valid pixels."""
    if pred.depth.shape != gt.depth.shape:
        raise ShapeError(f"evaluate: pred {pred.depth.shape} vs gt {gt.depth.shape}")
    mask = gt.valid
    count = int(mask.sum())
    if count == 0:
        raise EmptyInputError("evaluate: ground truth has no valid pixels")
    p = pred.depth[mask]
    g = gt.depth[mask]
    err = p - g
    rmse = 1000.0 * float(np.sqrt(np.mean(err * err)))
    mae = 1000.0 * float(np.mean(np.abs(err)))

    usable = p > 0
    excluded = count - int(usable.sum())
    if excluded < count:
        pu, gu = p[usable], g[usable]
        ierr = 1000.0 / pu - 1000.0 / gu
        irmse = float(np.sqrt(np.mean(ierr * ierr)))
        imae = float(np.mean(np.abs(ierr)))
        rel = float(np.mean(np.abs(pu - gu) / gu))
        ratio = np.maximum(pu / gu, gu / pu)
        d1, d2, d3 = (100.0 * float(np.mean(ratio < t)) for t in _DELTA_THRESHOLDS)
    else:
        irmse = imae = rel = d1 = d2 = d3 = 0.0
    return MetricReport(rmse, mae, irmse, imae, rel, d1, d2, d3, count, excluded)


def aggregate(reports) -> MetricReport:
    """Pixel-weighted pooling, equal to evaluating all pixels at once.

    Quadratic metrics pool via the weighted mean of squares; the inverse and
    ratio metrics weight by each report's usable-pixel count.
    """
    reports = list(reports)
    if not reports:
        raise ContractError("aggregate: empty report list")
    wv = np.array([r.valid_count for r in reports], dtype=np.float64)
    wr = np.array([r.ratio_count for r in reports], dtype=np.float64)
    tv, tr = wv.sum(), wr.sum()

    def pool(values, weights, total, square=False):
        if total == 0:
            return 0.0
        v = np.array(values, dtype=np.float64)
        if square:
            return float(np.sqrt((weights * v * v).sum() / total))
        return float((weights * v).sum() / total)

    return MetricReport(
        rmse=pool([r.rmse for r in reports], wv, tv, square=True),
        mae=pool([r.mae for r in reports], wv, tv),
        irmse=pool([r.irmse for r in reports], wr, tr, square=True),
        imae=pool([r.imae for r in reports], wr, tr),
        rel=pool([r.rel for r in reports], wr, tr),
        delta1=pool([r.delta1 for r in reports], wr, tr),
        delta2=pool([r.delta2 for r in reports], wr, tr),
        delta3=pool([r.delta3 for r in reports], wr, tr),
        valid_count=int(tv),
        excluded_nonpositive=int(sum(r.excluded_nonpositive for r in reports)),
    )


_FIELD_ORDER = (
    "rmse", "mae", "irmse", "imae", "rel",
    "delta1", "delta2", "delta3", "valid_count", "excluded_nonpositive",
)


def report_lines(report: MetricReport) -> list[str]:
    """Human-readable ``name=value`` lines, one metric per line."""
    return [f"{name}={getattr(report, name)!r}" for name in _FIELD_ORDER]


def report_record(report: MetricReport) -> str:
    """Single machine-readable line with fixed field order."""
    return " ".join(f"{name}={getattr(report, name)!r}" for name in _FIELD_ORDER)

"""End-point-error style evaluation of predicted scene flow.

All aggregate means use ``math.fsum`` over the per-point values, which is
correctly rounded and therefore independent of summation order; two
implementations that agree per point agree exactly in the aggregate.

Accuracy and outlier rates test each point against an absolute error
threshold or a threshold relative to the true flow magnitude, whichever is
satisfied (strict inequalities). The relative alternative is skipped for
points whose true flow is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ACC_STRICT_ABS = 0.05
ACC_STRICT_REL = 0.05
ACC_RELAX_ABS = 0.1
ACC_RELAX_REL = 0.1
OUTLIER_ABS = 0.3
OUTLIER_REL = 0.3


class EmptySelectionError(ValueError):
    """Raised when asked to aggregate metrics over zero points."""


@dataclass(frozen=True)
class FlowField:
    """Per-point 3-D motion vectors in meters, one row per point."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"flow field must have shape (N, 3), got {v.shape}")
        if v.size and not np.isfinite(v).all():
            raise ValueError("flow field contains non-finite values")
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class FlowMetrics:
    """Aggregate evaluation over one set of points.

    epe_m: mean Euclidean end-point error, meters.
    acc_strict: fraction with error < 0.05 m or relative error < 5%.
    acc_relax: fraction with error < 0.1 m or relative error < 10%.
    outliers: fraction with error > 0.3 m or relative error > 30%.
    n_points: number of points aggregated.
    """

    epe_m: float
    acc_strict: float
    acc_relax: float
    outliers: float
    n_points: int


def per_point_epe(predicted: FlowField, target: FlowField) -> np.ndarray:
    """Euclidean error of each predicted vector against the target."""
    if len(predicted) != len(target):
        raise ValueError(f"flow fields disagree in length: "
                         f"{len(predicted)} vs {len(target)}")
    d = predicted.vectors - target.vectors
    return np.sqrt((d ** 2).sum(axis=1))


def epe(predicted: FlowField, target: FlowField) -> float:
    """Mean end-point error over all points."""
    errs = per_point_epe(predicted, target)
    if errs.size == 0:
        raise EmptySelectionError("no points: cannot average EPE")
    return math.fsum(errs.tolist()) / errs.size


def evaluate(predicted: FlowField, target: FlowField,
             mask: np.ndarray | None = None) -> FlowMetrics:
    """Compute all aggregate metrics, optionally over a boolean subset.

    `mask` selects which points participate; selecting none is an error.
    """
    errs = per_point_epe(predicted, target)
    mags = np.sqrt((target.vectors ** 2).sum(axis=1))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.dtype != np.bool_ or mask.shape != (len(predicted),):
            raise ValueError(f"mask must be boolean of shape ({len(predicted)},), "
                             f"got {mask.dtype} {mask.shape}")
        errs = errs[mask]
        mags = mags[mask]
    n = errs.size
    if n == 0:
        raise EmptySelectionError("no points selected: cannot aggregate metrics")

    strict = 0
    relax = 0
    out = 0
    for e, m in zip(errs.tolist(), mags.tolist()):
        rel_ok = m > 0.0
        if e < ACC_STRICT_ABS or (rel_ok and e / m < ACC_STRICT_REL):
            strict += 1
        if e < ACC_RELAX_ABS or (rel_ok and e / m < ACC_RELAX_REL):
            relax += 1
        if e > OUTLIER_ABS or (rel_ok and e / m > OUTLIER_REL):
            out += 1
    return FlowMetrics(
        epe_m=math.fsum(errs.tolist()) / n,
        acc_strict=strict / n,
        acc_relax=relax / n,
        outliers=out / n,
        n_points=n,
    )


def evaluate_split(
    predicted: FlowField, target: FlowField, occlusion_mask: np.ndarray,
) -> tuple[FlowMetrics | None, FlowMetrics | None, FlowMetrics]:
    """Metrics over (occluded, non-occluded, all) point subsets.

    An empty occluded or visible subset yields None for that record (its
    metrics are undefined over zero points) while the other records are
    still computed; an entirely empty cloud raises.
    """
    occlusion_mask = np.asarray(occlusion_mask)
    if occlusion_mask.dtype != np.bool_ or occlusion_mask.shape != (len(predicted),):
        raise ValueError(
            f"occlusion mask must be boolean of shape ({len(predicted)},), "
            f"got {occlusion_mask.dtype} {occlusion_mask.shape}")
    occ = evaluate(predicted, target, occlusion_mask) if occlusion_mask.any() else None
    vis = evaluate(predicted, target, ~occlusion_mask) if (~occlusion_mask).any() else None
    return occ, vis, evaluate(predicted, target)

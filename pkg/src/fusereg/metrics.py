"""Challenge-style scoring: landmark errors, robustness, Jacobian analysis."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import DisplacementField, LandmarkSet, Volume3D
from .warp import transform_points


@dataclass(frozen=True)
class SummaryStats:
    median_ae: float
    mean_ae: float
    robustness: float


@dataclass(frozen=True)
class CaseScore:
    """Per-case registration score.

    ``errors`` are post-registration landmark errors in mm, ordered like
    the fixed landmark ids. Robustness is the fraction of landmarks whose
    error strictly improved over the pre-registration baseline.
    """

    case_id: str
    errors: tuple[float, ...]
    median_ae: float
    mean_ae: float
    robustness: float
    neg_jacobian_fraction: float

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "errors_mm": list(self.errors),
            "median_ae_mm": self.median_ae,
            "mean_ae_mm": self.mean_ae,
            "robustness": self.robustness,
            "neg_jacobian_fraction": self.neg_jacobian_fraction,
        }


def landmark_errors(
    fixed_lms: LandmarkSet,
    moving_lms: LandmarkSet,
    field: DisplacementField,
    spacing: Sequence[float],
    origin: Sequence[float],
) -> np.ndarray:
    """Euclidean mm error per landmark id after mapping fixed -> moving.

    Fixed-space landmarks are pushed through the backward field (x ->
    x + u(x)) and compared against the annotated moving-space landmarks.
    """
    fixed_ids = set(fixed_lms.ids)
    moving_ids = set(moving_lms.ids)
    if fixed_ids != moving_ids:
        missing = sorted(fixed_ids.symmetric_difference(moving_ids))
        raise ValueError(f"landmark id mismatch; unpaired ids: {missing}")
    mapped, _ = transform_points(fixed_lms, field, spacing, origin)
    moving_by_id = {i: p for i, p in zip(moving_lms.ids, moving_lms.points)}
    errors = [
        float(np.linalg.norm(p - moving_by_id[i])) for i, p in zip(mapped.ids, mapped.points)
    ]
    return np.asarray(errors, dtype=np.float64)


def summarize(errors_before: Sequence[float], errors_after: Sequence[float]) -> SummaryStats:
    """Median/mean of the post errors plus strict-improvement robustness."""
    before = np.asarray(errors_before, dtype=np.float64)
    after = np.asarray(errors_after, dtype=np.float64)
    if before.size == 0 or after.size == 0:
        raise ValueError("error lists must be nonempty")
    if before.shape != after.shape:
        raise ValueError("error lists must have equal length and matched order")
    return SummaryStats(
        median_ae=float(np.median(after)),
        mean_ae=float(np.mean(after)),
        robustness=float(np.mean(after < before)),
    )


def jacobian_det(field: DisplacementField) -> Volume3D:
    """Voxelwise det(I + grad u).

    Central differences on interior voxels, one-sided at the faces.
    Values <= 0 indicate folding.
    """
    u = field.u.astype(np.float64)
    if min(u.shape[1:]) < 3:
        raise ValueError("jacobian needs at least 3 voxels per axis")
    # J[i][j] = d u_i / d axis_j with (i, j) in (x, y, z) order;
    # array axes are (z, y, x) so axis_j maps to array axis 2 - j.
    J = np.empty((3, 3) + u.shape[1:], dtype=np.float64)
    for i in range(3):
        gz, gy, gx = np.gradient(u[i], axis=(0, 1, 2))
        J[i, 0], J[i, 1], J[i, 2] = gx, gy, gz
    for i in range(3):
        J[i, i] += 1.0
    det = (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )
    return Volume3D(det.astype(np.float32))


def neg_jacobian_fraction(detvol: Volume3D, include_boundary: bool = False) -> float:
    """Fraction of voxels with det <= 0 (folding).

    Face voxels use half-order one-sided gradients, so they are excluded
    by default when an interior exists.
    """
    det = detvol.data
    if not include_boundary and min(det.shape) > 2:
        det = det[1:-1, 1:-1, 1:-1]
    return float(np.mean(det <= 0.0))

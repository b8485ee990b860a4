"""Synthetic pre/post-operative study generation.

Stands in for non-redistributable clinical data: one smooth blob-based
"anatomy" rendered as four contrasts via distinct monotone intensity
maps, deformed by a known smooth-plus-affine displacement field (no
folding, max magnitude <= 8 voxels), with a spherical low-intensity void
inserted only in the post study to mimic post-operative appearance
change. Landmarks sit at blob extrema and are mapped through the exact
field, so the ground truth scores at interpolation error.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io as fio
from .metrics import jacobian_det, neg_jacobian_fraction
from .volume import DisplacementField, LandmarkSet, MultiContrastStudy, Volume3D
from .warp import _sample_field_at, warp

MIN_SIZE = 32
CONTRAST_NAMES = ("t1", "t1ce", "t2", "flair")


@dataclass(frozen=True, eq=False)
class SyntheticCase:
    pre_study: MultiContrastStudy
    post_study: MultiContrastStudy
    gt_field: DisplacementField
    seed: int

    @property
    def case_id(self) -> str:
        return self.pre_study.study_id


def _ellipsoid_support(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    D, H, W = shape
    zz, yy, xx = np.meshgrid(
        np.arange(D, dtype=np.float64),
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        indexing="ij",
    )
    center = np.array([(W - 1) / 2, (H - 1) / 2, (D - 1) / 2])
    semi = np.array([0.42 * W, 0.42 * H, 0.40 * D])
    r2 = (
        ((xx - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((zz - center[2]) / semi[2]) ** 2
    )
    support = np.clip((1.0 - r2) * 3.0, 0.0, 1.0)
    return support, r2


def _blob_geometry(
    rng: np.random.Generator, shape: tuple[int, int, int], n_landmarks: int
) -> tuple[np.ndarray, np.ndarray]:
    """Smooth base anatomy in [0, 1] plus blob centers (voxel xyz)."""
    D, H, W = shape
    support, r2 = _ellipsoid_support(shape)
    center = np.array([(W - 1) / 2, (H - 1) / 2, (D - 1) / 2])
    semi = np.array([0.42 * W, 0.42 * H, 0.40 * D])

    zz, yy, xx = np.meshgrid(
        np.arange(D, dtype=np.float64),
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        indexing="ij",
    )
    base = 0.3 * support
    centers: list[np.ndarray] = []
    min_sep = max(3.0, 0.08 * min(shape))
    attempts = 0
    while len(centers) < n_landmarks + 4 and attempts < 400:
        attempts += 1
        c = center + (rng.uniform(-0.62, 0.62, size=3)) * semi
        if any(np.linalg.norm(c - prev) < min_sep for prev in centers):
            continue
        centers.append(c)
        sigma = rng.uniform(0.06, 0.11) * min(shape)
        amp = rng.uniform(0.5, 1.0)
        d2 = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2
        base = base + amp * np.exp(-d2 / (2.0 * sigma**2))
    base = base * support
    base = base / base.max()
    return base, np.array(centers)


def _random_small_affine(
    rng: np.random.Generator, shape: tuple[int, int, int], scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Linear part + translation (voxel units, xyz) about the grid center.

    Translation-dominant on purpose: post-operative misalignment is
    mostly a global shift, and desk-scale training schedules can only
    recover modest structured motion.
    """
    angle = np.deg2rad(rng.uniform(-2.0, 2.0)) * scale
    axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
    S = np.diag(np.exp(rng.uniform(-0.03, 0.03, size=3) * scale))
    L = R @ S
    t = rng.choice([-1.0, 1.0], size=3) * rng.uniform(1.5, 3.0, size=3) * scale
    D, H, W = shape
    c = np.array([(W - 1) / 2, (H - 1) / 2, (D - 1) / 2])
    t_full = c - L @ c + t
    return L, t_full


def _ground_truth_field(
    rng: np.random.Generator, shape: tuple[int, int, int], max_mag: float = 8.0
) -> DisplacementField:
    """Smoothed random field composed with a small affine; resampled
    until the result is fold-free with magnitude <= max_mag."""
    D, H, W = shape
    zz, yy, xx = np.meshgrid(
        np.arange(D, dtype=np.float64),
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        indexing="ij",
    )
    damping = 1.0
    for _ in range(25):
        noise = rng.standard_normal((3, D, H, W))
        smooth = np.stack([gaussian_filter(n, sigma=0.16 * min(shape)) for n in noise])
        mags = np.sqrt((smooth**2).sum(axis=0))
        target = rng.uniform(1.5, 2.75) * damping
        smooth *= target / mags.max()
        L, t = _random_small_affine(rng, shape, scale=damping)
        # composition (affine after smooth warp): u(p) = A(p + s(p)) - p
        qx, qy, qz = xx + smooth[0], yy + smooth[1], zz + smooth[2]
        u = np.stack(
            [
                L[0, 0] * qx + L[0, 1] * qy + L[0, 2] * qz + t[0] - xx,
                L[1, 0] * qx + L[1, 1] * qy + L[1, 2] * qz + t[1] - yy,
                L[2, 0] * qx + L[2, 1] * qy + L[2, 2] * qz + t[2] - zz,
            ]
        )
        if np.sqrt((u**2).sum(axis=0)).max() > max_mag:
            damping *= 0.75
            continue
        field = DisplacementField(u.astype(np.float32))
        if neg_jacobian_fraction(jacobian_det(field)) == 0.0:
            return field
        damping *= 0.75
    raise RuntimeError("could not generate a fold-free ground-truth field")


def _invert_at_points(field: DisplacementField, targets_xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve q + u(q) = c per point via fixed-point iteration.

    Returns (q, residual_norm) in voxel coordinates.
    """
    u = field.u.astype(np.float64)
    q = targets_xyz.copy()
    for _ in range(60):
        q = targets_xyz - _sample_field_at(u, q)
    residual = q + _sample_field_at(u, q) - targets_xyz
    return q, np.linalg.norm(residual, axis=1)


_PRE_MAPS = {
    "t1": lambda g: g,
    "t1ce": lambda g: g**1.5,
    "t2": lambda g: 0.9 * g**0.6,
    "flair": lambda g: 0.7 * g + 0.3 * g**2,
}
# mild monotone remaps applied to the post study only, so the two time
# points have genuinely different intensity statistics
_POST_MAPS = {
    "t1": lambda v: 1.15 * v + 0.05 * v**2,
    "t1ce": lambda v: 0.9 * v + 0.1 * v**2,
    "t2": lambda v: 1.1 * v,
    "flair": lambda v: 0.95 * v + 0.08 * v**2,
}


def make_synthetic_case(
    seed: int,
    size: Union[int, Sequence[int]] = 48,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    n_landmarks: int = 12,
) -> SyntheticCase:
    """Deterministic synthetic registration case.

    ``size`` is the grid edge length (or a (D, H, W) triple), at least
    32 per dimension.
    """
    shape = (size, size, size) if isinstance(size, int) else tuple(int(s) for s in size)
    if len(shape) != 3 or min(shape) < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE} per dimension, got {shape}")
    if n_landmarks < 10:
        raise ValueError("need at least 10 landmark pairs")

    rng = np.random.default_rng(seed)
    base, centers = _blob_geometry(rng, shape, n_landmarks)
    gt_field = _ground_truth_field(rng, shape)

    origin = (0.0, 0.0, 0.0)
    pre_vols = {
        name: Volume3D(_PRE_MAPS[name](base).astype(np.float32), spacing, origin)
        for name in CONTRAST_NAMES
    }

    # post = pre warped by the ground truth, remapped, with a resection void
    D, H, W = shape
    zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    void_center = centers[rng.integers(len(centers))]
    void_r = 0.09 * min(shape)
    d2 = (xx - void_center[0]) ** 2 + (yy - void_center[1]) ** 2 + (zz - void_center[2]) ** 2
    void = 1.0 - 0.85 * np.clip((1.0 - d2 / void_r**2) * 2.0, 0.0, 1.0)

    post_vols = {}
    for name in CONTRAST_NAMES:
        warped = warp(pre_vols[name], gt_field).data.astype(np.float64)
        post_vols[name] = Volume3D(
            (_POST_MAPS[name](warped) * void).astype(np.float32), spacing, origin
        )

    # landmarks: moving blob extrema; fixed-space positions solve q + u(q) = c
    fixed_vox, residual = _invert_at_points(gt_field, centers)
    margin = 2.0
    dims_xyz = np.array([W, H, D], dtype=np.float64)
    ok = (
        (residual < 1e-3)
        & (fixed_vox >= margin).all(axis=1)
        & (fixed_vox <= dims_xyz - 1 - margin).all(axis=1)
        & (centers >= margin).all(axis=1)
        & (centers <= dims_xyz - 1 - margin).all(axis=1)
    )
    keep = np.flatnonzero(ok)[:n_landmarks]
    if keep.size < 10:
        raise RuntimeError(f"only {keep.size} usable landmark pairs were generated")
    ids = tuple(range(1, keep.size + 1))
    spacing_arr = np.asarray(spacing)
    moving_lms = LandmarkSet(ids, centers[keep] * spacing_arr)
    fixed_lms = LandmarkSet(ids, fixed_vox[keep] * spacing_arr)

    study_id = f"synth-{seed}"
    pre_study = MultiContrastStudy(
        t1=pre_vols["t1"], t1ce=pre_vols["t1ce"], t2=pre_vols["t2"], flair=pre_vols["flair"],
        landmarks=moving_lms, study_id=study_id,
    )
    post_study = MultiContrastStudy(
        t1=post_vols["t1"], t1ce=post_vols["t1ce"], t2=post_vols["t2"], flair=post_vols["flair"],
        landmarks=fixed_lms, study_id=study_id,
    )
    return SyntheticCase(pre_study, post_study, gt_field, seed)


# ---------------------------------------------------------------------------
# case directory layout (used by the CLI)


def save_case(case: SyntheticCase, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, study in (("pre", case.pre_study), ("post", case.post_study)):
        for name in CONTRAST_NAMES:
            fio.save_volume(getattr(study, name), out / f"{prefix}_{name}.nii.gz")
        if study.landmarks is not None:
            fio.save_landmarks(study.landmarks, out / f"{prefix}_landmarks.csv")
    fio.save_field(case.gt_field.u, out / "gt_field.nii.gz", case.pre_study.spacing)
    (out / "case.json").write_text(
        json.dumps({"study_id": case.case_id, "seed": case.seed}, indent=2) + "\n"
    )
    return out


def _load_study(directory: Path, prefix: str, preprocessed: bool) -> MultiContrastStudy:
    vols = {}
    for name in CONTRAST_NAMES:
        pp = directory / f"{prefix}_{name}_pp.nii.gz"
        raw = directory / f"{prefix}_{name}.nii.gz"
        vols[name] = fio.load_volume(pp if (preprocessed and pp.exists()) else raw)
    lm_path = directory / f"{prefix}_landmarks.csv"
    landmarks = fio.load_landmarks(lm_path) if lm_path.exists() else None
    meta = directory / "case.json"
    study_id = json.loads(meta.read_text())["study_id"] if meta.exists() else directory.name
    return MultiContrastStudy(
        t1=vols["t1"], t1ce=vols["t1ce"], t2=vols["t2"], flair=vols["flair"],
        landmarks=landmarks, study_id=study_id,
    )


def load_case_dir(
    directory, prefer_preprocessed: bool = True
) -> tuple[MultiContrastStudy, MultiContrastStudy, Optional[DisplacementField]]:
    """Read (pre_study, post_study, gt_field-if-present) from a case dir."""
    directory = Path(directory)
    pre = _load_study(directory, "pre", prefer_preprocessed)
    post = _load_study(directory, "post", prefer_preprocessed)
    gt_path = directory / "gt_field.nii.gz"
    gt = DisplacementField(fio.load_field(gt_path)) if gt_path.exists() else None
    return pre, post, gt

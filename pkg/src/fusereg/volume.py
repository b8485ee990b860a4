"""Volume/landmark data model and intensity preprocessing.

Conventions used across the package:

* volume arrays are indexed ``[z, y, x]`` with shape ``(D, H, W)``;
* coordinate triples (``spacing``, ``origin``, landmark positions,
  displacement components) are ordered ``(x, y, z)``;
* the world position of voxel ``(z, y, x)`` is
  ``origin + (x, y, z) * spacing`` in millimeters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

Triple = tuple[float, float, float]


def _as_triple(value: Sequence[float], name: str) -> Triple:
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    if not all(np.isfinite(t)):
        raise ValueError(f"{name} must be finite, got {t}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar 3D grid with voxel spacing (mm) and world origin.

    ``data`` is float32 and is never mutated by any operation in this
    package; preprocessing statistics are computed in float64.
    """

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        spacing = _as_triple(self.spacing, "spacing")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume with the same grid metadata."""
        return Volume3D(data, self.spacing, self.origin)

    def allclose(self, other: "Volume3D", atol: float = 0.0) -> bool:
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.allclose(self.data, other.data, rtol=0.0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class BrainMask:
    """Boolean foreground mask over a Volume3D grid."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.dtype != np.bool_:
            data = data.astype(bool)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel 3-vector displacement in voxel units on the fixed grid.

    ``u`` has shape (3, D, H, W); component 0 displaces along x (array
    axis 3), component 1 along y, component 2 along z. Backward mapping:
    ``warped(p) = moving(p + u(p))``.
    """

    u: np.ndarray

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=np.float32)
        if u.ndim != 4 or u.shape[0] != 3:
            raise ValueError(f"field must be (3, D, H, W), got {u.shape}")
        if not np.isfinite(u).all():
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "u", u)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.u.shape[1:]  # type: ignore[return-value]

    @classmethod
    def zero(cls, shape: tuple[int, int, int]) -> "DisplacementField":
        return cls(np.zeros((3,) + tuple(shape), dtype=np.float32))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered anatomical points in world mm with stable integer ids."""

    ids: tuple[int, ...]
    points: np.ndarray  # (N, 3) float64, columns (x, y, z)

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.ids)
        points = np.asarray(self.points, dtype=np.float64).reshape(len(ids), 3)
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate landmark id {dupes[0]}")
        if not np.isfinite(points).all():
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points", points)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, float, float, float]]) -> "LandmarkSet":
        rows = list(entries)
        ids = tuple(int(r[0]) for r in rows)
        pts = np.array([[r[1], r[2], r[3]] for r in rows], dtype=np.float64).reshape(len(rows), 3)
        return cls(ids, pts)

    def entries(self) -> list[tuple[int, float, float, float]]:
        return [(i, float(p[0]), float(p[1]), float(p[2])) for i, p in zip(self.ids, self.points)]

    def point_of(self, landmark_id: int) -> np.ndarray:
        idx = self.ids.index(int(landmark_id))
        return self.points[idx]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[int, float, float, float]]:
        return iter(self.entries())


@dataclass(frozen=True, eq=False)
class MultiContrastStudy:
    """The four co-registered contrasts of one time point plus landmarks."""

    t1: Volume3D
    t1ce: Volume3D
    t2: Volume3D
    flair: Volume3D
    landmarks: Optional[LandmarkSet] = None
    study_id: str = ""

    def __post_init__(self) -> None:
        ref = self.t1
        for name in ("t1ce", "t2", "flair"):
            vol: Volume3D = getattr(self, name)
            if vol.shape != ref.shape:
                raise ValueError(f"{name} shape {vol.shape} != t1 shape {ref.shape}")
            if vol.spacing != ref.spacing or vol.origin != ref.origin:
                raise ValueError(f"{name} grid metadata differs from t1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t1.shape

    @property
    def spacing(self) -> Triple:
        return self.t1.spacing

    @property
    def origin(self) -> Triple:
        return self.t1.origin

    def contrasts(self) -> tuple[Volume3D, Volume3D, Volume3D, Volume3D]:
        """Volumes in fusion-pipeline order (t1ce, t1, flair, t2)."""
        return (self.t1ce, self.t1, self.flair, self.t2)

    def replace_volumes(
        self,
        t1: Volume3D,
        t1ce: Volume3D,
        t2: Volume3D,
        flair: Volume3D,
    ) -> "MultiContrastStudy":
        return MultiContrastStudy(t1, t1ce, t2, flair, self.landmarks, self.study_id)


def brain_mask(vol: Volume3D, threshold: float = 0.0) -> BrainMask:
    """Foreground mask: voxels whose magnitude exceeds ``threshold``.

    Challenge-style volumes are skull-stripped with zero background, so
    the default threshold of 0 selects exactly the brain.
    """
    mask = np.abs(vol.data) > threshold
    if not mask.any():
        raise ValueError("empty mask: volume has no foreground voxels")
    return BrainMask(mask)


def znorm_brain(vol: Volume3D, mask: BrainMask) -> Volume3D:
    """Z-score the masked region (mean 0, std 1); background set to 0."""
    if mask.data.shape != vol.shape:
        raise ValueError(f"mask shape {mask.data.shape} != volume shape {vol.shape}")
    selected = vol.data[mask.data].astype(np.float64)
    if selected.size < 2:
        raise ValueError("mask must cover at least 2 voxels")
    mean = selected.mean()
    std = selected.std()
    if std == 0.0:
        raise ValueError("constant region: std over mask is zero")
    out = np.zeros(vol.shape, dtype=np.float32)
    out[mask.data] = ((selected - mean) / std).astype(np.float32)
    return vol.with_data(out)


def histogram_match(
    src: Volume3D,
    ref: Volume3D,
    mask_src: BrainMask,
    mask_ref: BrainMask,
    nbins: int = 256,
) -> Volume3D:
    """Map masked ``src`` intensities onto ``ref``'s distribution.

    Classic CDF matching over ``nbins`` histogram bins: each masked source
    voxel is sent through the source CDF and back through the inverse of
    the reference CDF. The map is monotone; background voxels are left
    unchanged. Quantization error is bounded by one bin width.
    """
    if nbins < 2:
        raise ValueError(f"invalid bins: nbins must be >= 2, got {nbins}")
    if not mask_src.data.any() or not mask_ref.data.any():
        raise ValueError("empty mask: histogram matching needs nonempty masks")
    if mask_src.data.shape != src.shape:
        raise ValueError("source mask shape mismatch")
    if mask_ref.data.shape != ref.shape:
        raise ValueError("reference mask shape mismatch")

    s = src.data[mask_src.data].astype(np.float64)
    r = ref.data[mask_ref.data].astype(np.float64)

    s_hist, s_edges = np.histogram(s, bins=nbins)
    r_hist, r_edges = np.histogram(r, bins=nbins)
    # CDF sampled at bin edges; the bin holding a value always rises, so
    # inverting through the reference CDF stays within one bin width
    s_cdf = np.concatenate([[0.0], np.cumsum(s_hist) / s.size])
    r_cdf = np.concatenate([[0.0], np.cumsum(r_hist) / r.size])

    quantiles = np.interp(s, s_edges, s_cdf)
    mapped = np.interp(quantiles, r_cdf, r_edges)

    out = src.data.copy()
    out[mask_src.data] = mapped.astype(np.float32)
    return src.with_data(out)

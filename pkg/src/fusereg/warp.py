"""Spatial transformer (trilinear backward warping), affine transforms
and intensity-based affine pre-registration.

Warping uses backward mapping: ``warped(p) = moving(p + u(p))`` with
trilinear interpolation; out-of-bounds samples clamp to the border
voxel. The sampler is written with floor/gather arithmetic so that a
zero field reproduces the moving image bit-exactly at grid points, and
it is differentiable w.r.t. both the image values and the field.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .volume import BrainMask, DisplacementField, LandmarkSet, Volume3D


# ---------------------------------------------------------------------------
# trilinear warping


def _base_grid(shape: Sequence[int], dtype: torch.dtype, device) -> tuple[torch.Tensor, ...]:
    D, H, W = shape
    zz, yy, xx = torch.meshgrid(
        torch.arange(D, dtype=dtype, device=device),
        torch.arange(H, dtype=dtype, device=device),
        torch.arange(W, dtype=dtype, device=device),
        indexing="ij",
    )
    return zz, yy, xx


def _warp_batched(vol: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """vol (B, C, D, H, W), u (B, 3, D, H, W) -> warped (B, C, D, H, W)."""
    B, C, D, H, W = vol.shape
    zz, yy, xx = _base_grid((D, H, W), u.dtype, u.device)
    sx = (xx + u[:, 0]).clamp(0, W - 1)
    sy = (yy + u[:, 1]).clamp(0, H - 1)
    sz = (zz + u[:, 2]).clamp(0, D - 1)

    x0f, y0f, z0f = sx.floor(), sy.floor(), sz.floor()
    wx, wy, wz = sx - x0f, sy - y0f, sz - z0f
    x0 = x0f.long()
    y0 = y0f.long()
    z0 = z0f.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    z1 = (z0 + 1).clamp(max=D - 1)

    flat = vol.reshape(B, C, D * H * W)

    def corner(zi, yi, xi):
        idx = ((zi * H + yi) * W + xi).reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, idx).reshape(B, C, D, H, W)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    wz = wz.unsqueeze(1)
    out = (
        corner(z0, y0, x0) * (1 - wz) * (1 - wy) * (1 - wx)
        + corner(z0, y0, x1) * (1 - wz) * (1 - wy) * wx
        + corner(z0, y1, x0) * (1 - wz) * wy * (1 - wx)
        + corner(z0, y1, x1) * (1 - wz) * wy * wx
        + corner(z1, y0, x0) * wz * (1 - wy) * (1 - wx)
        + corner(z1, y0, x1) * wz * (1 - wy) * wx
        + corner(z1, y1, x0) * wz * wy * (1 - wx)
        + corner(z1, y1, x1) * wz * wy * wx
    )
    return out


def warp_tensor(vol: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Warp a (D,H,W) or (B,C,D,H,W) tensor by a matching field tensor."""
    if vol.ndim == 3 and u.ndim == 4:
        return _warp_batched(vol[None, None], u[None].to(vol.dtype))[0, 0]
    if vol.ndim == 5 and u.ndim == 5:
        if vol.shape[0] != u.shape[0]:
            raise ValueError("batch size mismatch between volume and field")
        return _warp_batched(vol, u.to(vol.dtype))
    raise ValueError(f"unsupported shapes: vol {tuple(vol.shape)}, field {tuple(u.shape)}")


def warp(moving, field):
    """Resample the moving image through the displacement field.

    Accepts (Volume3D, DisplacementField) and returns a Volume3D, or raw
    tensors (see :func:`warp_tensor`).
    """
    if isinstance(moving, Volume3D):
        u = field.u if isinstance(field, DisplacementField) else np.asarray(field)
        if tuple(u.shape[1:]) != moving.shape:
            raise ValueError(f"shape mismatch: field grid {u.shape[1:]} vs volume {moving.shape}")
        out = warp_tensor(torch.from_numpy(moving.data), torch.from_numpy(np.asarray(u)))
        return moving.with_data(out.numpy())
    return warp_tensor(moving, field.u if isinstance(field, DisplacementField) else field)


# ---------------------------------------------------------------------------
# affine transforms


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """12-parameter transform in voxel coordinates: p -> linear @ p + translation."""

    linear: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,), components (x, y, z)

    def __post_init__(self) -> None:
        linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(linear).all() and np.isfinite(translation).all()):
            raise ValueError("affine transform must be finite")
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply_points(self, pts_xyz: np.ndarray) -> np.ndarray:
        """Transform (N, 3) voxel-space points."""
        return pts_xyz @ self.linear.T + self.translation

    def matrix34(self) -> list[list[float]]:
        return [list(map(float, row)) + [float(t)] for row, t in zip(self.linear, self.translation)]

    def to_json(self) -> str:
        return json.dumps({"matrix": self.matrix34(), "units": "voxels"}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AffineTransform":
        m = np.asarray(json.loads(text)["matrix"], dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


def _affine_field_tensor(
    linear: torch.Tensor, translation: torch.Tensor, shape: Sequence[int]
) -> torch.Tensor:
    """Displacement tensor (3, D, H, W) of p -> linear @ p + translation."""
    zz, yy, xx = _base_grid(shape, linear.dtype, linear.device)
    ux = linear[0, 0] * xx + linear[0, 1] * yy + linear[0, 2] * zz + translation[0] - xx
    uy = linear[1, 0] * xx + linear[1, 1] * yy + linear[1, 2] * zz + translation[1] - yy
    uz = linear[2, 0] * xx + linear[2, 1] * yy + linear[2, 2] * zz + translation[2] - zz
    return torch.stack([ux, uy, uz])


def affine_to_field(transform: AffineTransform, shape: Sequence[int]) -> DisplacementField:
    """Dense displacement field u(p) = (linear @ p + translation) - p."""
    u = _affine_field_tensor(
        torch.from_numpy(transform.linear),
        torch.from_numpy(transform.translation),
        tuple(shape),
    )
    return DisplacementField(u.numpy().astype(np.float32))


def compose_affine_after(deformable: DisplacementField, transform: AffineTransform) -> DisplacementField:
    """Total field of (affine ∘ deformable): u(p) = u_def(p) + u_aff(p + u_def(p)).

    The affine displacement is evaluated in closed form at the displaced
    positions, matching warping the affine-prewarped moving image by the
    deformable field.
    """
    D, H, W = deformable.grid_shape
    zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    u = deformable.u.astype(np.float64)
    q = np.stack([xx + u[0], yy + u[1], zz + u[2]])  # (3, D, H, W), xyz
    q_flat = q.reshape(3, -1).T
    aff = q_flat @ (transform.linear.T - np.eye(3)) + transform.translation
    total = u + aff.T.reshape(3, D, H, W)
    return DisplacementField(total.astype(np.float32))


# ---------------------------------------------------------------------------
# landmark mapping


def _sample_field_at(u: np.ndarray, pts_xyz: np.ndarray) -> np.ndarray:
    """Trilinearly sample a (3, D, H, W) field at (N, 3) voxel points."""
    _, D, H, W = u.shape
    x = np.clip(pts_xyz[:, 0], 0, W - 1)
    y = np.clip(pts_xyz[:, 1], 0, H - 1)
    z = np.clip(pts_xyz[:, 2], 0, D - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    z0 = np.floor(z).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    z1 = np.minimum(z0 + 1, D - 1)
    wx, wy, wz = x - x0, y - y0, z - z0
    out = (
        u[:, z0, y0, x0] * (1 - wz) * (1 - wy) * (1 - wx)
        + u[:, z0, y0, x1] * (1 - wz) * (1 - wy) * wx
        + u[:, z0, y1, x0] * (1 - wz) * wy * (1 - wx)
        + u[:, z0, y1, x1] * (1 - wz) * wy * wx
        + u[:, z1, y0, x0] * wz * (1 - wy) * (1 - wx)
        + u[:, z1, y0, x1] * wz * (1 - wy) * wx
        + u[:, z1, y1, x0] * wz * wy * (1 - wx)
        + u[:, z1, y1, x1] * wz * wy * wx
    )
    return out.T  # (N, 3)


def transform_points(
    points: LandmarkSet,
    field: DisplacementField,
    spacing: Sequence[float],
    origin: Sequence[float],
) -> tuple[LandmarkSet, list[int]]:
    """Map world-mm landmarks through the field.

    Each point is converted to voxel coordinates, the displacement is
    sampled there, and the displaced point is returned in world mm.
    Returns the mapped set plus the ids of points outside the field's
    extent (those are clamped to the border for sampling).
    """
    spacing_arr = np.asarray(spacing, dtype=np.float64)
    origin_arr = np.asarray(origin, dtype=np.float64)
    D, H, W = field.grid_shape
    dims_xyz = np.array([W, H, D], dtype=np.float64)

    voxels = (points.points - origin_arr) / spacing_arr
    oob = [
        int(lm_id)
        for lm_id, v in zip(points.ids, voxels)
        if (v < 0).any() or (v > dims_xyz - 1).any()
    ]
    displaced = voxels + _sample_field_at(field.u.astype(np.float64), voxels)
    world = origin_arr + displaced * spacing_arr
    return LandmarkSet(points.ids, world), oob


# ---------------------------------------------------------------------------
# affine pre-registration


@dataclass(frozen=True)
class AffineConfig:
    """Optimizer settings for intensity-based affine registration."""

    levels: int = 3
    iters_per_level: int = 200
    lr: float = 1e-2
    contrast: str = "t1ce"  # which study contrast drives the affine stage

    def __post_init__(self) -> None:
        if self.levels < 1 or self.iters_per_level < 0 or self.lr <= 0:
            raise ValueError("invalid affine configuration")


@dataclass(frozen=True)
class AffineRegistration:
    """Result of :func:`affine_register`."""

    transform: AffineTransform
    final_mse: float
    identity_mse: float
    improved: bool


def _downsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return x
    D, H, W = x.shape[-3:]
    pad = [(-s) % factor for s in (W, H, D)]
    x5 = x[None, None]
    if any(pad):
        x5 = F.pad(x5, (0, pad[0], 0, pad[1], 0, pad[2]), mode="replicate")
    return F.avg_pool3d(x5, factor)[0, 0]


def _masked_mse(warped: torch.Tensor, fixed: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    return (weight * (warped - fixed) ** 2).sum() / weight.sum()


def affine_register(
    moving: Volume3D,
    fixed: Volume3D,
    config: AffineConfig = AffineConfig(),
    mask_moving: Optional[BrainMask] = None,
    mask_fixed: Optional[BrainMask] = None,
) -> AffineRegistration:
    """Fit the 12-parameter transform minimizing masked MSE.

    Adam over a coarse-to-fine resolution pyramid, initialized at the
    identity. If the optimized transform does not beat the identity MSE
    at full resolution (or degenerates), the identity is returned with
    ``improved=False`` and a warning.
    """
    if moving.shape != fixed.shape:
        raise ValueError(f"shape mismatch: {moving.shape} vs {fixed.shape}")
    m_mask = mask_moving.data if mask_moving is not None else np.abs(moving.data) > 0
    f_mask = mask_fixed.data if mask_fixed is not None else np.abs(fixed.data) > 0
    if not m_mask.any() or not f_mask.any():
        raise ValueError("empty mask: affine registration needs foreground on both sides")

    m_full = torch.from_numpy(moving.data.astype(np.float32))
    f_full = torch.from_numpy(fixed.data.astype(np.float32))
    w_full = torch.from_numpy((m_mask | f_mask).astype(np.float32))

    # optimize about the grid center: p -> L (p - c) + c + t. This
    # decorrelates the linear and translation gradients; the result is
    # converted back to corner form at the end.
    D, H, W = moving.shape
    c_full = torch.tensor([(W - 1) / 2.0, (H - 1) / 2.0, (D - 1) / 2.0])
    linear = torch.eye(3, dtype=torch.float32, requires_grad=True)
    translation = torch.zeros(3, dtype=torch.float32, requires_grad=True)
    eye = torch.eye(3, dtype=torch.float32)

    for level in range(config.levels):
        factor = 2 ** (config.levels - 1 - level)
        m_lvl = _downsample(m_full, factor)
        f_lvl = _downsample(f_full, factor)
        w_lvl = _downsample(w_full, factor)
        if float(w_lvl.sum()) == 0.0:
            continue
        # full-res voxel p = factor * q + off for level voxel q
        off = torch.full((3,), (factor - 1) / 2.0)
        opt = torch.optim.Adam([linear, translation], lr=config.lr * factor)
        iters = config.iters_per_level
        for it in range(iters):
            # step decays within the level to settle the coupled params
            scale = 0.1 ** (it / max(1, iters - 1))
            for group in opt.param_groups:
                group["lr"] = config.lr * factor * scale
            opt.zero_grad()
            t_lvl = ((linear - eye) @ (off - c_full) + translation) / factor
            u = _affine_field_tensor(linear, t_lvl, m_lvl.shape)
            warped = warp_tensor(m_lvl, u)
            loss = _masked_mse(warped, f_lvl, w_lvl)
            loss.backward()
            opt.step()

    linear_np = linear.detach().numpy().astype(np.float64)
    t_centered = translation.detach().numpy().astype(np.float64)
    c_np = c_full.numpy().astype(np.float64)
    candidate = AffineTransform(linear_np, (np.eye(3) - linear_np) @ c_np + t_centered)
    with torch.no_grad():
        identity_mse = float(_masked_mse(m_full, f_full, w_full))
        u_full = _affine_field_tensor(
            torch.from_numpy(candidate.linear).float(),
            torch.from_numpy(candidate.translation).float(),
            m_full.shape,
        )
        final_mse = float(_masked_mse(warp_tensor(m_full, u_full), f_full, w_full))

    degenerate = abs(float(np.linalg.det(candidate.linear))) < 1e-6
    if final_mse > identity_mse or degenerate or not math.isfinite(final_mse):
        warnings.warn("affine registration did not improve on identity; returning identity")
        return AffineRegistration(AffineTransform.identity(), identity_mse, identity_mse, False)
    return AffineRegistration(candidate, final_mse, identity_mse, True)

"""Edge-map extraction: 3D Gaussian blur, fixed Sobel bank, normalized
gradient magnitude.

Kernels are indexed ``[z][y][x]`` like volume data. Filters are applied
as cross-correlation with replicate-padded borders; the derivative
kernels are antisymmetric, so this differs from true convolution only in
sign and the gradient magnitude is unaffected.

Functions accept either a :class:`~fusereg.volume.Volume3D` (returning a
Volume3D) or a torch tensor whose last three dims are spatial (returning
a tensor and preserving autograd).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .volume import Volume3D

EDGE_EPS = 1e-12  # sqrt stabilizer for differentiability at zero magnitude

_SMOOTH = np.array([1.0, 2.0, 1.0])
_DERIV = np.array([-1.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class SobelBank:
    """The three fixed 3x3x3 Sobel kernels (x, y, z gradients)."""

    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    def stacked(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Kernels as a (3, 1, 3, 3, 3) conv weight."""
        arr = np.stack([self.sx, self.sy, self.sz])[:, None]
        return torch.as_tensor(arr, dtype=dtype)


@dataclass(frozen=True, eq=False)
class GaussianKernel3:
    """Sampled 3x3x3 Gaussian, normalized to unit sum."""

    weights: np.ndarray

    def as_weight(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.weights[None, None], dtype=dtype)


def sobel_bank() -> SobelBank:
    """Kernels detecting intensity gradients along x, y and z."""
    sx = np.einsum("i,j,k->ijk", _SMOOTH, _SMOOTH, _DERIV)
    sy = np.einsum("i,j,k->ijk", _SMOOTH, _DERIV, _SMOOTH)
    sz = np.einsum("i,j,k->ijk", _DERIV, _SMOOTH, _SMOOTH)
    return SobelBank(sx, sy, sz)


def gaussian_kernel3(sigma: float = 1.0) -> GaussianKernel3:
    """3x3x3 Gaussian sampled on {-1,0,1}^3, normalized to sum 1."""
    offs = np.array([-1.0, 0.0, 1.0])
    sq = offs[:, None, None] ** 2 + offs[None, :, None] ** 2 + offs[None, None, :] ** 2
    w = np.exp(-sq / (2.0 * sigma**2))
    return GaussianKernel3(w / w.sum())


def _filter3(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Cross-correlate with replicate padding; x: (N, 1, D, H, W)."""
    padded = F.pad(x, (1, 1, 1, 1, 1, 1), mode="replicate")
    return F.conv3d(padded, weight)


def _to_batched(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    if x.ndim < 3:
        raise ValueError(f"expected at least 3 spatial dims, got shape {tuple(x.shape)}")
    lead = tuple(x.shape[:-3])
    return x.reshape((-1, 1) + tuple(x.shape[-3:])), lead


def _blur_tensor(x: torch.Tensor) -> torch.Tensor:
    batched, lead = _to_batched(x)
    weight = gaussian_kernel3().as_weight(x.dtype).to(x.device)
    out = _filter3(batched, weight)
    return out.reshape(lead + tuple(x.shape[-3:]))


def _sobel_tensor(x: torch.Tensor) -> torch.Tensor:
    """Raw directional responses; output shape (..., 3, D, H, W)."""
    batched, lead = _to_batched(x)
    weight = sobel_bank().stacked(x.dtype).to(x.device)
    out = _filter3(batched, weight)
    return out.reshape(lead + (3,) + tuple(x.shape[-3:]))


def _edge_map_tensor(x: torch.Tensor) -> torch.Tensor:
    g = _blur_tensor(x)
    grads = _sobel_tensor(g)
    sq = (grads**2).sum(dim=-4)
    dims = (-3, -2, -1)
    # flat input -> all-zero map; checked on the input itself since conv
    # accumulation leaves sub-ulp noise the max-normalization would amplify
    flat = x.amax(dim=dims, keepdim=True) == x.amin(dim=dims, keepdim=True)
    sq_max = sq.amax(dim=dims, keepdim=True)
    mag = torch.sqrt(sq + EDGE_EPS)
    scale = mag.amax(dim=dims, keepdim=True)
    return torch.where(flat | (sq_max == 0), torch.zeros_like(mag), mag / scale)


def _dispatch(vol, fn):
    if isinstance(vol, Volume3D):
        out = fn(torch.from_numpy(vol.data))
        return vol.with_data(out.numpy())
    if isinstance(vol, torch.Tensor):
        return fn(vol)
    return fn(torch.as_tensor(np.asarray(vol)))


def gaussian_blur3(vol):
    """Blur with the unit-sum 3x3x3 Gaussian (sigma 1), replicate borders."""
    return _dispatch(vol, _blur_tensor)


def sobel_response(vol):
    """Un-normalized, un-blurred Sobel responses, stacked (x, y, z) first.

    Returned shape is (3, D, H, W) for a Volume3D/3D input (as a plain
    tensor or array-backed tensor), (..., 3, D, H, W) for batched tensors.
    """
    if isinstance(vol, Volume3D):
        return _sobel_tensor(torch.from_numpy(vol.data)).numpy()
    return _dispatch(vol, _sobel_tensor)


def edge_map(vol):
    """Eq.-style edge map: blur, Sobel magnitude, divide by global max.

    Output lies in [0, 1]; a flat input maps to all zeros, anything else
    attains 1 at the strongest edge.
    """
    return _dispatch(vol, _edge_map_tensor)

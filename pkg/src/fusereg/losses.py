"""Composite registration objective: image MSE, diffusion smoothness of
the displacement field, and edge-map similarity.

Loss functions accept Volume3D / numpy / torch inputs. When any input is
a torch tensor the result is a 0-dim tensor on the autograd tape;
otherwise a plain float. All reductions are means, so values are
resolution-independent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .edges import _edge_map_tensor
from .volume import DisplacementField, Volume3D


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights of the three loss terms; defaults reproduce
    the plain unweighted sum."""

    w_mse: float = 1.0
    w_diff: float = 1.0
    w_edge: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_mse", "w_diff", "w_edge"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    """One training step's loss terms and their weighted total."""

    l_mse: float
    l_diff: float
    l_edge: float
    l_total: float

    def json_record(self, step: int) -> dict:
        return {
            "step": step,
            "l_mse": self.l_mse,
            "l_diff": self.l_diff,
            "l_edge": self.l_edge,
            "l_total": self.l_total,
        }


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, True
    if isinstance(x, Volume3D):
        return torch.from_numpy(x.data), False
    if isinstance(x, DisplacementField):
        return torch.from_numpy(x.u), False
    return torch.as_tensor(np.asarray(x)), False


def _ret(value: torch.Tensor, keep_tensor: bool):
    return value if keep_tensor else float(value)


def mse_loss(a, b):
    """Mean squared voxelwise difference."""
    ta, keep_a = _as_tensor(a)
    tb, keep_b = _as_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return _ret(((ta - tb) ** 2).mean(), keep_a or keep_b)


def diffusion_loss(field):
    """Forward-difference smoothness penalty on a (3, D, H, W) field.

    Mean over interior voxels of the summed squared forward differences
    of all three vector components along all three axes.
    """
    u, keep = _as_tensor(field)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"field must be (3, D, H, W), got {tuple(u.shape)}")
    if min(u.shape[1:]) < 2:
        raise ValueError("field needs at least 2 voxels per axis")
    dz = (u[:, 1:, :, :] - u[:, :-1, :, :])[:, :, :-1, :-1]
    dy = (u[:, :, 1:, :] - u[:, :, :-1, :])[:, :-1, :, :-1]
    dx = (u[:, :, :, 1:] - u[:, :, :, :-1])[:, :-1, :-1, :]
    per_voxel = (dx**2 + dy**2 + dz**2).sum(dim=0)
    return _ret(per_voxel.mean(), keep)


def edge_loss(warped, fixed):
    """MSE between the normalized edge maps of the two images."""
    tw, keep_w = _as_tensor(warped)
    tf, keep_f = _as_tensor(fixed)
    if tw.shape != tf.shape:
        raise ValueError(f"shape mismatch: {tuple(tw.shape)} vs {tuple(tf.shape)}")
    return _ret(((_edge_map_tensor(tw) - _edge_map_tensor(tf)) ** 2).mean(), keep_w or keep_f)


def total_loss(warped, fixed, field, weights: LossWeights = LossWeights()) -> LossReport:
    """All three terms plus their weighted sum, as plain floats."""
    l_mse = float(mse_loss(warped, fixed))
    l_diff = float(diffusion_loss(field))
    l_edge = float(edge_loss(warped, fixed))
    l_total = weights.w_mse * l_mse + weights.w_diff * l_diff + weights.w_edge * l_edge
    return LossReport(l_mse=l_mse, l_diff=l_diff, l_edge=l_edge, l_total=l_total)

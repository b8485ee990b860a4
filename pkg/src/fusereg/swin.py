"""3D shifted-window attention encoder.

Feature maps flow channels-last (B, D, H, W, C) inside this module.
Blocks alternate shift 0 and window/2; shifted blocks use the cyclic
shift with an attention mask over wrap-around zones. Relative position
bias is applied inside each window.
"""
from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn

Window = tuple[int, int, int]


def window_partition(x: torch.Tensor, window: Window) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * num_windows, wd*wh*ww, C)."""
    B, D, H, W, C = x.shape
    wd, wh, ww = window
    x = x.view(B, D // wd, wd, H // wh, wh, W // ww, ww, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, wd * wh * ww, C)


def window_reverse(windows: torch.Tensor, window: Window, dims: Sequence[int]) -> torch.Tensor:
    """Inverse of :func:`window_partition` for spatial dims ``(D, H, W)``."""
    D, H, W = dims
    wd, wh, ww = window
    C = windows.shape[-1]
    x = windows.view(-1, D // wd, H // wh, W // ww, wd, wh, ww, C)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(-1, D, H, W, C)


def _relative_position_index(window: Window) -> torch.Tensor:
    coords = torch.stack(
        torch.meshgrid(
            torch.arange(window[0]), torch.arange(window[1]), torch.arange(window[2]),
            indexing="ij",
        )
    ).flatten(1)  # (3, N)
    rel = coords[:, :, None] - coords[:, None, :]  # (3, N, N)
    rel = rel.permute(1, 2, 0).contiguous()
    rel[..., 0] += window[0] - 1
    rel[..., 1] += window[1] - 1
    rel[..., 2] += window[2] - 1
    strides = ((2 * window[1] - 1) * (2 * window[2] - 1), 2 * window[2] - 1, 1)
    return (rel[..., 0] * strides[0] + rel[..., 1] * strides[1] + rel[..., 2]).long()


def shifted_window_mask(
    dims: Sequence[int], window: Window, shift: Window, device, dtype
) -> torch.Tensor:
    """Additive attention mask (num_windows, N, N) for cyclic-shifted windows."""
    zones = torch.zeros(dims, device=device)
    count = 0

    def spans(size: int, w: int, s: int):
        if s == 0:
            return [slice(0, size)]
        return [slice(0, -w), slice(-w, -s), slice(-s, None)]

    for dz in spans(dims[0], window[0], shift[0]):
        for dy in spans(dims[1], window[1], shift[1]):
            for dx in spans(dims[2], window[2], shift[2]):
                zones[dz, dy, dx] = count
                count += 1
    windows = window_partition(zones[None, ..., None], window).squeeze(-1)  # (nW, N)
    diff = windows.unsqueeze(1) - windows.unsqueeze(2)
    mask = torch.zeros_like(diff, dtype=dtype)
    return mask.masked_fill(diff != 0, -100.0)


class WindowAttention3d(nn.Module):
    """Multi-head self attention within non-overlapping 3D windows."""

    def __init__(self, dim: int, window: Window, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        n_rel = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
        self.relative_position_bias_table = nn.Parameter(torch.zeros(n_rel, num_heads))
        self.register_buffer("relative_position_index", _relative_position_index(window))
        self.record_attention = False
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        Bn, N, C = x.shape
        qkv = self.qkv(x).reshape(Bn, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (Bn, heads, N, hd)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        bias = bias.view(N, N, self.num_heads).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bn // nW, nW, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(Bn, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        if self.record_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(Bn, N, C)
        return self.proj(out)


class SwinBlock3d(nn.Module):
    """Pre-norm attention + MLP block with optional cyclic shift."""

    def __init__(self, dim: int, num_heads: int, window: Window, shift: Window, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, D, H, W, C = x.shape
        dims = (D, H, W)
        for axis, (size, w) in enumerate(zip(dims, self.window)):
            if size % w:
                raise ValueError(f"stage dim {axis} ({size}) not divisible by window {w}")
        # no point shifting an axis a single window covers
        shift = tuple(0 if dims[i] <= self.window[i] else self.shift[i] for i in range(3))

        shortcut = x
        x = self.norm1(x)
        if any(shift):
            x = torch.roll(x, shifts=(-shift[0], -shift[1], -shift[2]), dims=(1, 2, 3))
            mask = shifted_window_mask(dims, self.window, shift, x.device, x.dtype)
        else:
            mask = None
        windows = window_partition(x, self.window)
        windows = self.attn(windows, mask)
        x = window_reverse(windows, self.window, dims)
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=(1, 2, 3))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging3d(nn.Module):
    """2x downsampling by concatenating 2x2x2 neighborhoods; C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, D, H, W, C = x.shape
        if D % 2 or H % 2 or W % 2:
            raise ValueError(f"patch merging needs even dims, got {(D, H, W)}")
        parts = [
            x[:, dz::2, dy::2, dx::2] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)
        ]
        x = torch.cat(parts, dim=-1)
        return self.reduction(self.norm(x))


class SwinEncoder3d(nn.Module):
    """Patch embedding plus shifted-window stages; emits NCDHW features
    at resolutions 1/patch, 1/(2*patch), ... of the input."""

    def __init__(
        self,
        in_channels: int,
        embed_dim: int,
        depths: Sequence[int],
        num_heads: Sequence[int],
        window: Window,
        patch_size: int,
    ):
        super().__init__()
        if len(depths) != len(num_heads):
            raise ValueError("depths and heads must have the same length")
        self.patch_embed = nn.Conv3d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.embed_norm = nn.LayerNorm(embed_dim)
        half = tuple(w // 2 for w in window)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i, (depth, heads) in enumerate(zip(depths, num_heads)):
            dim = embed_dim * 2**i
            blocks = nn.ModuleList(
                SwinBlock3d(dim, heads, window, (0, 0, 0) if b % 2 == 0 else half)
                for b in range(depth)
            )
            self.stages.append(blocks)
            if i + 1 < len(depths):
                self.merges.append(PatchMerging3d(dim))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(x).permute(0, 2, 3, 4, 1)  # channels last
        x = self.embed_norm(x)
        features = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            features.append(x.permute(0, 4, 1, 2, 3).contiguous())
            if i < len(self.merges):
                x = self.merges[i](x)
        return features

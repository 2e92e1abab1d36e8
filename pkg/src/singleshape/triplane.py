"""Tri-plane feature maps and the occupancy decoder.

Coordinates are normalized to [0, 1]^3 with the cell-center convention: along
an axis of extent ``n`` the centers sit at ``(i + 0.5) / n``.  Bilinear lookups
clamp at the plane borders.

Decoding uses the linearity of bilinear interpolation: the decoder's first
affine layer is applied to the planes once, and the projected planes are then
interpolated.  Point queries and whole-grid queries share exactly the same
floating point operations, so ``decode_grid`` equals a loop over
``decode_point`` bit for bit.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
from torch import nn

# integer-snap tolerance (in cells) so lookups at cell centers are exact
_SNAP = 1e-6


class TriPlane(NamedTuple):
    """Three axis-aligned feature planes: xy (C, D, H), xz (C, D, W), yz (C, H, W)."""

    xy: torch.Tensor
    xz: torch.Tensor
    yz: torch.Tensor

    @property
    def channels(self) -> int:
        return self.xy.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.xy.shape[1], self.xy.shape[2], self.xz.shape[2])

    def validate(self) -> TriPlane:
        if any(p.dim() != 3 for p in self):
            raise ValueError("tri-plane maps must be (C, A, B) tensors")
        c = {p.shape[0] for p in self}
        if len(c) != 1:
            raise ValueError(f"channel counts differ across planes: {sorted(c)}")
        d, h, w = self.dims
        if self.xz.shape[1] != d or self.yz.shape[1] != h or self.yz.shape[2] != w:
            raise ValueError(
                "inconsistent plane extents: "
                f"xy{tuple(self.xy.shape[1:])} xz{tuple(self.xz.shape[1:])} yz{tuple(self.yz.shape[1:])}")
        return self

    def map(self, fn) -> TriPlane:
        return TriPlane(fn(self.xy), fn(self.xz), fn(self.yz))

    def numel(self) -> int:
        return sum(p.numel() for p in self)


def triplane_numel(dims, channels: int = 32) -> int:
    d, h, w = dims
    return channels * (d * h + d * w + h * w)


def plane_extents(dims) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    d, h, w = dims
    return (d, h), (d, w), (h, w)


def cell_centers(n: int) -> torch.Tensor:
    """Normalized cell-center coordinates of an axis with ``n`` cells (float64)."""
    return (torch.arange(n, dtype=torch.float64) + 0.5) / n


def _lerp_weights(p: torch.Tensor, n: int, dtype):
    """Indices and weights for linear interpolation at normalized coords ``p``."""
    u = p.to(torch.float64) * n - 0.5
    u = torch.clamp(u, 0.0, float(n - 1))
    near = torch.round(u)
    u = torch.where((u - near).abs() < _SNAP, near, u)
    i0 = torch.floor(u).long()
    i1 = torch.clamp(i0 + 1, max=n - 1)
    return i0, i1, (u - i0).to(dtype)


def _lerp(lo: torch.Tensor, hi: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    # lo + t (hi - lo) is exact for constant data and at t = 0
    return lo + t * (hi - lo)


def interp_plane(plane: torch.Tensor, pa: torch.Tensor, pb: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of a (C, A, B) plane at N normalized points -> (C, N)."""
    _, na, nb = plane.shape
    a0, a1, ta = _lerp_weights(pa, na, plane.dtype)
    b0, b1, tb = _lerp_weights(pb, nb, plane.dtype)
    r0 = _lerp(plane[:, a0, b0], plane[:, a1, b0], ta)
    r1 = _lerp(plane[:, a0, b1], plane[:, a1, b1], ta)
    return _lerp(r0, r1, tb)


def resize_plane(plane: torch.Tensor, na_out: int, nb_out: int) -> torch.Tensor:
    """Bilinear resize of a (C, A, B) plane, evaluated at the target cell centers."""
    _, na, nb = plane.shape
    a0, a1, ta = _lerp_weights(cell_centers(na_out), na, plane.dtype)
    b0, b1, tb = _lerp_weights(cell_centers(nb_out), nb, plane.dtype)
    rows = _lerp(plane[:, a0, :], plane[:, a1, :], ta[:, None])
    return _lerp(rows[:, :, b0], rows[:, :, b1], tb)


def _as_points(p) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=torch.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {tuple(p.shape)}")
    return torch.clamp(p.reshape(-1, 3), 0.0, 1.0)


def query_features(T: TriPlane, p) -> torch.Tensor:
    """Concatenated bilinear features [f_xy, f_xz, f_yz] at points ``p`` -> (N, 3C)."""
    pts = _as_points(p)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    f = torch.cat([interp_plane(T.xy, x, y), interp_plane(T.xz, x, z), interp_plane(T.yz, y, z)], 0)
    return f.T


class OccupancyDecoder(nn.Module):
    """Two-layer MLP: affine(3C -> hidden) + ReLU, affine(hidden -> 1) + Sigmoid.

    The decoder never sees point coordinates, only interpolated features.
    """

    def __init__(self, channels: int = 32, hidden: int = 32):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(3 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        for layer in (self.fc1, self.fc2):
            nn.init.normal_(layer.weight, 0.0, 0.02)
            nn.init.zeros_(layer.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Occupancy for raw (N, 3C) feature vectors."""
        h = torch.relu(self.fc1(features))
        return torch.sigmoid(self.fc2(h)).squeeze(-1)

    def project(self, T: TriPlane) -> TriPlane:
        """Apply the first affine layer's weights to every plane (no bias)."""
        c = self.channels
        w = self.fc1.weight
        parts = (w[:, :c], w[:, c:2 * c], w[:, 2 * c:])
        return TriPlane(*(torch.einsum("kc,cab->kab", wk, plane) for wk, plane in zip(parts, T)))

    def _head(self, a: torch.Tensor, b: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        # a, b, c broadcast to (K, ...); reduction over K in a fixed order
        h = a + b
        h = h + c
        h = h + self.fc1.bias.view(-1, *([1] * (h.dim() - 1)))
        h = torch.relu(h)
        w2 = self.fc2.weight[0]
        logit = h[0] * w2[0]
        for k in range(1, h.shape[0]):
            logit = logit + h[k] * w2[k]
        logit = logit + self.fc2.bias[0]
        return torch.sigmoid(logit.double()).to(logit.dtype)


def decode_point(T: TriPlane, M: OccupancyDecoder, p) -> torch.Tensor:
    """Occupancy probability at normalized points ``p`` (..., 3) -> (N,)."""
    pts = _as_points(p)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    P = M.project(T)
    return M._head(interp_plane(P.xy, x, y), interp_plane(P.xz, x, z), interp_plane(P.yz, y, z))


def decode_grid(T: TriPlane, M: OccupancyDecoder, dims=None, chunk: int | None = None) -> torch.Tensor:
    """Decode the occupancy of every cell center of a (D', H', W') grid.

    ``dims`` defaults to the tri-plane's own extents; any other size queries
    the implicit function at that resolution.  ``chunk`` bounds the number of
    D'-slices decoded at once.
    """
    dims = tuple(int(s) for s in (dims or T.dims))
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"invalid decode dims {dims}")
    d, h, w = dims
    P = M.project(T)
    a = resize_plane(P.xy, d, h)[:, :, :, None]
    b = resize_plane(P.xz, d, w)[:, :, None, :]
    c = resize_plane(P.yz, h, w)[:, None, :, :]
    if chunk is None:
        # ~ 64M hidden activations per chunk
        chunk = max(1, (1 << 26) // max(1, a.shape[0] * h * w))
    if chunk >= d:
        return M._head(a, b, c)
    return torch.cat([M._head(a[:, s:s + chunk], b[:, s:s + chunk], c)
                      for s in range(0, d, chunk)], 0)


def upsample_triplane(T: TriPlane, target_dims) -> TriPlane:
    """Bilinearly resize each plane so the tri-plane matches ``target_dims``."""
    target_dims = tuple(int(s) for s in target_dims)
    if any(t < s for t, s in zip(target_dims, T.dims)):
        raise ValueError(f"cannot shrink tri-plane {T.dims} to {target_dims}")
    if target_dims == T.dims:
        return T
    d, h, w = target_dims
    return TriPlane(resize_plane(T.xy, d, h), resize_plane(T.xz, d, w), resize_plane(T.yz, h, w))


def grid_to_numpy(grid: torch.Tensor) -> np.ndarray:
    return grid.detach().cpu().numpy().astype(np.float32)

"""Occupancy grids: validation, voxelization, resampling, blurring, pyramids, SSGV I/O.

A voxel grid is a float32 numpy array of shape (D, H, W) with values in [0, 1].
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .objfile import Mesh

MAGIC = b"SSGV"
VERSION = 1
_HEADER = struct.Struct("<4sB3I")
HEADER_SIZE = _HEADER.size

# coarsest largest dim must reach this (two receptive fields of the critic)
MIN_COARSE_DIM = 22


class GridFormatError(ValueError):
    """Raised for malformed SSGV files."""


def check_grid(grid, name: str = "grid", binary: bool = False) -> np.ndarray:
    """Validate and convert an occupancy grid, in the spirit of ``check_array``."""
    arr = np.asarray(grid)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3-dimensional (D, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty axis: {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    if binary:
        arr = (arr >= 0.5).astype(np.float32)
    return arr


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


# ---------------------------------------------------------------------------
# voxelization

def _sample_triangles(tri: np.ndarray, spacing: float) -> np.ndarray:
    """Points on each triangle with spacing <= ``spacing`` along every edge."""
    edges = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]], 1)
    longest = np.linalg.norm(edges, axis=2).max(axis=1)
    n_sub = np.maximum(1, np.ceil(longest / spacing)).astype(np.int64)
    points = [tri.reshape(-1, 3)]
    for n in np.unique(n_sub):
        sel = tri[n_sub == n]
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = i + j <= n
        u, v = i[keep] / n, j[keep] / n
        w = 1.0 - u - v
        bary = np.stack([w, u, v], 1)  # (P, 3)
        points.append(np.einsum("pk,fkd->fpd", bary, sel).reshape(-1, 3))
    return np.concatenate(points, 0)


def voxelize_to_dims(mesh: Mesh, dims) -> np.ndarray:
    """Solid voxelization of ``mesh``'s bounding box into a grid of exactly ``dims``.

    Surface cells are rasterized on a supersampled grid, the interior is
    flood-filled (anything unreachable from outside is solid) and the result
    is box-averaged back to ``dims`` and thresholded at 0.5.
    """
    if mesh.is_empty:
        raise ValueError("cannot voxelize an empty mesh")
    dims = np.asarray(dims, dtype=np.int64)
    if dims.shape != (3,) or np.any(dims < 1):
        raise ValueError(f"invalid target dims {tuple(dims)}")
    lo, hi = mesh.bounds()
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError(f"degenerate mesh bounding box with extent {extent}")

    # supersampling keeps the rasterized shell thin relative to the shape
    k = int(np.clip(math.ceil(128 / dims.max()), 1, 4))
    fine = dims * k
    tri = (mesh.triangles() - lo) / extent * fine
    pts = _sample_triangles(tri, spacing=0.5)
    idx = np.clip(np.floor(pts).astype(np.int64), 0, fine - 1)
    surface = np.zeros(tuple(fine), dtype=bool)
    surface[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    solid = ndimage.binary_fill_holes(surface)
    if k > 1:
        frac = solid.reshape(dims[0], k, dims[1], k, dims[2], k).mean(axis=(1, 3, 5))
    else:
        frac = solid.astype(np.float64)
    return (frac >= 0.5).astype(np.float32)


def grid_dims_for(extent, largest_dim: int) -> tuple[int, int, int]:
    extent = np.asarray(extent, dtype=np.float64)
    cell = extent.max() / largest_dim
    return tuple(max(1, round_half_up(e / cell)) for e in extent)


def voxelize_mesh(mesh: Mesh, largest_dim: int) -> np.ndarray:
    """Voxelize so the largest axis has ``largest_dim`` cells, keeping the aspect ratio."""
    if mesh.is_empty:
        raise ValueError("cannot voxelize an empty mesh")
    if largest_dim < 15:
        raise ValueError(f"largest_dim must be >= 15, got {largest_dim}")
    lo, hi = mesh.bounds()
    if np.any(hi - lo <= 0):
        raise ValueError(f"degenerate mesh bounding box with extent {hi - lo}")
    return voxelize_to_dims(mesh, grid_dims_for(hi - lo, largest_dim))


# ---------------------------------------------------------------------------
# resampling and smoothing

def _overlap_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells by their overlap with each output cell."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def box_resample(grid: np.ndarray, dims) -> np.ndarray:
    """Area-weighted (box filter) resampling to arbitrary ``dims``."""
    out = np.asarray(grid, dtype=np.float64)
    for axis, n in enumerate(dims):
        if out.shape[axis] == n:
            continue
        m = _overlap_matrix(int(n), out.shape[axis])
        out = np.moveaxis(np.tensordot(m, np.moveaxis(out, axis, 0), axes=1), 0, axis)
    return out


def _linear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Cell-center linear interpolation weights, clamped at the edges."""
    u = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = u - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m


def resize_trilinear(grid: np.ndarray, dims) -> np.ndarray:
    """Trilinear resize with the cell-center convention (edge values clamp)."""
    out = np.asarray(grid, dtype=np.float64)
    for axis, n in enumerate(dims):
        if out.shape[axis] == n:
            continue
        m = _linear_matrix(int(n), out.shape[axis])
        out = np.moveaxis(np.tensordot(m, np.moveaxis(out, axis, 0), axes=1), 0, axis)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """1D normalized Gaussian taps, same radius rule as scipy.ndimage."""
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_blur(grid, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 4 sigma, zero padding."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    grid = check_grid(grid)
    if sigma == 0:
        return grid.copy()
    out = ndimage.gaussian_filter(grid.astype(np.float64), sigma, mode="constant",
                                  cval=0.0, truncate=4.0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# pyramids

@dataclass
class PyramidConfig:
    scale_factor: float = 0.75
    min_dim: int = 15
    blur_sigma: float = 0.5
    num_scales: int | str = "auto"
    finest_size: int = 128  # only used when the source is a mesh

    def validate(self) -> None:
        if not 0 < self.scale_factor < 1:
            raise ValueError(f"scale_factor must be in (0, 1), got {self.scale_factor}")
        if self.min_dim < 1:
            raise ValueError(f"min_dim must be >= 1, got {self.min_dim}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.num_scales != "auto" and (not isinstance(self.num_scales, int)
                                          or self.num_scales < 0):
            raise ValueError(f"num_scales must be 'auto' or a non-negative int, got {self.num_scales}")
        if self.finest_size < 15:
            raise ValueError(f"finest_size must be >= 15, got {self.finest_size}")


@dataclass
class VoxelPyramid:
    levels: list[np.ndarray]
    scale_factor: float
    finest_size: int
    config: PyramidConfig = field(default_factory=PyramidConfig)

    @property
    def num_scales(self) -> int:
        return len(self.levels) - 1

    @property
    def dims(self) -> list[tuple[int, int, int]]:
        return [tuple(int(s) for s in g.shape) for g in self.levels]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def choose_num_scales(finest_dims, r: float = 0.75) -> int:
    """Largest N whose coarsest level still has a largest dim of at least 22."""
    top = max(finest_dims)
    if top < MIN_COARSE_DIM:
        raise ValueError(f"largest dimension {top} is below {MIN_COARSE_DIM}")
    n = 0
    while round_half_up(top * r ** (n + 1)) >= MIN_COARSE_DIM:
        n += 1
    return n


def level_dims(finest_dims, r: float, num_scales: int, min_dim: int = 15) -> list[tuple[int, int, int]]:
    """Per-level dims, coarse to fine, each axis clamped to at least ``min_dim``."""
    dims = []
    for i in range(num_scales + 1):
        f = r ** (num_scales - i)
        dims.append(tuple(max(min_dim, round_half_up(s * f)) for s in finest_dims))
    return dims


def build_pyramid(source, config: PyramidConfig | None = None) -> VoxelPyramid:
    """Voxel pyramid of a mesh or an occupancy grid, coarse to fine, blurred per level."""
    config = config or PyramidConfig()
    config.validate()
    r = config.scale_factor
    if isinstance(source, Mesh):
        if source.is_empty:
            raise ValueError("cannot build a pyramid from an empty mesh")
        lo, hi = source.bounds()
        if np.any(hi - lo <= 0):
            raise ValueError(f"degenerate mesh bounding box with extent {hi - lo}")
        finest = grid_dims_for(hi - lo, config.finest_size)
        n = choose_num_scales(finest, r) if config.num_scales == "auto" else config.num_scales
        levels = [voxelize_to_dims(source, d)
                  for d in level_dims(finest, r, n, config.min_dim)]
    else:
        grid = check_grid(source, "source")
        if max(grid.shape) < config.min_dim:
            raise ValueError(f"source grid {grid.shape} is smaller than min_dim={config.min_dim}")
        finest = grid.shape
        n = choose_num_scales(finest, r) if config.num_scales == "auto" else config.num_scales
        levels = []
        for d in level_dims(finest, r, n, config.min_dim):
            resampled = box_resample(grid, d) if d != finest else grid
            levels.append((resampled >= 0.5).astype(np.float32))
    levels = [gaussian_blur(g, config.blur_sigma) for g in levels]
    return VoxelPyramid(levels, r, int(max(finest)), config)


# ---------------------------------------------------------------------------
# SSGV files

def save_grid(grid, path) -> None:
    grid = check_grid(grid)
    d, h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, h, w))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes(order="C"))


def load_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise GridFormatError(f"{path}: file too short for an SSGV header")
    magic, version, d, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise GridFormatError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise GridFormatError(f"{path}: unsupported SSGV version {version}")
    expected = HEADER_SIZE + 4 * d * h * w
    if len(data) != expected:
        raise GridFormatError(f"{path}: size {len(data)} does not match dims {(d, h, w)}")
    values = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).reshape(d, h, w)
    return values.astype(np.float32)


def load_source(path):
    """Load a training source: an OBJ mesh or an SSGV grid."""
    from .objfile import read_obj

    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    return load_grid(path)

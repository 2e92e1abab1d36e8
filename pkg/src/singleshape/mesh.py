"""Iso-surface extraction, Laplacian smoothing and high-resolution querying."""
from __future__ import annotations

import numpy as np
from scipy import sparse
from skimage import measure

from .objfile import Mesh, write_obj
from .voxgrid import check_grid, resize_trilinear

WELD_TOL = 1e-7


def weld(mesh: Mesh, tol: float = WELD_TOL) -> Mesh:
    """Merge vertices closer than ``tol`` (grid-snapped) and drop degenerate faces."""
    if mesh.is_empty:
        return Mesh()
    keys = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    faces = inverse[mesh.faces]
    verts = mesh.vertices[first]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    tri = verts[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area2 > 0]
    used, remap = np.unique(faces, return_inverse=True)
    return Mesh(verts[used], remap.reshape(-1, 3))


def extract_mesh(grid, iso: float = 0.5, close_boundary: bool = False) -> Mesh:
    """Marching Cubes over cell-center samples; vertices in normalized [0, 1]^3.

    ``close_boundary`` pads with empty cells so shapes touching the grid
    border come out closed.  A grid with no iso crossing yields an empty mesh.
    """
    grid = check_grid(grid)
    if min(grid.shape) < 2:
        raise ValueError(f"marching cubes needs at least 2 cells per axis, got {grid.shape}")
    dims = np.array(grid.shape, dtype=np.float64)
    offset = 0.5
    if close_boundary:
        grid = np.pad(grid, 1)
        offset = -0.5
    lo, hi = grid.min(), grid.max()
    if lo == hi or iso < lo or iso > hi:
        return Mesh()
    try:
        verts, faces, _, _ = measure.marching_cubes(grid, level=iso, method="lewiner")
    except (ValueError, RuntimeError):
        return Mesh()
    return weld(Mesh((verts + offset) / dims, faces))


def _adjacency(mesh: Mesh) -> sparse.csr_matrix:
    f = mesh.faces
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    n = len(mesh.vertices)
    adj = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0  # duplicate edges count once
    return adj


def laplacian_smooth(mesh: Mesh, iterations: int = 5, lam: float = 0.5) -> Mesh:
    """Uniform Laplacian smoothing: v <- v + lam * (mean(1-ring) - v)."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    verts = mesh.vertices.copy()
    if iterations == 0 or mesh.is_empty:
        return Mesh(verts, mesh.faces.copy())
    adj = _adjacency(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    has_ring = deg > 0
    for _ in range(iterations):
        mean = adj @ verts
        mean[has_ring] /= deg[has_ring, None]
        mean[~has_ring] = verts[~has_ring]
        verts = verts + lam * (mean - verts)
    return Mesh(verts, mesh.faces.copy())


def euler_characteristic(mesh: Mesh) -> int:
    f = np.sort(mesh.faces, axis=1)
    edges = np.unique(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]]), axis=0)
    return len(mesh.vertices) - len(edges) + len(mesh.faces)


def trilinear_upsample(grid, k: int) -> np.ndarray:
    """Cell-center trilinear upsampling of an occupancy grid by an integer factor."""
    if k < 1:
        raise ValueError("multiplier must be >= 1")
    grid = check_grid(grid)
    if k == 1:
        return grid.copy()
    return resize_trilinear(grid, tuple(s * k for s in grid.shape))


def query_highres(stack, k: int, noise=None) -> np.ndarray:
    """Decode the finest tri-plane at ``k`` times the training resolution.

    ``noise`` defaults to the reconstruction anchor; pass a NoiseSpec for a
    random sample.
    """
    from . import sampler

    if k < 1:
        raise ValueError("multiplier must be >= 1")
    noise = noise if noise is not None else sampler.anchor_noise(stack)
    return sampler.synthesize(stack, noise, upsample=k)


def grid_to_obj(grid, path, iso: float = 0.5, smooth_iterations: int = 5,
                comment: str | None = None) -> Mesh:
    mesh = extract_mesh(grid, iso, close_boundary=True)
    mesh = laplacian_smooth(mesh, smooth_iterations)
    write_obj(mesh, path, comment)
    return mesh

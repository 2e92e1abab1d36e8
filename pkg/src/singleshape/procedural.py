"""Small procedural shapes for demos and tests."""
from __future__ import annotations

import numpy as np


def colonnade(dims=(64, 24, 40), column=4, spacing=8, base=4, seed=0, broken=0.3) -> np.ndarray:
    """Binary colonnade: a slab base with square columns along its rim.

    Axis 1 is vertical.  A fraction ``broken`` of the columns are cut at a
    random height, which gives the shape some local variation to learn.
    """
    rng = np.random.default_rng(seed)
    d, h, w = dims
    grid = np.zeros(dims, dtype=np.float32)
    margin = 2
    grid[margin:d - margin, :base, margin:w - margin] = 1.0
    top = h - 2
    xs = range(margin + 1, d - margin - column, spacing)
    zs = range(margin + 1, w - margin - column, spacing)
    sites = {(x, z) for x in xs for z in (zs[0], zs[-1])} | {(x, z) for z in zs for x in (xs[0], xs[-1])}
    for x, z in sorted(sites):
        height = top
        if rng.random() < broken:
            height = int(rng.integers(base + 3, top - 2))
        grid[x:x + column, base:height, z:z + column] = 1.0
    return grid


def column_lattice(dims=(64, 24, 40), column=4, spacing=8, base=4, seed=0,
                   min_height=6) -> np.ndarray:
    """Binary slab with a full lattice of square columns of random heights (axis 1 vertical).

    Every local neighbourhood repeats many times across the lattice, so the
    shape has a rich set of similar patches to learn from.
    """
    rng = np.random.default_rng(seed)
    d, h, w = dims
    grid = np.zeros(dims, dtype=np.float32)
    grid[:, :base, :] = 1.0
    for x in range((spacing - column) // 2, d - column + 1, spacing):
        for z in range((spacing - column) // 2, w - column + 1, spacing):
            top = int(rng.integers(base + min_height, h - 1))
            grid[x:x + column, base:top, z:z + column] = 1.0
    return grid


def acceptance_shape(dims=(64, 24, 40)) -> np.ndarray:
    """Reference shape for the acceptance run: the default column lattice at ``dims``."""
    return column_lattice(dims)


def ball(dims=(24, 24, 24), radius=0.35) -> np.ndarray:
    """Solid ball occupancy centered in the grid (radius in normalized units)."""
    axes = [(np.arange(n) + 0.5) / n - 0.5 for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    return (x ** 2 + y ** 2 + z ** 2 <= radius ** 2).astype(np.float32)

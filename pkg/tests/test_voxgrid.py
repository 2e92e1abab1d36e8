import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from singleshape.objfile import box_mesh, uv_sphere
from singleshape.voxgrid import (
    HEADER_SIZE,
    GridFormatError,
    PyramidConfig,
    box_resample,
    build_pyramid,
    choose_num_scales,
    gaussian_blur,
    gaussian_kernel,
    level_dims,
    load_grid,
    save_grid,
    voxelize_mesh,
)

# voxelize_mesh

def test_unit_cube_fills_grid():
    grid = voxelize_mesh(box_mesh(), 16)
    assert grid.shape == (16, 16, 16)
    assert np.all(grid == 1)


def test_box_aspect_preserved():
    assert voxelize_mesh(box_mesh((0, 0, 0), (2, 1, 1)), 32).shape == (32, 16, 16)


def test_sphere_volume_fraction():
    grid = voxelize_mesh(uv_sphere((0.5, 0.5, 0.5), 0.5), 32)
    assert abs(grid.mean() - math.pi / 6) <= 0.05 * math.pi / 6


def test_voxelization_deterministic():
    m = uv_sphere((0.5, 0.5, 0.5), 0.4, 12, 24)
    assert np.array_equal(voxelize_mesh(m, 20), voxelize_mesh(m, 20))


def test_voxelize_rejects_tiny_resolution():
    with pytest.raises(ValueError):
        voxelize_mesh(box_mesh(), 10)


# gaussian_blur

def test_blur_sigma_zero_identity(rng):
    g = rng.random((7, 8, 9)).astype(np.float32)
    assert np.array_equal(gaussian_blur(g, 0.0), g)


def test_blur_constant_interior_unchanged():
    out = gaussian_blur(np.ones((12, 12, 12), np.float32), 0.5)
    # kernel radius is ceil(4 * 0.5) = 2 cells; zero padding only touches the outer 2 layers
    assert np.allclose(out[2:-2, 2:-2, 2:-2], 1.0, atol=1e-6)
    assert out.min() < 1.0


def test_blur_impulse_matches_tabulated_kernel():
    g = np.zeros((9, 9, 9), np.float32)
    g[4, 4, 4] = 1
    out = gaussian_blur(g, 0.5)
    # oracle: explicit kernel tabulation, exp(-x^2 / (2 sigma^2)) over |x| <= 4 sigma, renormalized
    x = np.arange(-2, 3)
    k = np.exp(-x ** 2 / (2 * 0.25))
    k /= k.sum()
    assert np.allclose(gaussian_kernel(0.5), k)
    assert out[4, 4, 4] == pytest.approx(k[2] ** 3, abs=1e-6)
    assert out.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(out[2:7, 2:7, 2:7], np.einsum("i,j,k->ijk", k, k, k), atol=1e-7)


# pyramid

def test_cube_pyramid_sequence():
    pyr = build_pyramid(box_mesh(), PyramidConfig(num_scales=6, finest_size=128))
    assert [max(d) for d in pyr.dims] == [23, 30, 41, 54, 72, 96, 128]


@pytest.mark.parametrize("dims,n", [((128, 128, 128), 6), ((256, 72, 118), 8), ((128, 36, 60), 6),
                                    ((22, 22, 22), 0)])
def test_choose_num_scales(dims, n):
    assert choose_num_scales(dims, 0.75) == n


def test_acropolis_level_count():
    assert len(level_dims((256, 72, 118), 0.75, 8)) == 9


def test_small_axis_clamped_to_15():
    dims = level_dims((128, 36, 60), 0.75, 6)
    assert dims[-1] == (128, 36, 60)
    assert dims[0][1] == 15  # 36 * 0.75^6 = 6.4 -> 15
    assert min(min(d) for d in dims) == 15


@given(st.tuples(*[st.integers(15, 200)] * 3), st.integers(0, 8),
       st.floats(0.5, 0.9))
def test_pyramid_monotone(finest, n, r):
    dims = level_dims(finest, r, n)
    for lo, hi in zip(dims, dims[1:]):
        assert all(a <= b for a, b in zip(lo, hi))
    assert dims[-1] == tuple(finest)
    assert all(min(d) >= 15 for d in dims)


def test_grid_pyramid_all_ones_stays_ones():
    pyr = build_pyramid(np.ones((40, 32, 20), np.float32), PyramidConfig(num_scales=3, blur_sigma=0))
    assert all(np.all(level == 1) for level in pyr.levels)
    for dims in [(30, 24, 15), (17, 15, 15)]:
        assert np.allclose(box_resample(np.ones((40, 32, 20)), dims), 1.0)


def test_grid_pyramid_levels_blurred():
    g = np.zeros((32, 32, 32), np.float32)
    g[8:24, 8:24, 8:24] = 1
    pyr = build_pyramid(g, PyramidConfig(num_scales=2))
    ref = ndimage.gaussian_filter(g, 0.5, mode="constant", truncate=4.0)
    assert np.allclose(pyr[2], ref, atol=1e-6)


# SSGV

def test_ssgv_roundtrip(tmp_path):
    g = np.full((2, 2, 2), 0.5, np.float32)
    save_grid(g, tmp_path / "g.ssgv")
    out = load_grid(tmp_path / "g.ssgv")
    assert out.dtype == np.float32 and out.tobytes() == g.tobytes()


def test_ssgv_layout(tmp_path):
    g = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 24
    save_grid(g, tmp_path / "g.ssgv")
    raw = (tmp_path / "g.ssgv").read_bytes()
    assert raw[:4] == b"SSGV" and raw[4] == 1
    assert struct.unpack("<3I", raw[5:17]) == (2, 3, 4)
    assert np.array_equal(np.frombuffer(raw[17:], "<f4"), g.ravel())


def test_ssgv_file_size(tmp_path):
    save_grid(np.zeros((128, 128, 128), np.float32), tmp_path / "g.ssgv")
    assert HEADER_SIZE == 17
    assert (tmp_path / "g.ssgv").stat().st_size == HEADER_SIZE + 128 ** 3 * 4


def test_ssgv_bad_magic(tmp_path):
    save_grid(np.zeros((2, 2, 2), np.float32), tmp_path / "g.ssgv")
    raw = bytearray((tmp_path / "g.ssgv").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "bad.ssgv").write_bytes(bytes(raw))
    with pytest.raises(GridFormatError):
        load_grid(tmp_path / "bad.ssgv")


def test_ssgv_truncated(tmp_path):
    save_grid(np.zeros((3, 3, 3), np.float32), tmp_path / "g.ssgv")
    (tmp_path / "t.ssgv").write_bytes((tmp_path / "g.ssgv").read_bytes()[:-4])
    with pytest.raises(GridFormatError):
        load_grid(tmp_path / "t.ssgv")


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2 ** 31))
def test_ssgv_roundtrip_property(tmp_path_factory, dims, seed):
    g = np.random.default_rng(seed).random(dims, dtype=np.float32)
    path = tmp_path_factory.mktemp("ssgv") / "g.ssgv"
    save_grid(g, path)
    assert load_grid(path).tobytes() == g.tobytes()

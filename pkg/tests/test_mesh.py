import numpy as np
import pytest
from scipy import ndimage

from singleshape.mesh import (
    euler_characteristic,
    extract_mesh,
    grid_to_obj,
    laplacian_smooth,
    query_highres,
    trilinear_upsample,
    weld,
)
from singleshape.objfile import Mesh, read_obj, uv_sphere
from singleshape.procedural import ball
from singleshape.sampler import reconstruct
from singleshape.voxgrid import box_resample


def planar_patch(n=5):
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], 1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            faces += [[a, b, c], [a, c, d]]
    return Mesh(verts, np.array(faces))


def test_empty_grid_empty_mesh():
    assert extract_mesh(np.zeros((8, 8, 8))).is_empty


def test_ball_is_closed_genus_zero():
    mesh = extract_mesh(ball((24, 24, 24), 0.35))
    assert euler_characteristic(mesh) == 2
    f = np.sort(mesh.faces, axis=1)
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]])
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)  # every edge shared by two faces


def test_half_space_gives_plane():
    n = 16
    grid = np.zeros((n, n, n), np.float32)
    grid[:, :8, :] = 1.0
    grid = ndimage.gaussian_filter(grid, 0.7)
    mesh = extract_mesh(grid)
    # analytic plane at the cell boundary y = 8 cells -> 0.5 normalized
    y = mesh.vertices[:, 1] * n
    assert np.all(np.abs(y - 8.0) <= 0.5)
    assert euler_characteristic(mesh) == 1  # one open sheet


def test_no_degenerate_triangles():
    mesh = extract_mesh(ball((20, 22, 24), 0.4))
    tri = mesh.triangles()
    area = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    assert np.all(area > 0)
    assert len(weld(mesh).vertices) == len(mesh.vertices)


def test_close_boundary_caps_full_grid():
    mesh = extract_mesh(np.ones((6, 6, 6), np.float32), close_boundary=True)
    assert euler_characteristic(mesh) == 2
    assert extract_mesh(np.ones((6, 6, 6), np.float32)).is_empty


def test_smoothing_zero_iterations_identity():
    mesh = uv_sphere(n_lat=8, n_lon=16)
    out = laplacian_smooth(mesh, 0)
    assert np.array_equal(out.vertices, mesh.vertices) and np.array_equal(out.faces, mesh.faces)


def test_smoothing_planar_interior_fixed():
    mesh = planar_patch(5)
    out = laplacian_smooth(mesh, 1)
    interior = [i * 5 + j for i in range(1, 4) for j in range(1, 4)]
    # each interior 1-ring is point-symmetric about its vertex
    assert np.allclose(out.vertices[interior], mesh.vertices[interior], atol=1e-12)
    assert np.allclose(laplacian_smooth(mesh, 4).vertices[:, 2], 0)


def test_smoothing_preserves_connectivity_and_shrinks_area():
    mesh = weld(uv_sphere(n_lat=16, n_lon=32))
    areas = [mesh.area()]
    current = mesh
    for _ in range(5):
        current = laplacian_smooth(current, 1)
        areas.append(current.area())
    assert np.array_equal(current.faces, mesh.faces)
    assert len(current.vertices) == len(mesh.vertices)
    assert all(b <= a + 1e-12 for a, b in zip(areas, areas[1:]))


def test_trilinear_upsample_cases(rng):
    g = rng.random((3, 4, 5)).astype(np.float32)
    assert np.array_equal(trilinear_upsample(g, 1), g)
    assert np.allclose(trilinear_upsample(np.full((3, 3, 3), 0.3, np.float32), 3), 0.3)
    ramp = np.array([0.0, 1.0], np.float32).reshape(2, 1, 1)
    up = trilinear_upsample(ramp, 4)[:, 0, 0]
    # cell centers (i + 0.5) / 8 mapped onto the 2-cell ramp, clamped at the ends
    u = np.clip((np.arange(8) + 0.5) / 8 * 2 - 0.5, 0, 1)
    assert np.allclose(up, u, atol=1e-7)


def test_query_highres(tiny_model):
    stack = tiny_model[0]
    base = reconstruct(stack)
    assert np.array_equal(query_highres(stack, 1), base)
    k2 = query_highres(stack, 2)
    assert np.mean(np.abs(box_resample(k2, base.shape) - base)) <= 0.1
    k8 = query_highres(stack, 8)
    assert k8.min() > 0 and k8.max() < 1


def test_grid_to_obj_roundtrip(tmp_path):
    mesh = grid_to_obj(ball((16, 16, 16), 0.3), tmp_path / "b.obj", comment="seed=1")
    back = read_obj(tmp_path / "b.obj")
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
    assert np.array_equal(back.faces, mesh.faces)
    assert (tmp_path / "b.obj").read_text().startswith("# seed=1")


def test_marching_cubes_needs_two_cells():
    with pytest.raises(ValueError):
        extract_mesh(np.zeros((1, 5, 5)))

"""Rotation helpers, grids, meshes, rasterization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volcap import geomath as gm


def _rng(seed):
    return np.random.default_rng(np.random.PCG64(seed))


@given(st.integers(0, 10**6))
def test_rodrigues_is_rotation(seed):
    omega = _rng(seed).normal(0.0, 1.0, (5, 3))
    r = gm.rodrigues(omega)
    eye = np.einsum("nij,nkj->nik", r, r)
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(r), 1.0, atol=1e-12)


@given(st.integers(0, 10**6))
def test_rodrigues_round_trip(seed):
    rng = _rng(seed)
    # stay strictly inside the principal ball where the log is unique
    omega = rng.normal(size=(8, 3))
    omega *= (rng.uniform(0.01, 3.0, (8, 1)) / np.linalg.norm(omega, axis=1,
                                                              keepdims=True))
    back = gm.rod_inv(gm.rodrigues(omega))
    assert np.allclose(back, omega, atol=1e-9)


def test_rodrigues_zero_is_identity():
    assert np.allclose(gm.rodrigues(np.zeros(3)), np.eye(3))


@given(st.floats(1e-4, 3.0), st.integers(0, 10**6))
def test_geodesic_matches_composed_angle(angle, seed):
    rng = _rng(seed)
    base = gm.rodrigues(rng.normal(size=3))
    axis = gm.unit(rng.normal(size=3))
    rotated = base @ gm.rodrigues(axis * angle)
    # arccos near 1 only resolves angles to sqrt(eps)
    assert abs(gm.rotation_geodesic(base, base)) < 1e-7
    assert np.isclose(gm.rotation_geodesic(rotated, base), angle, atol=1e-6)


def test_rotation_grid_interpolates_corners_exactly():
    rng = _rng(3)
    cells = gm.rodrigues(rng.normal(0.0, 0.3, (4, 4, 3)))
    grid = gm.RotationGrid(cells=cells, extent=(60, 80))
    # pixel positions (x, y) that land exactly on the grid nodes
    px = np.array([[0.0, 0.0], [79.0, 0.0], [0.0, 59.0], [79.0, 59.0]])
    got = gm.grid_rotation_at(grid, px)
    want = np.stack([cells[0, 0], cells[0, 3], cells[3, 0], cells[3, 3]])
    assert np.allclose(got, want, atol=1e-12)


def test_rotation_grid_midpoint_is_linear_blend():
    rng = _rng(4)
    cells = gm.rodrigues(rng.normal(0.0, 0.3, (2, 2, 3)))
    grid = gm.RotationGrid(cells=cells, extent=(10, 10))
    got = gm.grid_rotation_at(grid, np.array([[4.5, 4.5]]))[0]
    assert np.allclose(got, cells.reshape(4, 3, 3).mean(axis=0), atol=1e-12)


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10**6))
def test_point_triangle_distance_vs_dense_sampling(seed):
    """Exact distance is a lower bound on, and close to, a dense
    barycentric sample minimum."""
    rng = _rng(seed)
    tri = rng.normal(0.0, 1.0, (3, 3))
    mesh = gm.TriMesh(vertices=tri, faces=np.array([[0, 1, 2]]))
    pts = rng.normal(0.0, 1.5, (8, 3))
    d = gm.point_mesh_distance(pts, mesh)

    u = np.linspace(0.0, 1.0, 60)
    uu, vv = np.meshgrid(u, u)
    keep = uu + vv <= 1.0
    bary = np.stack([1.0 - uu[keep] - vv[keep], uu[keep], vv[keep]], axis=1)
    dense = bary @ tri
    ref = np.sqrt(((pts[:, None] - dense[None]) ** 2).sum(-1)).min(axis=1)
    edge = max(np.linalg.norm(tri[i] - tri[j]) for i, j in
               ((0, 1), (1, 2), (0, 2)))
    assert np.all(d <= ref + 1e-12)
    assert np.all(ref - d <= edge / 59.0 + 1e-9)


def test_marching_cubes_sphere_level_set():
    grid = gm.ScalarGrid.cube(center=(0.0, 0.0, 0.0), size=2.0, n=24)
    grid.fill(lambda p: np.linalg.norm(p, axis=1) - 0.7)
    mesh = gm.marching_cubes(grid, 0.0)
    assert mesh.n_vertices > 100
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.7).max() < 1.5 * grid.voxel
    # outward normals on a sphere point away from the center
    gm.compute_vertex_normals(mesh)
    outward = np.einsum("ni,ni->n", mesh.vertex_normals,
                        gm.unit(mesh.vertices))
    assert outward.min() > 0.5


def test_marching_cubes_empty_level_set():
    grid = gm.ScalarGrid.cube(center=(0.0, 0.0, 0.0), size=1.0, n=8)
    grid.fill(lambda p: np.ones(len(p)))
    mesh = gm.marching_cubes(grid, 0.0)
    assert mesh.is_empty()


def test_scalar_grid_fill_chunking_is_exact():
    grid_a = gm.ScalarGrid.cube(center=(0.1, 0.2, 0.3), size=1.5, n=9)
    grid_b = gm.ScalarGrid.cube(center=(0.1, 0.2, 0.3), size=1.5, n=9)
    fn = lambda p: np.sin(p).sum(axis=1)
    grid_a.fill(fn, chunk=7)
    grid_b.fill(fn, chunk=100000)
    assert np.array_equal(grid_a.values, grid_b.values)
    assert np.isclose(grid_a.voxel, 1.5 / 8)
    assert len(grid_a.node_points()) == 9 ** 3


def test_make_normal_map_normalizes_only_mask():
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    raw = np.full((4, 4, 3), 2.0)
    nm = gm.make_normal_map(raw, mask)
    norms = np.linalg.norm(nm.normals, axis=-1)
    assert np.allclose(norms[mask], 1.0)
    assert np.all(norms[~mask] == 0.0)


def test_highpass_kills_constant_field():
    mask = np.zeros((32, 32), dtype=bool)
    mask[4:28, 6:26] = True
    const = np.where(mask[..., None], 0.7, 0.0) * np.ones(3)
    hp = gm.highpass(const, mask, 3.0)
    assert np.abs(hp[mask]).max() < 1e-9
    assert np.all(hp[~mask] == 0.0)


def test_highpass_preserves_fine_detail():
    mask = np.ones((64, 64), dtype=bool)
    yy, xx = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    fine = np.sin(2 * np.pi * xx / 4.0)[..., None] * np.ones(3)
    hp = gm.highpass(fine, mask, 6.0)
    # a 4 px wave passes a sigma=6 highpass nearly untouched
    inner = hp[16:48, 16:48, 0]
    assert np.corrcoef(inner.ravel(), fine[16:48, 16:48, 0].ravel())[0, 1] > 0.99


def test_silhouette_of_box_quad():
    verts = np.array([[-0.25, -0.5, 0.0], [0.25, -0.5, 0.0],
                      [0.25, 0.5, 0.0], [-0.25, 0.5, 0.0]])
    mesh = gm.TriMesh(vertices=verts, faces=np.array([[0, 1, 2], [0, 2, 3]]))
    sil = gm.render_silhouette(mesh, "front", (64, 64))
    frac = sil.mean()
    # the quad covers a quarter of the 1 m x 2 m window
    assert abs(frac - 0.25) < 0.03
    assert not gm.render_silhouette(
        gm.TriMesh(vertices=np.zeros((0, 3)),
                   faces=np.zeros((0, 3), dtype=int)), "front", (16, 16)).any()


def test_project_to_pixels_center_and_depth_order():
    res = (64, 64)
    pts = np.array([[0.0, 0.0, 0.2], [0.0, 0.0, -0.3]])
    u, v, depth = gm.project_to_pixels(pts, "front", res)
    assert np.allclose(u, (res[1] - 1) / 2.0)
    assert np.allclose(v, (res[0] - 1) / 2.0)
    # larger depth value means closer to the front camera
    assert depth[0] > depth[1]


def test_ortho_render_normals_faces_camera():
    grid = gm.ScalarGrid.cube(center=(0.0, 0.0, 0.0), size=1.2, n=20)
    grid.fill(lambda p: np.linalg.norm(p, axis=1) - 0.4)
    sphere = gm.marching_cubes(grid, 0.0)
    nm = gm.ortho_render_normals(sphere, "front", (64, 64))
    assert nm.mask.any()
    # visible sphere normals have a positive component toward the camera
    assert nm.normals[nm.mask][:, 2].mean() > 0.4

"""Rotation-grid energy, Gauss-Newton solve, map fusion."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volcap import geomath as gm
from volcap import normalfusion as nf


def _rng(seed):
    return np.random.default_rng(np.random.PCG64(seed))


def _random_maps(seed, h=10, w=12, holes=True):
    rng = _rng(seed)
    mask = rng.random((h, w)) > 0.2 if holes else np.ones((h, w), bool)
    fa = gm.make_normal_map(rng.normal(size=(h, w, 3)), mask)
    fi = gm.make_normal_map(rng.normal(size=(h, w, 3)), mask.copy())
    return fa, fi


def _energy_reference(cells, fa, fi, g):
    """Per-pixel/per-pair loops, no vectorization shortcuts."""
    h, w = fa.mask.shape
    fit = 0.0
    for r in range(h):
        for c in range(w):
            if not (fa.mask[r, c] and fi.mask[r, c]):
                continue
            gx = c * (g - 1) / (w - 1)
            gy = r * (g - 1) / (h - 1)
            j0, i0 = min(int(gx), g - 2), min(int(gy), g - 2)
            fx, fy = gx - j0, gy - i0
            rp = ((1 - fx) * (1 - fy) * cells[i0, j0]
                  + fx * (1 - fy) * cells[i0, j0 + 1]
                  + (1 - fx) * fy * cells[i0 + 1, j0]
                  + fx * fy * cells[i0 + 1, j0 + 1])
            diff = rp @ fa.normals[r, c] - fi.normals[r, c]
            fit += float(diff @ diff)
    smooth = 0.0
    om = gm.rod_inv(cells)
    for i in range(g):
        for j in range(g):
            for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                if 0 <= i + di < g and 0 <= j + dj < g:
                    d = om[i, j] - om[i + di, j + dj]
                    smooth += float(d @ d)
    return fit, smooth


@settings(deadline=None, max_examples=10)
@given(st.integers(0, 10**6))
def test_energy_matches_reference_loops(seed):
    g = 3
    fa, fi = _random_maps(seed)
    cells = gm.rodrigues(_rng(seed + 1).normal(0.0, 0.25, (g, g, 3)))
    grid = gm.RotationGrid(cells=cells, extent=fa.mask.shape)
    cfg = nf.FusionConfig(grid_size=g, lambda_fitting=1.3, lambda_smooth=0.7)
    total, e_fit, e_smooth = nf.energy(grid, fa, fi, cfg)
    fit_ref, smooth_ref = _energy_reference(cells, fa, fi, g)
    assert abs(e_fit - fit_ref) < 1e-10
    assert abs(e_smooth - smooth_ref) < 1e-10
    assert np.isclose(total, 1.3 * fit_ref + 0.7 * smooth_ref)


def test_identical_maps_need_no_rotation():
    fa, _ = _random_maps(21, h=40, w=40, holes=False)
    cfg = nf.FusionConfig(grid_size=4, iterations=10)
    grid, info = nf.solve_rotations(fa, fa, cfg)
    ang = gm.rotation_geodesic(grid.cells, np.eye(3))
    assert np.rad2deg(ang.max()) < 1e-6


def test_constant_rotation_recovered_on_small_maps():
    rng = _rng(31)
    yy, xx = np.meshgrid(np.arange(48), np.arange(48), indexing="ij")
    n = np.stack([0.6 * np.sin(2 * np.pi * xx / 9.0),
                  0.6 * np.cos(2 * np.pi * yy / 7.0),
                  np.ones_like(xx, dtype=np.float64)], axis=-1)
    fa = gm.make_normal_map(n, np.ones((48, 48), bool))
    rstar = gm.rodrigues(gm.unit(rng.normal(size=3)) * np.deg2rad(12.0))
    fi = gm.make_normal_map(np.einsum("ij,hwj->hwi", rstar, fa.normals),
                            fa.mask.copy())
    grid, info = nf.solve_rotations(fa, fi, nf.FusionConfig(grid_size=4,
                                                            iterations=30))
    err = np.rad2deg(gm.rotation_geodesic(grid.cells, rstar))
    assert err.max() < 0.5


def test_energy_trace_never_increases():
    fa, fi = _random_maps(41, h=32, w=32, holes=False)
    cfg = nf.FusionConfig(grid_size=4, iterations=25)
    _, info = nf.solve_rotations(fa, fi, cfg)
    tr = info["trace"][:, 0]
    assert len(tr) >= 2
    assert np.all(np.diff(tr) <= 1e-12)


def test_zero_iterations_is_identity_replacement():
    fa, fi = _random_maps(51, h=16, w=16, holes=False)
    cfg = nf.FusionConfig(grid_size=4, iterations=0)
    grid, _ = nf.solve_rotations(fa, fi, cfg)
    assert np.allclose(grid.cells, np.eye(3))
    fused = nf.fuse_map(fa, fi, grid, cfg)
    # identity grid pulls the observation verbatim where it is valid
    assert np.allclose(fused.normals[fi.mask], fi.normals[fi.mask])


def test_fuse_map_falls_back_to_avatar_off_observation():
    rng = _rng(61)
    fa, fi = _random_maps(61, h=12, w=12, holes=False)
    fi.mask[:, :6] = False
    fi.normals[:, :6] = 0.0
    cfg = nf.FusionConfig(grid_size=3, iterations=5)
    grid, _ = nf.solve_rotations(fa, fi, cfg)
    fused = nf.fuse_map(fa, fi, grid, cfg)
    assert np.array_equal(fused.mask, fa.mask)
    assert np.allclose(fused.normals[:, :6], fa.normals[:, :6])


def test_fuse_view_with_empty_observation_passes_avatar_through():
    fa, _ = _random_maps(71, h=12, w=12, holes=False)
    empty = gm.make_normal_map(np.zeros((12, 12, 3)),
                               np.zeros((12, 12), bool))
    res = nf.fuse_view(fa, empty, nf.FusionConfig(grid_size=3, iterations=8))
    assert np.array_equal(res.fused.mask, fa.mask)
    assert np.allclose(res.fused.normals, fa.normals)


def test_fuse_returns_both_views():
    fa, fi = _random_maps(81, h=16, w=16, holes=False)
    fb, ib = _random_maps(82, h=16, w=16, holes=False)
    cfg = nf.FusionConfig(grid_size=3, iterations=4)
    rf, rb = nf.fuse(fa, fb, fi, ib, cfg)
    for res in (rf, rb):
        assert res.fused.mask.shape == (16, 16)
        assert res.trace.ndim == 2
        assert np.isfinite(res.residual_rms)
        assert res.residual_max >= res.residual_rms


def test_solver_improves_fit_under_smoothness_pressure():
    """With smoothness active the fitted energy still drops well below
    the identity-grid starting point."""
    fa, fi = _random_maps(91, h=24, w=24, holes=False)
    cfg = nf.FusionConfig(grid_size=3, iterations=20, lambda_smooth=2.0)
    ident = gm.RotationGrid.identity(3, fa.mask.shape)
    e0 = nf.energy(ident, fa, fi, cfg)[0]
    _, info = nf.solve_rotations(fa, fi, cfg)
    assert info["trace"][-1, 0] < e0

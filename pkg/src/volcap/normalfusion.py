"""Canonical normal-map fusion via a coarse rotation grid.

Avatar-rendered and image-observed normal maps disagree in two ways:
a smooth, low-frequency misalignment (pose error, soft deformation)
and high-frequency detail present only in the observation.  Jointly
optimizing both is ill posed, so fusion is split: first a G x G grid
of rotations is solved by damped Gauss-Newton so the rotated avatar
normals track the observation at low frequency; then, holding the
rotations fixed, the observed normals are pulled back through the
inverse rotations, which keeps their detail while undoing the smooth
misalignment.  Off the observed mask the avatar prediction passes
through unchanged.

The grid blends the four surrounding cell matrices bilinearly without
re-projecting onto SO(3); increments are parameterized per cell as
axis-angle vectors applied on the left.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geomath as gm


@dataclass(frozen=True)
class FusionConfig:
    lambda_fitting: float = 1.0
    lambda_smooth: float = 1.0
    grid_size: int = 64
    iterations: int = 50
    eps_lm: float = 1e-6
    blend: float = 1.0
    rel_stop: float = 1e-8
    abs_stop: float = 1e-20
    max_retries: int = 12


@dataclass
class FusionResult:
    fused: gm.NormalMap
    grid: gm.RotationGrid
    trace: np.ndarray        # (n_iters + 1, 3): total, fitting, smooth
    residual_rms: float
    residual_max: float


def _masked_points(mask):
    """Pixel-center (x, y) coordinates of masked pixels, row-major order."""
    rows, cols = np.nonzero(mask)
    return np.stack([cols.astype(np.float64), rows.astype(np.float64)], axis=1)


def _overlap(f_avatar, f_image):
    d = f_avatar.mask & f_image.mask
    if not d.any():
        raise ValueError("avatar and observed masks do not overlap")
    return d


def energy(grid, f_avatar, f_image, cfg):
    """Total, fitting, and smoothness energy of a rotation grid.

    Fitting sums squared differences between bilinearly rotated avatar
    normals and observed normals over the mask intersection; smoothness
    sums squared axis-angle differences over ordered 4-neighbor cell
    pairs (each undirected pair counted twice).
    """
    if f_avatar.normals.shape != f_image.normals.shape:
        raise ValueError("normal maps must share resolution")
    d = _overlap(f_avatar, f_image)
    pts = _masked_points(d)
    rp = gm.grid_rotation_at(grid, pts)
    fa = f_avatar.normals[d]
    fi = f_image.normals[d]
    resid = np.einsum("pij,pj->pi", rp, fa) - fi
    e_fit = float((resid ** 2).sum())

    omega = gm.rod_inv(grid.cells)
    dh = omega[:, 1:] - omega[:, :-1]
    dv = omega[1:, :] - omega[:-1, :]
    e_smooth = 2.0 * float((dh ** 2).sum() + (dv ** 2).sum())
    return cfg.lambda_fitting * e_fit + cfg.lambda_smooth * e_smooth, e_fit, e_smooth


class _FitStencil:
    """Precomputed per-pixel bilinear stencils grouped by grid square.

    Pixels sharing the same four grid nodes are contiguous after the
    sort, so per-square Gauss-Newton blocks reduce with one reduceat.
    """

    def __init__(self, g, extent, pts):
        idx, w = gm.grid_bilinear_setup(g, extent, pts)
        sq = (idx[:, 0] // g) * (g - 1) + (idx[:, 0] % g)
        order = np.argsort(sq, kind="stable")
        self.order = order
        self.idx = idx[order]
        self.w = w[order]
        sq = sq[order]
        self.starts = np.concatenate([[0], 1 + np.nonzero(np.diff(sq))[0]])
        self.nodes = self.idx[self.starts]  # (S, 4)
        s = len(self.starts)
        # scatter indices for the (S, 4, 4, 3, 3) block tensor
        comp = np.arange(3)
        rows = (3 * self.nodes[:, :, None, None, None]
                + comp[None, None, None, :, None])
        rows = np.broadcast_to(rows, (s, 4, 4, 3, 3))
        cols = (3 * self.nodes[:, None, :, None, None]
                + comp[None, None, None, None, :])
        cols = np.broadcast_to(cols, (s, 4, 4, 3, 3))
        self.block_rows = rows.ravel()
        self.block_cols = cols.ravel()

    def normal_equations(self, cells, fa, fi):
        """Gauss-Newton blocks for the fitting term at the current cells.

        Returns (data for the precomputed sparse pattern, rhs (G*G, 3),
        fitting energy, per-pixel residuals).
        """
        g = cells.shape[0]
        rcell = cells.reshape(g * g, 3, 3)[self.idx]          # (N, 4, 3, 3)
        v = (rcell @ fa[:, None, :, None])[..., 0]            # (N, 4, 3)
        blended = np.einsum("pk,pki->pi", self.w, v)
        resid = blended - fi
        wjac = -self.w[:, :, None, None] * gm.skew(v)         # (N, 4, 3, 3)
        wjac_t = np.swapaxes(wjac, -1, -2)
        blocks = wjac_t[:, :, None] @ wjac[:, None, :]        # (N, 4, 4, 3, 3)
        rhs_px = (wjac_t @ resid[:, None, :, None])[..., 0]   # (N, 4, 3)
        bsum = np.add.reduceat(blocks, self.starts, axis=0)
        rsum = np.add.reduceat(rhs_px, self.starts, axis=0)   # (S, 4, 3)
        rhs = np.zeros((g * g, 3))
        np.add.at(rhs, self.nodes.ravel(), rsum.reshape(-1, 3))
        return bsum.ravel(), rhs, float((resid ** 2).sum()), resid


def _smooth_system(cells, lam):
    """Gauss-Newton blocks of the smoothness term (ordered-pair count)."""
    g = cells.shape[0]
    omega = gm.rod_inv(cells).reshape(g * g, 3)
    ids = np.arange(g * g).reshape(g, g)
    ei = np.concatenate([ids[:, :-1].ravel(), ids[:-1, :].ravel()])
    ej = np.concatenate([ids[:, 1:].ravel(), ids[1:, :].ravel()])
    ji = gm.left_jacobian_inv(omega[ei])
    jj = gm.left_jacobian_inv(omega[ej])
    r = omega[ei] - omega[ej]
    w = 2.0 * lam
    jiT = np.swapaxes(ji, -1, -2)
    jjT = np.swapaxes(jj, -1, -2)
    blocks = np.concatenate([w * jiT @ ji, w * jjT @ jj,
                             -w * jiT @ jj, -w * jjT @ ji])
    rows3 = np.concatenate([ei, ej, ei, ej])
    cols3 = np.concatenate([ei, ej, ej, ei])
    comp = np.arange(3)
    rows = (3 * rows3[:, None, None] + comp[None, :, None])
    cols = (3 * cols3[:, None, None] + comp[None, None, :])
    rows = np.broadcast_to(rows, blocks.shape).ravel()
    cols = np.broadcast_to(cols, blocks.shape).ravel()
    rhs = np.zeros((g * g, 3))
    np.add.at(rhs, ei, w * np.einsum("eij,ej->ei", jiT, r))
    np.add.at(rhs, ej, -w * np.einsum("eij,ej->ei", jjT, r))
    e_smooth = 2.0 * float((r ** 2).sum())
    return blocks.ravel(), rows, cols, rhs, e_smooth


def solve_rotations(f_avatar, f_image, cfg):
    """Phase 1: fit the rotation grid to the observed normals.

    Damped Gauss-Newton from identity; each iteration solves the sparse
    normal equations over all 3*G*G axis-angle increments and retracts
    per cell.  A step that raises the energy is retried with 10x larger
    damping, so the accepted energy trace never increases.  Stops early
    once the relative decrease falls under cfg.rel_stop.

    Returns (grid, info) where info carries the energy trace (columns:
    total, fitting, smoothness) and final residual statistics.
    """
    if f_avatar.normals.shape != f_image.normals.shape:
        raise ValueError("normal maps must share resolution")
    d = _overlap(f_avatar, f_image)
    h, w = d.shape
    g = cfg.grid_size
    grid = gm.RotationGrid.identity(g, (h, w))
    pts = _masked_points(d)
    stencil = _FitStencil(g, grid.extent, pts)
    fa = f_avatar.normals[d][stencil.order]
    fi = f_image.normals[d][stencil.order]

    lam_f, lam_s = cfg.lambda_fitting, cfg.lambda_smooth
    n_unknowns = 3 * g * g
    eye = sp.identity(n_unknowns, format="csr")

    def build(cells):
        fit_data, fit_rhs, e_fit, resid = stencil.normal_equations(cells, fa, fi)
        sm_data, sm_rows, sm_cols, sm_rhs, e_smooth = _smooth_system(cells, lam_s)
        data = np.concatenate([lam_f * fit_data, sm_data])
        rows = np.concatenate([stencil.block_rows, sm_rows])
        cols = np.concatenate([stencil.block_cols, sm_cols])
        hess = sp.coo_matrix((data, (rows, cols)),
                             shape=(n_unknowns, n_unknowns)).tocsr()
        rhs = -(lam_f * fit_rhs + sm_rhs).ravel()
        return hess, rhs, lam_f * e_fit + lam_s * e_smooth, e_fit, e_smooth, resid

    hess, rhs, e_total, e_fit, e_smooth, resid = build(grid.cells)
    trace = [(e_total, e_fit, e_smooth)]
    mu = cfg.eps_lm
    for _ in range(cfg.iterations):
        accepted = None
        for _ in range(cfg.max_retries):
            try:
                delta = spla.spsolve(hess + mu * eye, rhs)
            except RuntimeError as exc:
                raise RuntimeError(f"normal equations unsolvable: {exc}") from exc
            if not np.all(np.isfinite(delta)):
                raise RuntimeError("normal equations produced a non-finite step")
            step = gm.rodrigues(delta.reshape(g, g, 3))
            new_cells = step @ grid.cells
            cand = build(new_cells)
            if cand[2] <= e_total:
                accepted = (new_cells, cand)
                break
            mu *= 10.0
        if accepted is None:
            break
        grid = gm.RotationGrid(cells=accepted[0], extent=grid.extent)
        hess, rhs, e_new, e_fit, e_smooth, resid = accepted[1]
        trace.append((e_new, e_fit, e_smooth))
        converged = (e_total - e_new < cfg.rel_stop * max(e_total, 1e-30)
                     and mu <= cfg.eps_lm * 1.01) or e_new <= cfg.abs_stop
        e_total = e_new
        mu = max(mu * 0.1, cfg.eps_lm)
        if converged:
            break
    rn = np.linalg.norm(resid, axis=1)
    info = {"trace": np.asarray(trace),
            "residual_rms": float(np.sqrt((rn ** 2).mean())),
            "residual_max": float(rn.max())}
    return grid, info


def fuse_map(f_avatar, f_image, grid, cfg):
    """Phase 2: pull observed normals back through the solved rotations.

    With the rotations fixed, the fitting term is minimized exactly by
    R(p)^T F_image(p); cfg.blend < 1 mixes that minimizer with the prior
    avatar normal before renormalizing.  Pixels the observation does not
    cover keep the avatar prediction; the output mask is the avatar's.
    """
    d = _overlap(f_avatar, f_image)
    out = f_avatar.normals.copy()
    pts = _masked_points(d)
    rp = gm.grid_rotation_at(grid, pts)
    pulled = np.einsum("pji,pj->pi", rp, f_image.normals[d])
    mixed = cfg.blend * pulled + (1.0 - cfg.blend) * f_avatar.normals[d]
    norms = np.linalg.norm(mixed, axis=1)
    ok = norms > 1e-12
    mixed[ok] /= norms[ok, None]
    mixed[~ok] = f_avatar.normals[d][~ok]
    out[d] = mixed
    out[~f_avatar.mask] = 0.0
    return gm.NormalMap(normals=out, mask=f_avatar.mask.copy())


def fuse_view(f_avatar, f_image, cfg):
    """solve_rotations + fuse_map for one view; passthrough when the
    observation is fully invalid."""
    if not f_image.mask.any():
        g = cfg.grid_size
        h, w = f_avatar.mask.shape
        return FusionResult(fused=f_avatar.copy(),
                            grid=gm.RotationGrid.identity(g, (h, w)),
                            trace=np.zeros((0, 3)),
                            residual_rms=0.0, residual_max=0.0)
    grid, info = solve_rotations(f_avatar, f_image, cfg)
    fused = fuse_map(f_avatar, f_image, grid, cfg)
    return FusionResult(fused=fused, grid=grid, trace=info["trace"],
                        residual_rms=info["residual_rms"],
                        residual_max=info["residual_max"])


def fuse(f_avatar, b_avatar, f_image, b_image, cfg):
    """Fuse front and back views independently; returns two FusionResults."""
    return fuse_view(f_avatar, f_image, cfg), fuse_view(b_avatar, b_image, cfg)


def trace_csv(trace):
    """Energy trace as CSV text (iteration, total, fitting, smoothness)."""
    lines = ["iteration,total,fitting,smooth"]
    for i, row in enumerate(np.asarray(trace)):
        lines.append(f"{i},{row[0]:.17g},{row[1]:.17g},{row[2]:.17g}")
    return "\n".join(lines) + "\n"

"""Procedural scan corpus with analytic ground truth.

A synthetic subject is the capsule body dressed with a sinusoidal wrinkle
displacement and a striped color pattern.  Both patterns live in a shared
material coordinate u = y + slide * drive(pose), where drive sums the
spine and elbow rotation angles, so bending an elbow deepens the wrinkles
(amplitude affine in drive) and slides wrinkles and stripes together
tangentially.  Geometry alone therefore leaves the tangential
correspondence ambiguous whenever the slide exceeds half a wrinkle
wavelength; the stripes resolve it.  Occupancy and color are exact
closed-form oracles, which is what makes the corpus usable as ground
truth for training and for the acceptance metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import bodymodel as bm
from . import geomath as gm

DRIVE_JOINTS = ("spine", "l_elbow", "r_elbow")


@dataclass
class SyntheticSubject:
    body: bm.ArticulatedBody
    wrinkle_amp_base: float = 0.01
    wrinkle_amp_slope: float = 0.0     # meters per radian of drive
    wrinkle_wavelength: float = 0.10
    stripe_period: float = 0.30
    stripe_slide: float = 0.0          # meters per radian of drive
    seed: int = 0

    def drive_indices(self):
        return [i for i, n in enumerate(self.body.joint_names) if n in DRIVE_JOINTS]


def pose_drive(subject, pose):
    """Scalar pose drive: summed rotation angles of spine and elbows."""
    idx = subject.drive_indices()
    if not idx:
        return 0.0
    return float(np.linalg.norm(pose.joint_rotations[idx], axis=1).sum())


def wrinkle_amplitude(subject, pose):
    return subject.wrinkle_amp_base + subject.wrinkle_amp_slope * pose_drive(subject, pose)


def surface_field(subject, pose, points):
    """Wrinkled implicit field; its zero set is the canonical surface."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    base = bm.capsule_union_sdf(subject.body, points)
    amp = wrinkle_amplitude(subject, pose)
    if amp == 0.0:
        return base
    u = points[:, 1] + subject.stripe_slide * pose_drive(subject, pose)
    return base - amp * np.sin(2.0 * np.pi * u / subject.wrinkle_wavelength)


def occupancy_oracle(subject, pose, points):
    """Analytic canonical occupancy labels in {0, 1}."""
    return (surface_field(subject, pose, points) < 0.0).astype(np.float64)


def color_oracle(subject, pose, points):
    """Striped albedo in [0, 1]; stripes ride the material coordinate."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    u = points[:, 1] + subject.stripe_slide * pose_drive(subject, pose)
    phase = 2.0 * np.pi * u / subject.stripe_period
    out = np.empty((len(points), 3))
    out[:, 0] = 0.5 + 0.35 * np.sin(phase)
    out[:, 1] = 0.5 + 0.35 * np.sin(phase + 2.0 * np.pi / 3.0)
    out[:, 2] = 0.5 + 0.35 * np.sin(phase + 4.0 * np.pi / 3.0)
    return out


# ---------------------------------------------------------------------------
# scans


@dataclass
class ScanView:
    """One orthographic view of the posed scan."""

    azimuth: float
    image: np.ndarray   # (H, W, 3)
    mask: np.ndarray    # (H, W) bool
    depth: np.ndarray   # (H, W), -inf off-mask
    window: gm.Window
    resolution: tuple

    def axes(self):
        """(right, up, depth_axis); camera looks along -depth_axis."""
        c, s = np.cos(self.azimuth), np.sin(self.azimuth)
        right = np.array([c, 0.0, -s])
        up = np.array([0.0, 1.0, 0.0])
        axis = np.array([s, 0.0, c])
        return right, up, axis


@dataclass
class ScanSample:
    subject: SyntheticSubject
    pose: bm.Pose
    canonical_mesh: gm.TriMesh   # colors + normals attached
    posed_mesh: gm.TriMesh
    vertex_weights: np.ndarray   # (V, J) skinning weights of the mesh
    views: list
    # training pools (canonical points with labels, posed rays with colors)
    points: np.ndarray | None = None
    point_labels: np.ndarray | None = None
    ray_origins: np.ndarray | None = None
    ray_dirs: np.ndarray | None = None
    ray_far: np.ndarray | None = None
    ray_colors: np.ndarray | None = None
    _posed_tree: cKDTree | None = field(default=None, repr=False)

    def occupancy(self, points):
        return occupancy_oracle(self.subject, self.pose, points)

    def color(self, points):
        return color_oracle(self.subject, self.pose, points)

    def posed_tree(self):
        if self._posed_tree is None:
            self._posed_tree = cKDTree(self.posed_mesh.vertices)
        return self._posed_tree

    def weights_at_posed(self, posed_points):
        """Nearest posed-vertex skinning weights for posed-space points."""
        _, idx = self.posed_tree().query(np.atleast_2d(posed_points))
        return self.vertex_weights[idx]

    def canonicalize_points(self, posed_points):
        w = self.weights_at_posed(posed_points)
        return bm.inverse_skin(self.subject.body, self.pose, posed_points, w)


def _render_view(posed_mesh, colors, azimuth, resolution, window):
    c, s = np.cos(azimuth), np.sin(azimuth)
    rot = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    v = posed_mesh.vertices @ rot.T
    img, mask, depth = gm.ortho_rasterize(v, posed_mesh.faces, colors, "front",
                                          resolution, window)
    img[~mask] = 0.0
    return ScanView(azimuth=azimuth, image=img, mask=mask, depth=depth,
                    window=window, resolution=tuple(resolution))


def sample_scan(subject, pose, n_views=12, view_res=(128, 128),
                mesh_n=96, window=gm.CANON_WINDOW):
    """Mesh the posed subject and render n_views orthographic color views."""
    pose.validate()
    body = subject.body
    lo, hi = body.bounds(margin=0.04)
    center = (lo + hi) / 2.0
    size = float((hi - lo).max())
    grid = gm.ScalarGrid.cube(center=center, size=size, n=mesh_n)
    grid.fill(lambda p: surface_field(subject, pose, p))
    canonical = gm.marching_cubes(grid, 0.0)
    if canonical.is_empty():
        raise ValueError("subject surface is empty at this pose")
    gm.compute_vertex_normals(canonical)
    canonical.vertex_colors = color_oracle(subject, pose, canonical.vertices)
    weights = bm.skinning_weights(body, canonical.vertices)
    posed = canonical.copy()
    posed.vertices = bm.forward_skin(body, pose, canonical.vertices, weights)
    gm.compute_vertex_normals(posed)
    views = [
        _render_view(posed, canonical.vertex_colors, 2.0 * np.pi * m / n_views,
                     view_res, window)
        for m in range(n_views)
    ]
    return ScanSample(subject=subject, pose=pose, canonical_mesh=canonical,
                      posed_mesh=posed, vertex_weights=weights, views=views)


def sample_points(scan, n_surface, n_uniform, sigma_near, rng, margin=0.08):
    """Canonical occupancy training points: near-surface + uniform volume.

    Near-surface points are area-weighted surface samples pushed by an
    isotropic gaussian offset of scale sigma_near.  Labels come from the
    analytic oracle.
    """
    pts = []
    if n_surface > 0:
        surf, _, _ = gm.sample_mesh_surface(scan.canonical_mesh, n_surface, rng)
        if sigma_near > 0:
            surf = surf + rng.normal(scale=sigma_near, size=surf.shape)
        pts.append(surf)
    if n_uniform > 0:
        lo, hi = scan.subject.body.bounds(margin=margin)
        pts.append(rng.uniform(lo, hi, size=(n_uniform, 3)))
    pts = np.concatenate(pts, axis=0)
    return pts, scan.occupancy(pts)


def sample_rays(scan, n_rays, rng, surface_margin=0.06, background_frac=0.2):
    """Posed-space supervision rays drawn from the scan's rendered views.

    Rays through the surface are bracketed +-surface_margin around the
    depth-buffer hit; background rays near the silhouette span the whole
    scene depth and supervise empty space with black.
    Returns (origins, dirs, far, colors).
    """
    n_bg = int(round(n_rays * background_frac))
    n_fg = n_rays - n_bg
    per_view = np.bincount(rng.integers(0, len(scan.views), size=n_rays),
                           minlength=len(scan.views))
    origins, dirs, fars, colors = [], [], [], []
    want_bg = n_bg
    for view, count in zip(scan.views, per_view):
        if count == 0:
            continue
        right, up, axis = view.axes()
        h, w = view.resolution
        fg_idx = np.flatnonzero(view.mask.ravel())
        ring = ndimage.binary_dilation(view.mask, iterations=3) & ~view.mask
        bg_idx = np.flatnonzero(ring.ravel())
        take_bg = min(int(round(count * background_frac)), len(bg_idx)) if want_bg > 0 else 0
        take_fg = count - take_bg
        want_bg -= take_bg
        sel_fg = rng.choice(fg_idx, size=min(take_fg, len(fg_idx)), replace=True)
        sel = np.concatenate([sel_fg, rng.choice(bg_idx, size=take_bg, replace=True)
                              if take_bg else np.empty(0, np.intp)])
        pi, pj = np.divmod(sel.astype(np.intp), w)
        px = view.window.xmin + (pj + 0.5) / w * view.window.width
        py = view.window.ymax - (pi + 0.5) / h * view.window.height
        plane = px[:, None] * right + py[:, None] * up
        depth = view.depth[pi, pj]
        smax = view.depth[view.mask].max() + surface_margin
        smin = view.depth[view.mask].min() - surface_margin
        hit = np.isfinite(depth) & view.mask[pi, pj]
        s0 = np.where(hit, depth + surface_margin, smax)
        far = np.where(hit, 2.0 * surface_margin, smax - smin)
        origins.append(plane + s0[:, None] * axis)
        dirs.append(np.repeat(-axis[None], len(sel), axis=0))
        fars.append(far)
        colors.append(np.where(view.mask[pi, pj, None], view.image[pi, pj], 0.0))
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(fars), np.concatenate(colors))


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    subject: SyntheticSubject
    train_scans: list
    heldout_scans: list
    seed: int


def sample_pose(body, rng, drive_scale=1.0):
    """Random corpus pose: bent elbows, mild spine/shoulder/head motion."""
    pose = bm.Pose.identity(body.n_joints)
    names = body.joint_names
    for j, name in enumerate(names):
        if name in ("l_elbow", "r_elbow"):
            pose.joint_rotations[j] = [0.0, 0.0, rng.uniform(0.1, 1.2) * drive_scale
                                       * (-1.0 if name.startswith("r") else 1.0)]
        elif name == "spine":
            pose.joint_rotations[j] = [rng.uniform(-0.25, 0.25) * drive_scale, 0.0,
                                       rng.uniform(-0.15, 0.15) * drive_scale]
        elif name in ("l_shoulder", "r_shoulder"):
            # Outward swing is capped so the arm cannot leave the canonical
            # window; inward swing is free.
            lohi = (-0.12, 0.35) if name.startswith("l") else (-0.35, 0.12)
            pose.joint_rotations[j] = [0.0, 0.0, rng.uniform(*lohi)]
        elif name == "head":
            pose.joint_rotations[j] = [0.0, rng.uniform(-0.3, 0.3), 0.0]
    pose.validate()
    return pose


def build_corpus(subject, n_train=20, n_heldout=10, n_views=12,
                 view_res=(128, 128), mesh_n=96, points_pool=4096,
                 rays_pool=1024, sigma_near=0.02, seed=0):
    """Deterministically generate the train/held-out scan corpus."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    scans = []
    for _ in range(n_train + n_heldout):
        pose = sample_pose(subject.body, rng)
        scan = sample_scan(subject, pose, n_views=n_views, view_res=view_res,
                           mesh_n=mesh_n)
        n_surf = int(points_pool * 3) // 4
        pts, labels = sample_points(scan, n_surf, points_pool - n_surf,
                                    sigma_near, rng)
        scan.points = pts
        scan.point_labels = labels
        o, d, far, col = sample_rays(scan, rays_pool, rng)
        scan.ray_origins, scan.ray_dirs, scan.ray_far, scan.ray_colors = o, d, far, col
        scans.append(scan)
    return Corpus(subject=subject, train_scans=scans[:n_train],
                  heldout_scans=scans[n_train:], seed=seed)


# ---------------------------------------------------------------------------
# synthetic monocular observations


def synth_observation(subject, pose, pose_error=0.0, noise_sigma=0.0,
                      resolution=(256, 256), mesh_n=96, seed=0,
                      window=gm.CANON_WINDOW):
    """Render a front-view normal-map observation of the posed subject.

    pose_error rotates every non-root joint of the reported pose by a
    random axis with that angle (radians).  noise_sigma rotates each
    valid pixel normal about a random tangent axis; the per-pixel noise
    angle is half-normal with mean noise_sigma.
    Returns (observed NormalMap, true pose, estimated pose).
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    scan = sample_scan(subject, pose, n_views=1, view_res=(8, 8), mesh_n=mesh_n)
    observed = gm.ortho_render_normals(scan.posed_mesh, "front", resolution, window)

    if noise_sigma > 0:
        idx = np.argwhere(observed.mask)
        n = observed.normals[idx[:, 0], idx[:, 1]]
        t = np.cross(n, rng.normal(size=n.shape))
        t = gm.unit(t)
        angle = np.abs(rng.normal(size=len(n))) * noise_sigma * np.sqrt(np.pi / 2.0)
        rot = gm.rodrigues(t * angle[:, None])
        observed.normals[idx[:, 0], idx[:, 1]] = np.einsum("nab,nb->na", rot, n)

    est = pose.copy()
    if pose_error > 0:
        for j in range(1, subject.body.n_joints):
            axis = gm.unit(rng.normal(size=3))
            est = bm.compose_joint_rotation(est, j, axis * pose_error)
        est.validate()
    return observed, pose.copy(), est

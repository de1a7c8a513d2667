"""Toy articulated body: an 8-joint skeleton over a capsule-union surface.

The skeleton covers a root, spine, chest, head and two shoulder/elbow
chains.  Legs are rigid with the root.  Skinning weights fall off with
distance to the capsule segments each joint owns, so they are defined
analytically for any point in space, not only on the surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geomath as gm

JOINT_NAMES = ("root", "spine", "chest", "head",
               "l_shoulder", "l_elbow", "r_shoulder", "r_elbow")

_REST_JOINTS = np.array([
    [0.00, 0.00, 0.0],   # root
    [0.00, 0.20, 0.0],   # spine
    [0.00, 0.42, 0.0],   # chest
    [0.00, 0.58, 0.0],   # head
    [-0.20, 0.52, 0.0],  # l_shoulder
    [-0.31, 0.29, 0.0],  # l_elbow
    [0.20, 0.52, 0.0],   # r_shoulder
    [0.31, 0.29, 0.0],   # r_elbow
])

_PARENTS = np.array([-1, 0, 1, 2, 2, 4, 2, 6], dtype=np.intp)

# capsule segments: (owning joint, p0, p1, radius)
# Arm reach is sized so the posed surface stays inside the 1 m canonical
# window for every pose the corpus sampler can draw.
_CAPSULES = [
    (0, [0.00, -0.02, 0.0], [0.00, 0.20, 0.0], 0.130),   # pelvis
    (0, [-0.09, 0.00, 0.0], [-0.11, -0.85, 0.0], 0.065),  # left leg
    (0, [0.09, 0.00, 0.0], [0.11, -0.85, 0.0], 0.065),    # right leg
    (1, [0.00, 0.20, 0.0], [0.00, 0.42, 0.0], 0.135),     # lower torso
    (2, [0.00, 0.42, 0.0], [0.00, 0.58, 0.0], 0.120),     # upper torso
    (3, [0.00, 0.58, 0.0], [0.00, 0.74, 0.0], 0.095),     # head
    (4, [-0.20, 0.52, 0.0], [-0.31, 0.29, 0.0], 0.050),   # left upper arm
    (5, [-0.31, 0.29, 0.0], [-0.36, 0.06, 0.0], 0.045),   # left forearm
    (6, [0.20, 0.52, 0.0], [0.31, 0.29, 0.0], 0.050),     # right upper arm
    (7, [0.31, 0.29, 0.0], [0.36, 0.06, 0.0], 0.045),     # right forearm
]

SINGULAR_COND_LIMIT = 1e6


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation."""

    joint_rotations: np.ndarray  # (J, 3)
    root_translation: np.ndarray  # (3,)

    @classmethod
    def identity(cls, n_joints=len(JOINT_NAMES)):
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    def validate(self):
        angles = np.linalg.norm(self.joint_rotations, axis=1)
        if np.any(angles >= np.pi):
            raise ValueError("joint rotation angle must stay below pi")

    def copy(self):
        return Pose(self.joint_rotations.copy(), self.root_translation.copy())

    def flat_rotations(self):
        return self.joint_rotations.ravel().copy()


def compose_joint_rotation(pose, joint, delta):
    """Left-multiply joint's rotation by the axis-angle increment delta."""
    out = pose.copy()
    r = gm.rodrigues(np.asarray(delta, dtype=np.float64)) @ gm.rodrigues(pose.joint_rotations[joint])
    out.joint_rotations[joint] = gm.rod_inv(r)
    return out


@dataclass
class ArticulatedBody:
    joint_names: tuple
    parents: np.ndarray          # (J,)
    joint_rest: np.ndarray       # (J, 3)
    capsule_joint: np.ndarray    # (C,)
    capsule_p0: np.ndarray       # (C, 3)
    capsule_p1: np.ndarray       # (C, 3)
    capsule_radius: np.ndarray   # (C,)
    weight_falloff: float        # gaussian falloff scale in meters
    rest_mesh: gm.TriMesh | None = None
    rest_weights: np.ndarray | None = None  # (V, J)

    @property
    def n_joints(self):
        return len(self.parents)

    def bounds(self, margin=0.0):
        lo = (self.capsule_p0.min(axis=0).copy(), self.capsule_p1.min(axis=0))
        lo = np.minimum(*lo) - self.capsule_radius.max() - margin
        hi = np.maximum(self.capsule_p0.max(axis=0), self.capsule_p1.max(axis=0)) \
            + self.capsule_radius.max() + margin
        return lo, hi


def segment_distance(points, p0, p1):
    """Distance from points (N, 3) to segments (C, 3)->(C, 3), as (N, C)."""
    points = np.asarray(points, dtype=np.float64)
    d = p1 - p0                                    # (C, 3)
    len2 = np.maximum((d * d).sum(axis=1), 1e-18)
    rel = points[:, None, :] - p0[None, :, :]      # (N, C, 3)
    t = np.clip(np.einsum("ncd,cd->nc", rel, d) / len2, 0.0, 1.0)
    closest = p0[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def capsule_union_sdf(body, points):
    """Signed distance to the union of the body's capsules, (N,)."""
    dist = segment_distance(points, body.capsule_p0, body.capsule_p1)
    return (dist - body.capsule_radius).min(axis=1)


def skinning_weights(body, points):
    """Analytic per-joint weights (N, J); gaussian falloff from capsules."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dist = segment_distance(points, body.capsule_p0, body.capsule_p1)
    surf = np.maximum(dist - body.capsule_radius, 0.0)
    cap_w = np.exp(-((surf / body.weight_falloff) ** 2))
    w = np.zeros((len(points), body.n_joints))
    np.add.at(w.T, body.capsule_joint, cap_w.T)
    w /= np.maximum(w.sum(axis=1, keepdims=True), 1e-300)
    return w


def joint_transforms(body, pose):
    """Rest-to-posed transforms G_j for every joint, (J, 4, 4)."""
    j = body.n_joints
    rots = gm.rodrigues(pose.joint_rotations)
    world = np.zeros((j, 4, 4))
    for i in range(j):
        local = np.eye(4)
        local[:3, :3] = rots[i]
        parent = body.parents[i]
        if parent < 0:
            local[:3, 3] = body.joint_rest[i] + pose.root_translation
            world[i] = local
        else:
            local[:3, 3] = body.joint_rest[i] - body.joint_rest[parent]
            world[i] = world[parent] @ local
    g = world.copy()
    # fold in the inverse rest transform T(-rest_j)
    g[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], body.joint_rest)
    return g


def blended_transforms(body, pose, weights):
    """Per-point blended skinning matrices (N, 4, 4)."""
    g = joint_transforms(body, pose)
    return np.einsum("nj,jab->nab", np.asarray(weights, dtype=np.float64), g)


def forward_skin(body, pose, points, weights):
    """Canonical points (N, 3) -> posed points under blended transforms."""
    m = blended_transforms(body, pose, weights)
    return np.einsum("nab,nb->na", m[:, :3, :3], np.asarray(points, dtype=np.float64)) \
        + m[:, :3, 3]


def inverse_skin(body, pose, posed_points, weights):
    """Invert the blended transforms; returns (canonical points, ok mask).

    Points whose blended matrix has condition number >= 1e6 are flagged
    invalid and returned as zeros.
    """
    m = blended_transforms(body, pose, weights)
    lin = m[:, :3, :3]
    sv = np.linalg.svd(lin, compute_uv=False)
    ok = (sv[:, -1] > 0) & (sv[:, 0] / np.maximum(sv[:, -1], 1e-300) < SINGULAR_COND_LIMIT)
    rhs = np.asarray(posed_points, dtype=np.float64) - m[:, :3, 3]
    out = np.zeros_like(rhs)
    if ok.any():
        out[ok] = np.linalg.solve(lin[ok], rhs[ok][..., None])[..., 0]
    return out, ok


def skin_mesh(body, pose, mesh, weights=None):
    """Forward-skin a canonical mesh; recomputes vertex normals."""
    if weights is None:
        weights = skinning_weights(body, mesh.vertices)
    posed = mesh.copy()
    posed.vertices = forward_skin(body, pose, mesh.vertices, weights)
    posed.vertex_normals = None
    gm.compute_vertex_normals(posed)
    return posed


def default_body(mesh_n=96, weight_falloff=0.05):
    """Construct the stock body with a marching cubes rest surface."""
    body = ArticulatedBody(
        joint_names=JOINT_NAMES,
        parents=_PARENTS.copy(),
        joint_rest=_REST_JOINTS.copy(),
        capsule_joint=np.array([c[0] for c in _CAPSULES], dtype=np.intp),
        capsule_p0=np.array([c[1] for c in _CAPSULES]),
        capsule_p1=np.array([c[2] for c in _CAPSULES]),
        capsule_radius=np.array([c[3] for c in _CAPSULES]),
        weight_falloff=float(weight_falloff),
    )
    grid = gm.ScalarGrid.cube(center=(0.0, -0.03, 0.0), size=1.9, n=mesh_n)
    grid.fill(lambda p: capsule_union_sdf(body, p))
    body.rest_mesh = gm.marching_cubes(grid, 0.0)
    gm.compute_vertex_normals(body.rest_mesh)
    body.rest_weights = skinning_weights(body, body.rest_mesh.vertices)
    return body


# ---------------------------------------------------------------------------
# positional maps and normal-map canonicalization


@dataclass
class PosedMapPair:
    """Front/back orthographic maps of posed surface positions."""

    front: np.ndarray       # (H, W, 3)
    back: np.ndarray        # (H, W, 3)
    front_mask: np.ndarray  # (H, W) bool
    back_mask: np.ndarray   # (H, W) bool


def render_positional_maps(body, pose, resolution=(32, 32), window=gm.CANON_WINDOW):
    """Rasterize the rest surface, storing each pixel's posed position."""
    mesh = body.rest_mesh
    posed = forward_skin(body, pose, mesh.vertices, body.rest_weights)
    fr, fmask, _ = gm.ortho_rasterize(mesh.vertices, mesh.faces, posed,
                                      "front", resolution, window)
    bk, bmask, _ = gm.ortho_rasterize(mesh.vertices, mesh.faces, posed,
                                      "back", resolution, window)
    fr[~fmask] = 0.0
    bk[~bmask] = 0.0
    return PosedMapPair(fr, bk, fmask, bmask)


def canonicalize_normal_map(body, pose, avatar_mesh, observed,
                            rotate_to_canonical=True, resolution=None,
                            window=gm.CANON_WINDOW, depth_tol=2e-3):
    """Pull an observed posed-frame normal map back onto the canonical body.

    Deforms the canonical avatar mesh by the pose, looks up the observed
    map at each visible vertex (front view, z-buffer visibility), rotates
    each fetched normal into the canonical frame by the inverse blended
    skinning rotation, and re-renders the result from the canonical front
    and back views.  Pixels with no visible fetched data are invalid.
    """
    obs_res = observed.mask.shape
    if resolution is None:
        resolution = obs_res
    weights = skinning_weights(body, avatar_mesh.vertices)
    m = blended_transforms(body, pose, weights)
    posed_v = np.einsum("nab,nb->na", m[:, :3, :3], avatar_mesh.vertices) + m[:, :3, 3]

    _, _, zbuf = gm.ortho_rasterize(posed_v, avatar_mesh.faces, None, "front",
                                    obs_res, window)
    u, v, depth = gm.project_to_pixels(posed_v, "front", obs_res, window)
    pu = np.rint(u).astype(np.intp)
    pv = np.rint(v).astype(np.intp)
    in_img = (pu >= 0) & (pu < obs_res[1]) & (pv >= 0) & (pv < obs_res[0])
    pu_c = np.clip(pu, 0, obs_res[1] - 1)
    pv_c = np.clip(pv, 0, obs_res[0] - 1)
    visible = in_img & (depth >= zbuf[pv_c, pu_c] - depth_tol) \
        & observed.mask[pv_c, pu_c]

    fetched = np.zeros_like(posed_v)
    fetched[visible] = observed.normals[pv_c[visible], pu_c[visible]]
    if rotate_to_canonical and visible.any():
        inv = np.linalg.inv(m[visible][:, :3, :3])
        fetched[visible] = gm.unit(np.einsum("nab,nb->na", inv, fetched[visible]))

    maps = []
    for view in gm.VIEWS:
        attr, mask, _ = gm.ortho_rasterize(avatar_mesh.vertices, avatar_mesh.faces,
                                           fetched, view, resolution, window,
                                           valid=visible)
        lengths = np.linalg.norm(attr, axis=-1)
        maps.append(gm.make_normal_map(attr, mask & (lengths > 1e-12)))
    return maps[0], maps[1]

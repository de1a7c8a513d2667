"""Geometry substrate: rotations, grids, meshes, rasterization.

Conventions used throughout the package:

* all arrays are float64; meters are the length unit
* the canonical image plane has x to the right, y up and z toward the
  front camera; the front view looks along -z, the back view mirrors x
  and reverses the depth test
* normal maps always store world-frame unit normals; the view only
  decides projection and visibility
* pixel (row, col) has its center at continuous coords (col, row)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _mc_tables

# ---------------------------------------------------------------------------
# SO(3)


def skew(v):
    """Cross-product matrix of v (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def unskew(m):
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def rodrigues(omega):
    """Axis-angle vector(s) (..., 3) to rotation matrices (..., 3, 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    k = skew(omega)
    kk = k @ k
    small = theta < 1e-8
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(t)) / t ** 2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * kk


ROD_INV_ANGLE_LIMIT = np.pi - 1e-6


def rod_inv(r):
    """Rotation matrices (..., 3, 3) to axis-angle vectors (..., 3).

    Raises ValueError when any rotation angle reaches pi - 1e-6; callers
    that may hit the cut locus must guard themselves.
    """
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r, axis1=-2, axis2=-1)
    theta = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    if np.any(theta >= ROD_INV_ANGLE_LIMIT):
        raise ValueError("rotation angle too close to pi for a stable log map")
    w = unskew(r - np.swapaxes(r, -1, -2)) / 2.0  # sin(theta) * axis
    small = theta < 1e-8
    t = np.where(small, 1.0, theta)
    scale = np.where(small, 1.0 + theta ** 2 / 6.0, t / np.sin(t))
    return w * scale[..., None]


def left_jacobian_inv(omega):
    """Inverse left Jacobian of SO(3) at omega (..., 3) -> (..., 3, 3).

    Maps a tangent increment applied on the left of exp(omega) to the
    first-order change of the axis-angle coordinates.
    """
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    k = skew(omega)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta ** 2 / 720.0,
        1.0 / t ** 2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye - 0.5 * k + c[..., None, None] * (k @ k)


def is_rotation(r, tol=1e-6):
    r = np.asarray(r, dtype=np.float64)
    ortho = np.abs(r @ np.swapaxes(r, -1, -2) - np.eye(3)).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(r) - 1.0) <= tol))


def rotation_geodesic(ra, rb):
    """Geodesic angle(s) in radians between rotation matrices."""
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    rel = ra @ np.swapaxes(rb, -1, -2)
    tr = np.trace(rel, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def unit(v, axis=-1, eps=1e-12):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps)


# ---------------------------------------------------------------------------
# rotation grid over an image domain


@dataclass
class RotationGrid:
    """G x G grid of rotation matrices spread over a pixel domain.

    Node (i, j) sits at pixel (row, col) = (i, j) scaled so the outer
    nodes coincide with the image border pixel centers.  Interpolation
    blends the four surrounding matrices linearly without re-projecting
    onto SO(3).
    """

    cells: np.ndarray  # (G, G, 3, 3)
    extent: tuple      # (height, width) in pixels

    @classmethod
    def identity(cls, g, extent):
        cells = np.broadcast_to(np.eye(3), (g, g, 3, 3)).copy()
        return cls(cells=cells, extent=(int(extent[0]), int(extent[1])))

    @property
    def g(self):
        return self.cells.shape[0]

    def validate(self, tol=1e-6):
        if self.cells.ndim != 4 or self.cells.shape[0] != self.cells.shape[1] \
                or self.cells.shape[2:] != (3, 3):
            raise ValueError(f"bad rotation grid shape {self.cells.shape}")
        if not is_rotation(self.cells, tol):
            raise ValueError("grid cells are not rotations")


def grid_bilinear_setup(g, extent, pts):
    """Bilinear stencil of grid nodes for pixel points pts (N, 2) as (x, y).

    Returns (idx, w): flat node indices (N, 4) into a (G*G,) layout and
    matching weights.  Points must lie inside the pixel domain.
    """
    pts = np.asarray(pts, dtype=np.float64)
    h, w_ext = extent
    x = pts[:, 0]
    y = pts[:, 1]
    if np.any(x < -1e-9) or np.any(x > w_ext - 1 + 1e-9) \
            or np.any(y < -1e-9) or np.any(y > h - 1 + 1e-9):
        raise ValueError("query point outside the grid extent")
    gx = np.clip(x, 0, w_ext - 1) * (g - 1) / (w_ext - 1)
    gy = np.clip(y, 0, h - 1) * (g - 1) / (h - 1)
    j0 = np.minimum(np.floor(gx).astype(np.intp), g - 2)
    i0 = np.minimum(np.floor(gy).astype(np.intp), g - 2)
    fx = gx - j0
    fy = gy - i0
    idx = np.stack([
        i0 * g + j0,
        i0 * g + j0 + 1,
        (i0 + 1) * g + j0,
        (i0 + 1) * g + j0 + 1,
    ], axis=1)
    wts = np.stack([
        (1 - fx) * (1 - fy),
        fx * (1 - fy),
        (1 - fx) * fy,
        fx * fy,
    ], axis=1)
    return idx, wts


def grid_rotation_at(grid, pts):
    """Blended (linear, non-orthonormal) matrices at pixel points (N, 2)."""
    idx, wts = grid_bilinear_setup(grid.g, grid.extent, np.atleast_2d(pts))
    flat = grid.cells.reshape(-1, 3, 3)
    out = np.einsum("nc,ncij->nij", wts, flat[idx])
    return out


# ---------------------------------------------------------------------------
# normal maps


@dataclass
class NormalMap:
    """World-frame unit normals over an image, zero outside the mask."""

    normals: np.ndarray  # (H, W, 3)
    mask: np.ndarray     # (H, W) bool

    @property
    def shape(self):
        return self.mask.shape

    def validate(self, tol=1e-6):
        if self.normals.shape[:2] != self.mask.shape or self.normals.shape[2] != 3:
            raise ValueError("normal map shape mismatch")
        n = np.linalg.norm(self.normals[self.mask], axis=-1)
        if n.size and np.abs(n - 1.0).max() > tol:
            raise ValueError("masked normals are not unit length")
        if np.any(self.normals[~self.mask] != 0.0):
            raise ValueError("normals outside the mask must be zero")

    def copy(self):
        return NormalMap(self.normals.copy(), self.mask.copy())


def make_normal_map(normals, mask):
    """Normalize valid pixels, zero the rest, and wrap as a NormalMap."""
    mask = np.asarray(mask, bool)
    out = np.zeros(mask.shape + (3,))
    if mask.any():
        out[mask] = unit(np.asarray(normals, dtype=np.float64)[mask])
    return NormalMap(out, mask)


# ---------------------------------------------------------------------------
# meshes


@dataclass
class TriMesh:
    vertices: np.ndarray                    # (V, 3) float64
    faces: np.ndarray                       # (F, 3) int
    vertex_colors: np.ndarray | None = None  # (V, 3) in [0, 1]
    vertex_normals: np.ndarray | None = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def is_empty(self):
        return self.n_vertices == 0 or self.n_faces == 0

    def copy(self):
        return TriMesh(
            self.vertices.copy(), self.faces.copy(),
            None if self.vertex_colors is None else self.vertex_colors.copy(),
            None if self.vertex_normals is None else self.vertex_normals.copy(),
        )


def compute_vertex_normals(mesh):
    """Area-weighted per-vertex normals; stores and returns (V, 3)."""
    v = mesh.vertices
    f = mesh.faces
    normals = np.zeros_like(v)
    if len(f):
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        np.add.at(normals, f[:, 0], fn)
        np.add.at(normals, f[:, 1], fn)
        np.add.at(normals, f[:, 2], fn)
    mesh.vertex_normals = unit(normals)
    return mesh.vertex_normals


def sample_mesh_surface(mesh, n, rng):
    """Area-weighted random surface points; returns (points, face_idx, bary)."""
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area = 0.5 * np.linalg.norm(fn, axis=1)
    total = area.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    probs = area / total
    fi = rng.choice(len(f), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    pts = np.einsum("nc,nci->ni", bary, v[f[fi]])
    return pts, fi, bary


def interpolate_vertex_attr(mesh, attr, face_idx, bary):
    return np.einsum("nc,nci->ni", bary, np.asarray(attr)[mesh.faces[face_idx]])


def _point_triangle_distance(p, tri):
    """Exact distances between points p (..., 3) and triangles (..., 3, 3).

    Barycentric region classification; shapes broadcast, one distance per
    leading index.
    """
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    eps = 1e-300
    t_ab = d1 / np.where(np.abs(d1 - d3) < eps, 1.0, d1 - d3)
    t_ac = d2 / np.where(np.abs(d2 - d6) < eps, 1.0, d2 - d6)
    t_bc = (d4 - d3) / np.where(np.abs(d4 - d3 + d5 - d6) < eps, 1.0,
                                d4 - d3 + d5 - d6)
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < eps, 1.0, denom)
    v = vb / denom
    w = vc / denom

    inner = a + v[..., None] * ab + w[..., None] * ac
    closest = inner
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(on_bc[..., None],
                       b + np.clip(t_bc, 0.0, 1.0)[..., None] * (c - b), closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[..., None],
                       a + np.clip(t_ac, 0.0, 1.0)[..., None] * ac, closest)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[..., None],
                       a + np.clip(t_ab, 0.0, 1.0)[..., None] * ab, closest)
    at_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(at_c[..., None], c, closest)
    at_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(at_b[..., None], b, closest)
    at_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(at_a[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def point_mesh_distance(points, mesh, k=16):
    """Distance from each point to the mesh surface.

    Candidate faces come from the k nearest face centroids; the exact
    point-triangle distance is taken over the candidates.  Exact as long
    as the true closest face is within the candidate set, which holds for
    near-uniform triangle sizes (marching cubes output).
    """
    from scipy.spatial import cKDTree

    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]
    kq = min(int(k), len(tri))
    _, idx = cKDTree(tri.mean(axis=1)).query(points, k=kq)
    if kq == 1:
        idx = idx[:, None]
    return _point_triangle_distance(points[:, None, :], tri[idx]).min(axis=1)


# ---------------------------------------------------------------------------
# scalar grids and marching cubes


@dataclass
class ScalarGrid:
    """Regular scalar samples; node (i, j, k) sits at origin + voxel*(i, j, k)."""

    values: np.ndarray  # (nx, ny, nz)
    origin: np.ndarray  # (3,)
    voxel: float

    @classmethod
    def cube(cls, center, size, n):
        """Cubic n^3 grid spanning a size x size x size box around center."""
        center = np.asarray(center, dtype=np.float64)
        voxel = float(size) / (n - 1)
        origin = center - size / 2.0
        return cls(values=np.zeros((n, n, n)), origin=origin, voxel=voxel)

    def node_coords(self):
        nx, ny, nz = self.values.shape
        xs = self.origin[0] + self.voxel * np.arange(nx)
        ys = self.origin[1] + self.voxel * np.arange(ny)
        zs = self.origin[2] + self.voxel * np.arange(nz)
        return xs, ys, zs

    def node_points(self):
        xs, ys, zs = self.node_coords()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def fill(self, fn, chunk=262144):
        """Evaluate fn on all nodes (chunked) and store the values."""
        pts = self.node_points()
        vals = np.empty(len(pts))
        for lo in range(0, len(pts), chunk):
            vals[lo:lo + chunk] = fn(pts[lo:lo + chunk])
        self.values = vals.reshape(self.values.shape)
        return self


_CORNER_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])

# per cube edge: (axis, base corner offset)
_EDGE_AXIS = np.empty(12, dtype=np.intp)
_EDGE_BASE = np.empty((12, 3), dtype=np.intp)
for _e, (_c0, _c1) in enumerate(_mc_tables.EDGE_CORNERS):
    _o0, _o1 = _CORNER_OFFSETS[_c0], _CORNER_OFFSETS[_c1]
    _axis = int(np.nonzero(_o0 != _o1)[0][0])
    _EDGE_AXIS[_e] = _axis
    _EDGE_BASE[_e] = np.minimum(_o0, _o1)

_TRI_TABLE = np.asarray(_mc_tables.TRI_TABLE, dtype=np.intp)
_NTRI = (_TRI_TABLE[:, ::3] >= 0).sum(axis=1)


def marching_cubes(grid, level=0.0):
    """Extract the level isosurface of a ScalarGrid as a welded TriMesh.

    Classic 256-case tables; no ambiguity resolution.  A corner counts as
    inside when its value is strictly below the level, and triangles are
    wound so face normals point toward increasing values (outward for a
    signed distance field).
    """
    vals = np.asarray(grid.values, dtype=np.float64)
    nx, ny, nz = vals.shape
    inside = vals < level

    # one vertex per sign-crossing grid edge, ordered by (axis, node)
    edge_codes = []
    edge_pos = []
    strides = np.array([ny * nz, nz, 1], dtype=np.intp)
    n_nodes = nx * ny * nz
    for axis in range(3):
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[axis] = slice(0, -1)
        sl1[axis] = slice(1, None)
        crossed = inside[tuple(sl0)] != inside[tuple(sl1)]
        base = np.argwhere(crossed).astype(np.intp)
        if len(base) == 0:
            continue
        unit_vec = np.zeros(3)
        unit_vec[axis] = 1.0
        v0 = vals[base[:, 0], base[:, 1], base[:, 2]]
        stepped = base.copy()
        stepped[:, axis] += 1
        v1 = vals[stepped[:, 0], stepped[:, 1], stepped[:, 2]]
        t = (level - v0) / (v1 - v0)
        pos = grid.origin + grid.voxel * (base + t[:, None] * unit_vec)
        edge_codes.append(axis * n_nodes + base @ strides)
        edge_pos.append(pos)

    if not edge_codes:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.intp))
    edge_codes = np.concatenate(edge_codes)
    vertices = np.concatenate(edge_pos, axis=0)
    # codes are generated sorted: ascending axis, then C-order nodes

    corner_bits = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for c in range(8):
        ox, oy, oz = _CORNER_OFFSETS[c]
        corner_bits |= inside[ox:nx - 1 + ox, oy:ny - 1 + oy, oz:nz - 1 + oz].astype(np.uint16) << c
    active = (corner_bits != 0) & (corner_bits != 255)
    cells = np.argwhere(active).astype(np.intp)
    if len(cells) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.intp))
    case = corner_bits[active].astype(np.intp)

    tri_rows = _TRI_TABLE[case]
    counts = _NTRI[case]
    faces = []
    for t in range(5):
        m = counts > t
        if not m.any():
            break
        slots = tri_rows[m, 3 * t:3 * t + 3]          # (M, 3) cube edge ids
        nodes = cells[m][:, None, :] + _EDGE_BASE[slots]
        codes = _EDGE_AXIS[slots] * n_nodes + nodes @ strides
        faces.append(np.searchsorted(edge_codes, codes))
    # table order winds toward decreasing values; flip for outward normals
    faces = np.concatenate(faces, axis=0)[:, ::-1]
    return TriMesh(vertices, np.ascontiguousarray(faces, dtype=np.intp))


# ---------------------------------------------------------------------------
# orthographic rasterization


@dataclass(frozen=True)
class Window:
    """Axis-aligned view rectangle on the canonical image plane.

    The 1 m x 2 m default must bound the whole subject; a body part
    outside the window cannot appear in any map or reconstruction.
    """

    xmin: float = -0.5
    xmax: float = 0.5
    ymin: float = -1.0
    ymax: float = 1.0

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin


CANON_WINDOW = Window()

VIEWS = ("front", "back")


def view_transform(points, view):
    """World points -> (plane_x, plane_y, depth); larger depth is closer."""
    p = np.asarray(points, dtype=np.float64)
    if view == "front":
        return p[..., 0], p[..., 1], p[..., 2]
    if view == "back":
        return -p[..., 0], p[..., 1], -p[..., 2]
    raise ValueError(f"unknown view {view!r}")


def project_to_pixels(points, view, resolution, window=CANON_WINDOW):
    """World points -> float pixel coords (u=col, v=row) and depth."""
    h, w = resolution
    px, py, depth = view_transform(points, view)
    u = (px - window.xmin) / window.width * w - 0.5
    v = (window.ymax - py) / window.height * h - 0.5
    return u, v, depth


def pixel_rays(resolution, window=CANON_WINDOW, view="front"):
    """Pixel-center positions on the image plane, world x/y per view."""
    h, w = resolution
    xs = window.xmin + (np.arange(w) + 0.5) / w * window.width
    ys = window.ymax - (np.arange(h) + 0.5) / h * window.height
    gx, gy = np.meshgrid(xs, ys)
    if view == "back":
        gx = -gx
    return gx, gy


def ortho_rasterize(vertices, faces, attrs, view="front", resolution=(256, 256),
                    window=CANON_WINDOW, valid=None):
    """Z-buffered orthographic rasterization with barycentric interpolation.

    attrs is (V, D) or None.  valid optionally marks vertices whose
    attributes are usable; faces touching an invalid vertex are skipped.
    Returns (attr_map (H, W, D) or None, mask (H, W), depth (H, W)).
    """
    h, w = resolution
    depth_buf = np.full((h, w), -np.inf)
    attr_map = None if attrs is None else np.zeros((h, w, attrs.shape[1]))
    if len(faces) == 0 or len(vertices) == 0:
        return attr_map, np.zeros((h, w), dtype=bool), depth_buf

    u, v, z = project_to_pixels(vertices, view, resolution, window)
    faces = np.asarray(faces, dtype=np.intp)
    if valid is not None:
        faces = faces[np.all(np.asarray(valid, bool)[faces], axis=1)]
        if len(faces) == 0:
            return attr_map, np.zeros((h, w), dtype=bool), depth_buf

    tu = u[faces]  # (F, 3)
    tv = v[faces]
    ulo = np.maximum(np.ceil(tu.min(axis=1) - 1e-9), 0).astype(np.intp)
    uhi = np.minimum(np.floor(tu.max(axis=1) + 1e-9), w - 1).astype(np.intp)
    vlo = np.maximum(np.ceil(tv.min(axis=1) - 1e-9), 0).astype(np.intp)
    vhi = np.minimum(np.floor(tv.max(axis=1) + 1e-9), h - 1).astype(np.intp)
    denom = (tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0]) \
        - (tu[:, 2] - tu[:, 0]) * (tv[:, 1] - tv[:, 0])
    keep = (uhi >= ulo) & (vhi >= vlo) & (np.abs(denom) > 1e-14)
    if not keep.any():
        return attr_map, np.zeros((h, w), dtype=bool), depth_buf
    faces, tu, tv = faces[keep], tu[keep], tv[keep]
    ulo, uhi, vlo, vhi, denom = ulo[keep], uhi[keep], vlo[keep], vhi[keep], denom[keep]

    nu = uhi - ulo + 1
    nv = vhi - vlo + 1
    cnt = nu * nv
    starts = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    total = int(cnt.sum())
    fid = np.repeat(np.arange(len(faces), dtype=np.intp), cnt)
    lin = np.arange(total, dtype=np.intp) - starts[fid]
    fu = ulo[fid] + lin % nu[fid]
    fv = vlo[fid] + lin // nu[fid]

    fuf = fu.astype(np.float64)
    fvf = fv.astype(np.float64)
    l1 = ((fuf - tu[fid, 0]) * (tv[fid, 2] - tv[fid, 0])
          - (tu[fid, 2] - tu[fid, 0]) * (fvf - tv[fid, 0])) / denom[fid]
    l2 = ((tu[fid, 1] - tu[fid, 0]) * (fvf - tv[fid, 0])
          - (fuf - tu[fid, 0]) * (tv[fid, 1] - tv[fid, 0])) / denom[fid]
    l0 = 1.0 - l1 - l2
    eps = 1e-9
    inside = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
    if not inside.any():
        return attr_map, np.zeros((h, w), dtype=bool), depth_buf
    fid, fu, fv = fid[inside], fu[inside], fv[inside]
    bary = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)

    tz = z[faces]
    fdepth = np.einsum("nc,nc->n", bary, tz[fid])
    np.maximum.at(depth_buf, (fv, fu), fdepth)
    win = fdepth == depth_buf[fv, fu]
    fid, fu, fv, bary = fid[win], fu[win], fv[win], bary[win]
    if attrs is not None:
        fattr = np.einsum("nc,nci->ni", bary, np.asarray(attrs, dtype=np.float64)[faces[fid]])
        attr_map[fv, fu] = fattr
    mask = np.isfinite(depth_buf)
    depth_buf[~mask] = -np.inf
    return attr_map, mask, depth_buf


def ortho_render_normals(mesh, view="front", resolution=(256, 256), window=CANON_WINDOW):
    """Render the mesh's world-frame normals from a view as a NormalMap."""
    if mesh.vertex_normals is None:
        compute_vertex_normals(mesh)
    attr, mask, _ = ortho_rasterize(mesh.vertices, mesh.faces, mesh.vertex_normals,
                                    view, resolution, window)
    lengths = np.linalg.norm(attr, axis=-1)
    ok = mask & (lengths > 1e-12)
    return make_normal_map(attr, ok)


def render_silhouette(mesh, view="front", resolution=(256, 256), window=CANON_WINDOW):
    _, mask, _ = ortho_rasterize(mesh.vertices, mesh.faces, None, view, resolution, window)
    return mask


# ---------------------------------------------------------------------------
# masked high-pass


def highpass(values, mask, sigma):
    """Residual after removing a masked Gaussian blur; zero off-mask.

    values is (H, W) or (H, W, C).  The blur renormalizes by the blurred
    mask so invalid pixels neither leak in nor drain mass.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, bool)
    mf = mask.astype(np.float64)
    denom = ndimage.gaussian_filter(mf, sigma, mode="reflect")
    denom = np.maximum(denom, 1e-12)
    squeeze = values.ndim == 2
    vv = values[..., None] if squeeze else values
    out = np.zeros_like(vv)
    for c in range(vv.shape[-1]):
        blurred = ndimage.gaussian_filter(vv[..., c] * mf, sigma, mode="reflect") / denom
        out[..., c] = (vv[..., c] - blurred) * mf
    return out[..., 0] if squeeze else out

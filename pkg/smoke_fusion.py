import time

import numpy as np

from volcap import geomath as gm
from volcap import normalfusion as nf

rng = np.random.default_rng(np.random.PCG64(11))
H = W = 256
G = 32
cfg = nf.FusionConfig(grid_size=G, iterations=50)

yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")


def base_field():
    # short-period undulation: each grid cell sees a wide fan of normals,
    # which pins down the twist component of the cell rotations
    nx = 0.7 * np.sin(2 * np.pi * xx / 24.0) \
        + 0.2 * np.sin(2 * np.pi * (xx + yy) / 40.8)
    ny = 0.7 * np.cos(2 * np.pi * yy / 20.9) \
        + 0.2 * np.cos(2 * np.pi * (xx - yy) / 31.2)
    nz = np.ones_like(nx)
    n = np.stack([nx, ny, nz], axis=-1)
    return gm.make_normal_map(n, np.ones((H, W), dtype=bool))


f_avatar = base_field()

# --- brute-force energy oracle on 8x8 maps
h8 = w8 = 8
g8 = 4
small_a = gm.make_normal_map(rng.normal(size=(h8, w8, 3)), np.ones((h8, w8), bool))
small_i = gm.make_normal_map(rng.normal(size=(h8, w8, 3)), np.ones((h8, w8), bool))
cells = gm.rodrigues(rng.normal(0, 0.2, (g8, g8, 3)))
grid8 = gm.RotationGrid(cells=cells, extent=(h8, w8))
cfg8 = nf.FusionConfig(grid_size=g8)
e, ef, es = nf.energy(grid8, small_a, small_i, cfg8)

ef_brute = 0.0
for r in range(h8):
    for c in range(w8):
        gx = c * (g8 - 1) / (w8 - 1)
        gy = r * (g8 - 1) / (h8 - 1)
        j0, i0 = min(int(gx), g8 - 2), min(int(gy), g8 - 2)
        fx, fy = gx - j0, gy - i0
        rp = ((1 - fx) * (1 - fy) * cells[i0, j0]
              + fx * (1 - fy) * cells[i0, j0 + 1]
              + (1 - fx) * fy * cells[i0 + 1, j0]
              + fx * fy * cells[i0 + 1, j0 + 1])
        diff = rp @ small_a.normals[r, c] - small_i.normals[r, c]
        ef_brute += float(diff @ diff)
es_brute = 0.0
om = gm.rod_inv(cells)
for i in range(g8):
    for j in range(g8):
        for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            if 0 <= i + di < g8 and 0 <= j + dj < g8:
                d = om[i, j] - om[i + di, j + dj]
                es_brute += float(d @ d)
print("energy vs brute force:", abs(ef - ef_brute), abs(es - es_brute))
assert abs(ef - ef_brute) < 1e-10 and abs(es - es_brute) < 1e-10

# --- identity scenario: F_image = F_avatar
t0 = time.time()
grid_id, info_id = nf.solve_rotations(f_avatar, f_avatar, cfg)
drift = gm.rotation_geodesic(grid_id.cells, np.eye(3)).max()
print(f"identity drift: {drift:.2e} rad  ({time.time()-t0:.2f}s, "
      f"{len(info_id['trace'])-1} iters)")
assert drift < 1e-6

# --- constant 15 degree rotation
axis = gm.unit(rng.normal(size=3))
rstar = gm.rodrigues(axis * np.deg2rad(15.0))
rot = np.einsum("ij,hwj->hwi", rstar, f_avatar.normals)
f_image = gm.make_normal_map(rot, f_avatar.mask.copy())
t0 = time.time()
grid_c, info_c = nf.solve_rotations(f_avatar, f_image, cfg)
err = np.rad2deg(gm.rotation_geodesic(grid_c.cells, rstar))
print(f"constant-R*: max cell err {err.max():.4f} deg  "
      f"({time.time()-t0:.2f}s, {len(info_c['trace'])-1} iters)")
assert err.max() < 0.5

fused = nf.fuse_map(f_avatar, f_image, grid_c, cfg)
ang = np.rad2deg(np.arccos(np.clip(
    (fused.normals[f_avatar.mask] * f_avatar.normals[f_avatar.mask]).sum(1), -1, 1)))
print("fused vs GT avatar normals: max", ang.max(), "deg")
assert ang.max() < 0.6

tr = info_c["trace"][:, 0]
assert np.all(np.diff(tr[min(3, len(tr) - 1):]) <= 1e-12)

# --- smooth 20 degree field + high-frequency detail
ang_lf = np.deg2rad(20.0) * np.sin(2 * np.pi * xx / 128.0) \
    * np.cos(2 * np.pi * yy / 160.0)
ax_lf = gm.unit(np.stack([np.sin(2 * np.pi * yy / 200.0),
                          np.cos(2 * np.pi * xx / 180.0),
                          np.ones_like(ang_lf) * 0.5], axis=-1))
r_lf = gm.rodrigues(ax_lf * ang_lf[..., None])
low = np.einsum("hwij,hwj->hwi", r_lf, f_avatar.normals)
# tangent-axis wiggle at ~6 px period plays the role of observed detail
ang_hf = np.deg2rad(4.0) * np.sin(2 * np.pi * (xx + 0.3 * yy) / 6.0)
t_ax = gm.unit(np.cross(low, np.broadcast_to([0.0, 0.0, 1.0], low.shape)))
r_hf = gm.rodrigues(t_ax * ang_hf[..., None])
obs = np.einsum("hwij,hwj->hwi", r_hf, low)
f_image_s = gm.make_normal_map(obs, f_avatar.mask.copy())

t0 = time.time()
grid_s, info_s = nf.solve_rotations(f_avatar, f_image_s, cfg)
dt = time.time() - t0
node_px = np.stack([xx[0, :: (W - 1) // (G - 1)], ] , axis=0)  # unused
gi, gj = np.meshgrid(np.arange(G), np.arange(G), indexing="ij")
py = gi * (H - 1) / (G - 1)
px = gj * (W - 1) / (G - 1)
r_true = gm.rodrigues(
    gm.unit(np.stack([np.sin(2 * np.pi * py / 200.0),
                      np.cos(2 * np.pi * px / 180.0),
                      np.full_like(px, 0.5)], axis=-1))
    * (np.deg2rad(20.0) * np.sin(2 * np.pi * px / 128.0)
       * np.cos(2 * np.pi * py / 160.0))[..., None])
cell_err = np.rad2deg(gm.rotation_geodesic(grid_s.cells, r_true))
print(f"smooth-field: mean cell err {cell_err.mean():.3f} deg "
      f"max {cell_err.max():.3f}  ({dt:.2f}s, {len(info_s['trace'])-1} iters)")
assert cell_err.mean() < 2.0

fused_s = nf.fuse_map(f_avatar, f_image_s, grid_s, cfg)
hp_f = np.stack([gm.highpass(fused_s.normals[..., k], f_avatar.mask, 4.0)
                 for k in range(3)], axis=-1)
hp_i = np.stack([gm.highpass(f_image_s.normals[..., k], f_avatar.mask, 4.0)
                 for k in range(3)], axis=-1)
a = hp_f[f_avatar.mask].ravel()
b = hp_i[f_avatar.mask].ravel()
cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
print("highpass cosine similarity:", cos)
assert cos > 0.9
tr = info_s["trace"][:, 0]
assert np.all(np.diff(tr[min(3, len(tr) - 1):]) <= 1e-12)

# --- equivariance under a global pre-rotation
q = gm.rodrigues(gm.unit(np.array([0.3, -0.5, 0.8])) * np.deg2rad(25.0))
fa_q = gm.make_normal_map(np.einsum("ij,hwj->hwi", q, f_avatar.normals),
                          f_avatar.mask.copy())
fi_q = gm.make_normal_map(np.einsum("ij,hwj->hwi", q, f_image.normals),
                          f_image.mask.copy())
grid_q, _ = nf.solve_rotations(fa_q, fi_q, cfg)
fused_q = nf.fuse_map(fa_q, fi_q, grid_q, cfg)
expect = np.einsum("ij,hwj->hwi", q, fused.normals)
dev = np.abs(fused_q.normals[f_avatar.mask] - expect[f_avatar.mask]).max()
print("equivariance deviation:", dev)
assert dev < 1e-6

# --- empty observation passthrough
empty = gm.NormalMap(normals=np.zeros((H, W, 3)), mask=np.zeros((H, W), bool))
res = nf.fuse_view(f_avatar, empty, cfg)
assert np.array_equal(res.fused.normals, f_avatar.normals)
assert np.array_equal(res.fused.mask, f_avatar.mask)
print("ALL FUSION SMOKE CHECKS PASSED")

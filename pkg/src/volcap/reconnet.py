"""Image-conditioned implicit reconstruction from canonical normal maps.

A strided conv pyramid turns the stacked front/back canonical normal
maps into a coarse feature image; an MLP decodes (bilinearly sampled
feature, depth coordinate) into occupancy.  Training uses synthetic
scans deformed to the canonical pose, so the net learns the prior of
one subject's canonical geometry as seen through its normal maps; at
capture time the maps come from normal fusion instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import bodymodel as bm
from . import difffield as df
from . import geomath as gm
from . import synthcorpus as sc


@dataclass(frozen=True)
class ReconConfig:
    map_resolution: int = 128
    conv_channels: tuple = (8, 16, 32, 64, 64)
    conv_strides: tuple = (2, 2, 1, 1)
    decoder_hidden: tuple = (64, 64)
    depth_freqs: int = 8
    lr: float = 1e-3
    lr_decay_interval: int = 20000
    batch_scans: int = 4
    epochs: int = 40
    points_per_scan: int = 1024
    points_pool: int = 8192
    sigma_near: float = 0.02
    uniform_frac: float = 0.5
    depth_slab: tuple = (-0.35, 0.35)
    seed: int = 0


@dataclass
class ReconNets:
    config: ReconConfig
    conv: df.ConvNet
    decoder: df.MlpNet
    depth_enc: df.PosEnc

    def all_nets(self):
        return [self.conv, self.decoder]

    def zero_grad(self):
        for net in self.all_nets():
            net.zero_grad()

    @property
    def feature_stride(self):
        return int(np.prod(self.config.conv_strides))


def build_recon(config):
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    n_layers = len(config.conv_channels) - 1
    # A linear final feature layer keeps signed features; a relu there
    # leaves roughly half the channels dead at init.
    conv = df.ConvNet(config.conv_channels, config.conv_strides,
                      ("relu",) * (n_layers - 1) + ("none",), rng)
    depth_enc = df.PosEnc(input_dim=1, num_freqs=config.depth_freqs)
    feat_dim = config.conv_channels[-1]
    decoder = df.MlpNet((feat_dim + depth_enc.output_dim,)
                        + tuple(config.decoder_hidden) + (1,),
                        ("relu",) * len(config.decoder_hidden) + ("sigmoid",), rng)
    return ReconNets(config=config, conv=conv, decoder=decoder,
                     depth_enc=depth_enc)


def stack_maps(front, back):
    """(8, H, W) conv input: front/back normals plus coordinate planes.

    Invalid pixels are zeroed.  The two extra channels hold the pixel
    row/column scaled to [-1, 1]; without them the translation-equivariant
    features cannot tie local normal patterns to a body location, and the
    decoder sees no absolute (x, y).
    """
    f = front.normals.copy()
    f[~front.mask] = 0.0
    b = back.normals.copy()
    b[~back.mask] = 0.0
    h, w = front.mask.shape
    rr, cc = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
                         indexing="ij")
    return np.concatenate([f.transpose(2, 0, 1), b.transpose(2, 0, 1),
                           rr[None], cc[None]])


def recon_forward(nets, feat_map, points, window=gm.CANON_WINDOW, record=True):
    """Occupancy at canonical points given a conv feature map.

    Points outside the capture box (canonical window in x/y, configured
    depth slab in z) get occupancy 0 by convention and take no part in
    gradients.  The periodic depth features repeat outside the slab, so
    the clamp also keeps unsupervised far-z space from lighting up.
    Returns (occupancy, cache).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    res = nets.config.map_resolution
    zmin, zmax = nets.config.depth_slab
    inside = ((points[:, 0] >= window.xmin) & (points[:, 0] <= window.xmax)
              & (points[:, 1] >= window.ymin) & (points[:, 1] <= window.ymax)
              & (points[:, 2] >= zmin) & (points[:, 2] <= zmax))
    occ = np.zeros(len(points))
    cache = {"inside": inside, "n": len(points), "uv": None,
             "feat_shape": feat_map.shape}
    if inside.any():
        u, v, depth = gm.project_to_pixels(points[inside], "front",
                                           (res, res), window)
        stride = nets.feature_stride
        uv = np.stack([u / stride, v / stride], axis=1)
        feat = df.bilinear_sample(feat_map, uv)
        # Periodic depth features let the decoder cut a sharp in/out
        # boundary along z without growing huge weights.
        zenc = df.posenc_apply(nets.depth_enc, depth[:, None])
        dec_in = np.concatenate([feat, zenc], axis=1)
        s = nets.decoder.forward(dec_in)
        if not record:
            nets.decoder._tape.pop()
        occ[inside] = s[:, 0]
        cache["uv"] = uv
    return occ, cache


def recon_backward(nets, cache, docc):
    """Backward for one recon_forward; returns grad w.r.t. the feature map."""
    inside = cache["inside"]
    dfeat_map = np.zeros(cache["feat_shape"])
    if cache["uv"] is not None:
        up = np.asarray(docc, dtype=np.float64)[inside][:, None]
        ddec = nets.decoder.backward(up)
        n_feat = nets.config.conv_channels[-1]
        dfeat_map = df.bilinear_sample_backward(cache["feat_shape"],
                                                cache["uv"], ddec[:, :n_feat])
    return dfeat_map


def recon_eval(nets, front, back, points, window=gm.CANON_WINDOW, chunk=131072):
    """Occupancy at canonical points from a front/back normal-map pair."""
    x = stack_maps(front, back)
    feat_map = nets.conv.forward(x)
    nets.conv._tape.pop()
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.zeros(len(points))
    for lo in range(0, len(points), chunk):
        sl = slice(lo, lo + chunk)
        out[sl], _ = recon_forward(nets, feat_map, points[sl], window,
                                   record=False)
    return out


@dataclass
class ReconScanData:
    """Prebaked training item: conv input, labeled canonical points."""

    maps: np.ndarray     # (8, H, W)
    points: np.ndarray   # (P, 3) canonical
    labels: np.ndarray   # (P,)


def prepare_recon_data(corpus, cfg, rng):
    """Render canonical-pose maps and sample labeled points per scan."""
    res = (cfg.map_resolution, cfg.map_resolution)
    items = []
    for scan in corpus.train_scans:
        front = gm.ortho_render_normals(scan.canonical_mesh, "front", res)
        back = gm.ortho_render_normals(scan.canonical_mesh, "back", res)
        n_uniform = int(cfg.points_pool * cfg.uniform_frac)
        n_surface = cfg.points_pool - n_uniform
        pts, labels = sc.sample_points(scan, n_surface, 0, cfg.sigma_near, rng)
        # Uniform points cover the whole capture box, not just the body
        # bounds, so every voxel the clamp lets through is supervised.
        win = gm.CANON_WINDOW
        lo = np.array([win.xmin, win.ymin, cfg.depth_slab[0]])
        hi = np.array([win.xmax, win.ymax, cfg.depth_slab[1]])
        upts = rng.uniform(lo, hi, size=(n_uniform, 3))
        pts = np.concatenate([pts, upts], axis=0)
        labels = np.concatenate([labels, scan.occupancy(upts)])
        items.append(ReconScanData(maps=stack_maps(front, back),
                                   points=pts, labels=labels))
    return items


def train_recon(corpus, nets, cfg, callback=None):
    """BCE training of the reconstruction nets; returns loss history."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    items = prepare_recon_data(corpus, cfg, rng)
    opts = [df.AdamState(net, cfg.lr, decay_interval=cfg.lr_decay_interval)
            for net in nets.all_nets()]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        total = 0.0
        count = 0
        for lo in range(0, len(order), cfg.batch_scans):
            batch = order[lo:lo + cfg.batch_scans]
            nets.zero_grad()
            for si in batch:
                item = items[si]
                idx = rng.choice(len(item.points), size=cfg.points_per_scan,
                                 replace=False)
                feat_map = nets.conv.forward(item.maps)
                occ, cache = recon_forward(nets, feat_map, item.points[idx])
                loss, dpred = df.bce(occ, item.labels[idx])
                mean_loss = float(loss.mean())
                if not np.isfinite(mean_loss):
                    raise RuntimeError(
                        f"recon training diverged at epoch {epoch} scan {si}")
                dmap = recon_backward(nets, cache, dpred / len(idx))
                nets.conv.backward(dmap)
                total += mean_loss
                count += 1
            scale = 1.0 / len(batch)
            for net in nets.all_nets():
                for g in net.grad_arrays():
                    g *= scale
            for opt, net in zip(opts, nets.all_nets()):
                opt.step(net)
        history.append(total / max(count, 1))
        if callback is not None:
            callback(epoch, history[-1])
    return history


def reconstruct(nets, front, back, pose, body, n=128, margin=0.06,
                window=gm.CANON_WINDOW):
    """Canonical mesh from the maps, posed copy by forward skinning.

    Marches cubes over the occupancy at level 0.5 on an N^3 grid spanning
    the body bounds, transfers each vertex the skinning weights of its
    nearest rest-mesh vertex, and skins to the pose.  Raises when the
    level set is empty.
    """
    lo, hi = body.bounds(margin=margin)
    center = (lo + hi) / 2.0
    size = float((hi - lo).max())
    grid = gm.ScalarGrid.cube(center=center, size=size, n=n)
    x = stack_maps(front, back)
    feat_map = nets.conv.forward(x)
    nets.conv._tape.pop()

    def field(p):
        occ, _ = recon_forward(nets, feat_map, p, window, record=False)
        return -occ

    grid.fill(field)
    canonical = gm.marching_cubes(grid, -0.5)
    if canonical.is_empty():
        raise RuntimeError("reconstructed occupancy has an empty 0.5 level set")
    gm.compute_vertex_normals(canonical)
    _, idx = cKDTree(body.rest_mesh.vertices).query(canonical.vertices)
    weights = body.rest_weights[idx]
    posed = canonical.copy()
    posed.vertices = bm.forward_skin(body, pose, canonical.vertices, weights)
    gm.compute_vertex_normals(posed)
    return canonical, posed

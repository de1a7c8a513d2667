"""Decomposed body avatar: pose-agnostic templates plus a learned warp.

Two implicit templates live in a shared canonical "template" space: an
occupancy/density field and a color field.  A pose-conditioned warp maps
canonical query points into that template space before evaluation, so
pose-dependent deformation is carried entirely by the warp while the
templates stay pose-agnostic.  Geometry is supervised with occupancy
labels, texture with volume-rendered ray colors, and the warp magnitude
is regularized toward zero.  The warp decoder's last layer starts at
zero, making the warp an exact identity at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import bodymodel as bm
from . import difffield as df
from . import geomath as gm

POSE_ENCODERS = ("mlp", "conv")


@dataclass(frozen=True)
class AvatarConfig:
    posenc_freqs: int = 10
    trunk_sizes: tuple = (128, 128, 128, 128)
    geo_sizes: tuple = (64,)
    color_sizes: tuple = (64,)
    warp_embed: int = 32
    warp_encoder_sizes: tuple = (64,)
    warp_decoder_sizes: tuple = (128, 128)
    pose_encoder: str = "mlp"
    density_activation: str = "relu"   # or "softplus"
    posmap_res: int = 32
    conv_channels: tuple = (16, 32, 32)
    seed: int = 0

    @classmethod
    def paper_scale(cls):
        """Full-scale network sizes; desk runs use the defaults instead."""
        return cls(trunk_sizes=(256,) * 6, geo_sizes=(128,),
                   color_sizes=(256, 128), warp_embed=64,
                   warp_encoder_sizes=(128,), warp_decoder_sizes=(256,) * 7)


@dataclass
class AvatarNets:
    config: AvatarConfig
    enc: df.PosEnc
    trunk: df.MlpNet
    geo_head: df.MlpNet
    color_head: df.MlpNet
    warp_encoder: object  # MlpNet or ConvNet
    warp_decoder: df.MlpNet
    n_joints: int

    def template_nets(self):
        return [self.trunk, self.geo_head, self.color_head]

    def warp_nets(self):
        return [self.warp_encoder, self.warp_decoder]

    def all_nets(self):
        return self.template_nets() + self.warp_nets()

    def zero_grad(self):
        for net in self.all_nets():
            net.zero_grad()


def build_avatar(config, n_joints):
    if config.pose_encoder not in POSE_ENCODERS:
        raise ValueError(f"unknown pose encoder {config.pose_encoder!r}")
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    enc = df.PosEnc(3, config.posenc_freqs)
    width = config.trunk_sizes[-1]
    trunk = df.MlpNet((enc.output_dim,) + tuple(config.trunk_sizes),
                      ("relu",) * len(config.trunk_sizes), rng)
    geo = df.MlpNet((width,) + tuple(config.geo_sizes) + (2,),
                    ("relu",) * len(config.geo_sizes) + ("none",), rng)
    color = df.MlpNet((width,) + tuple(config.color_sizes) + (3,),
                      ("relu",) * len(config.color_sizes) + ("sigmoid",), rng)
    if config.pose_encoder == "mlp":
        wenc = df.MlpNet((3 * n_joints,) + tuple(config.warp_encoder_sizes)
                         + (config.warp_embed,),
                         ("relu",) * len(config.warp_encoder_sizes) + ("none",), rng)
    else:
        chans = (6,) + tuple(config.conv_channels[:-1]) + (config.warp_embed,)
        wenc = df.ConvNet(chans, (1,) * (len(chans) - 1),
                          ("relu",) * (len(chans) - 2) + ("none",), rng)
    wdec = df.MlpNet((3 + config.warp_embed,) + tuple(config.warp_decoder_sizes) + (3,),
                     ("relu",) * len(config.warp_decoder_sizes) + ("none",), rng,
                     zero_init_last=True)
    return AvatarNets(config=config, enc=enc, trunk=trunk, geo_head=geo,
                      color_head=color, warp_encoder=wenc, warp_decoder=wdec,
                      n_joints=n_joints)


# ---------------------------------------------------------------------------
# pose conditioning


def pose_conditioning(nets, pose, body=None):
    """Encoder input for a pose: flat rotations (mlp) or posed maps (conv)."""
    if nets.config.pose_encoder == "mlp":
        return pose.flat_rotations()[None, :]
    if body is None:
        raise ValueError("conv pose encoder needs the body to render posed maps")
    res = (nets.config.posmap_res, nets.config.posmap_res)
    pm = bm.render_positional_maps(body, pose, res)
    return np.concatenate([pm.front.transpose(2, 0, 1), pm.back.transpose(2, 0, 1)])


# ---------------------------------------------------------------------------
# field evaluation with explicit backward


def avatar_forward(nets, x_c, cond, need_geo=True, need_color=False, record=True):
    """Evaluate the avatar fields at canonical points x_c (N, 3).

    Returns a dict with template coords x_t, warp offsets delta, occupancy
    s, density sigma (both None unless need_geo) and color (None unless
    need_color), plus the cache needed by avatar_backward.  With
    record=False no tape entries are kept and backward is impossible.
    """
    x_c = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
    cfg = nets.config
    n = len(x_c)

    if cfg.pose_encoder == "mlp":
        emb_src = nets.warp_encoder.forward(cond)
        if not record:
            nets.warp_encoder._tape.pop()
        emb = np.broadcast_to(emb_src, (n, cfg.warp_embed))
        uv = None
        feat_map = None
    else:
        feat_map = nets.warp_encoder.forward(cond)
        if not record:
            nets.warp_encoder._tape.pop()
        res = cfg.posmap_res
        u, v, _ = gm.project_to_pixels(x_c, "front", (res, res))
        uv = np.stack([u, v], axis=1)
        emb = df.bilinear_sample(feat_map, uv)

    dec_in = np.concatenate([x_c, emb], axis=1)
    delta = nets.warp_decoder.forward(dec_in)
    if not record:
        nets.warp_decoder._tape.pop()
    x_t = x_c + delta

    s = sigma = color = geo_raw = None
    if need_geo or need_color:
        pe = df.posenc_apply(nets.enc, x_t)
        feat = nets.trunk.forward(pe)
        if not record:
            nets.trunk._tape.pop()
    if need_geo:
        geo_raw = nets.geo_head.forward(feat)
        if not record:
            nets.geo_head._tape.pop()
        s = df.sigmoid(geo_raw[:, 0])
        if cfg.density_activation == "relu":
            sigma = np.maximum(geo_raw[:, 1], 0.0)
        else:
            sigma = _act_softplus(geo_raw[:, 1])
    if need_color:
        color = nets.color_head.forward(feat)
        if not record:
            nets.color_head._tape.pop()

    cache = {"x_t": x_t, "geo_raw": geo_raw, "s": s, "need_geo": need_geo,
             "need_color": need_color, "uv": uv,
             "feat_shape": None if feat_map is None else feat_map.shape,
             "n": n}
    return {"x_t": x_t, "delta": delta, "s": s, "sigma": sigma,
            "color": color, "cache": cache}


def _act_softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def avatar_backward(nets, cache, ds=None, dsigma=None, dcolor=None, ddelta=None):
    """Accumulate parameter gradients for one avatar_forward call.

    Calls that interleave several forwards must unwind them in reverse
    order (the nets keep LIFO tapes).
    """
    cfg = nets.config
    n = cache["n"]
    dfeat = None
    if cache["need_color"]:
        up = np.zeros((n, 3)) if dcolor is None else np.asarray(dcolor, dtype=np.float64)
        dfeat = nets.color_head.backward(up)
    if cache["need_geo"]:
        geo_raw = cache["geo_raw"]
        d_raw = np.zeros((n, 2))
        if ds is not None:
            s = cache["s"]
            d_raw[:, 0] = ds * s * (1.0 - s)
        if dsigma is not None:
            if cfg.density_activation == "relu":
                d_raw[:, 1] = dsigma * (geo_raw[:, 1] > 0.0)
            else:
                d_raw[:, 1] = dsigma * df.sigmoid(geo_raw[:, 1])
        dg = nets.geo_head.backward(d_raw)
        dfeat = dg if dfeat is None else dfeat + dg
    if dfeat is not None:
        dpe = nets.trunk.backward(dfeat)
        dx_t = df.posenc_backward(nets.enc, cache["x_t"], dpe)
        d_delta = dx_t if ddelta is None else dx_t + ddelta
    elif ddelta is not None:
        d_delta = np.asarray(ddelta, dtype=np.float64)
    else:
        raise ValueError("nothing to backpropagate")
    d_dec_in = nets.warp_decoder.backward(d_delta)
    demb = d_dec_in[:, 3:]
    if cfg.pose_encoder == "mlp":
        nets.warp_encoder.backward(demb.sum(axis=0, keepdims=True))
    else:
        dmap = df.bilinear_sample_backward(cache["feat_shape"], cache["uv"], demb)
        nets.warp_encoder.backward(dmap)


def eval_geo(nets, x_c, cond, record=False):
    """Occupancy in [0, 1] at canonical points for a pose conditioning."""
    return avatar_forward(nets, x_c, cond, need_geo=True, record=record)["s"]


def eval_tex(nets, x_c, cond, record=False):
    """(density, color) at canonical points for a pose conditioning."""
    out = avatar_forward(nets, x_c, cond, need_geo=True, need_color=True,
                         record=record)
    return out["sigma"], out["color"]


def warp_points(nets, x_c, cond):
    """Template coords of canonical points (identity at initialization)."""
    return avatar_forward(nets, x_c, cond, need_geo=False, need_color=False,
                          record=False)["x_t"]


# ---------------------------------------------------------------------------
# volume rendering quadrature


def composite_quadrature(sigma, colors, deltas):
    """Front-to-back compositing of per-sample (density, color) along rays.

    sigma, deltas are (R, K); colors (R, K, 3).  alpha_k = 1 - exp(-sigma_k
    delta_k), transmittance multiplies the survivals of earlier samples.
    Returns (ray colors (R, 3), cache).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    alpha = 1.0 - np.exp(-sigma * deltas)
    surv = np.concatenate([np.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], axis=1)
    trans = np.cumprod(surv, axis=1)
    weights = trans * alpha
    out = np.einsum("rk,rki->ri", weights, colors)
    cache = {"sigma": sigma, "deltas": deltas, "colors": colors,
             "alpha": alpha, "trans": trans, "weights": weights}
    return out, cache


def composite_quadrature_backward(cache, dout):
    """Gradients (dsigma, dcolors) of the compositing given dL/dout (R, 3)."""
    alpha = cache["alpha"]
    trans = cache["trans"]
    weights = cache["weights"]
    dout = np.asarray(dout, dtype=np.float64)
    dcolors = weights[..., None] * dout[:, None, :]
    dot = np.einsum("rki,ri->rk", cache["colors"], dout)
    wdot = weights * dot
    # suffix sums of w_k dot_k for k > j
    suffix = np.flip(np.cumsum(np.flip(wdot, axis=1), axis=1), axis=1) - wdot
    dalpha = trans * dot - suffix / np.maximum(1.0 - alpha, 1e-12)
    dsigma = dalpha * cache["deltas"] * np.exp(-cache["sigma"] * cache["deltas"])
    return dsigma, dcolors


def stratified_ts(far, n_samples, rng=None, jitter=None):
    """Per-ray sample distances in [0, far); jitter overrides the rng."""
    far = np.asarray(far, dtype=np.float64)
    k = n_samples
    if jitter is None:
        jitter = rng.random((len(far), k)) if rng is not None \
            else np.full((len(far), k), 0.5)
    return (np.arange(k) + jitter) / k * far[:, None]


def render_rays(nets, scan, cond, origins, dirs, far, n_samples=32,
                rng=None, jitter=None, record=False):
    """Volume-render posed-space rays through the canonical avatar.

    Sample points are inverse-skinned into canonical space with the
    scan's own skinning weights before field evaluation; samples whose
    blended transform is near-singular contribute nothing.  Returns
    (colors (R, 3), aux dict with caches for the backward pass).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    r, k = len(origins), n_samples
    ts = stratified_ts(far, k, rng=rng, jitter=jitter)
    deltas = np.diff(ts, axis=1, append=np.asarray(far, dtype=np.float64)[:, None])
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    canon, ok = scan.canonicalize_points(flat)

    sigma = np.zeros(r * k)
    colors = np.zeros((r * k, 3))
    fields = None
    if ok.any():
        fields = avatar_forward(nets, canon[ok], cond, need_geo=True,
                                need_color=True, record=record)
        sigma[ok] = fields["sigma"]
        colors[ok] = fields["color"]
    out, qcache = composite_quadrature(sigma.reshape(r, k),
                                       colors.reshape(r, k, 3), deltas)
    aux = {"qcache": qcache, "fields": fields, "ok": ok, "canon": canon,
           "shape": (r, k)}
    return out, aux


def render_rays_backward(nets, aux, dout, dreg=None):
    """Backward for render_rays; dreg optionally adds d/d(delta) weight."""
    r, k = aux["shape"]
    dsigma, dcolors = composite_quadrature_backward(aux["qcache"], dout)
    ok = aux["ok"]
    if aux["fields"] is None:
        return
    ddelta = None
    if dreg is not None:
        ddelta = dreg * aux["fields"]["delta"]
    avatar_backward(nets, aux["fields"]["cache"],
                    dsigma=dsigma.reshape(-1)[ok],
                    dcolor=dcolors.reshape(-1, 3)[ok],
                    ddelta=ddelta)


# ---------------------------------------------------------------------------
# training losses


def loss_total(nets, scan, cond, points, labels, ray_origins, ray_dirs,
               ray_far, ray_colors, cfg, rng=None, jitter=None,
               backward=True):
    """Weighted geometry + texture + warp-regularization loss for one scan.

    Geometry: mean binary cross entropy of occupancy at canonical points.
    Texture: mean squared color error of volume-rendered rays.  Warp
    regularization: mean squared offset over the canonical points and the
    valid ray samples.  When backward is set, parameter gradients for the
    whole composite are accumulated on the nets.
    Returns (total, dict of parts).
    """
    n_p = len(points)
    out_p = avatar_forward(nets, points, cond, need_geo=True, record=backward)
    loss_g, dpred = df.bce(out_p["s"], labels)
    loss_g = float(loss_g.mean())

    ray_out, aux = render_rays(nets, scan, cond, ray_origins, ray_dirs, ray_far,
                               n_samples=cfg.samples_per_ray, rng=rng,
                               jitter=jitter, record=backward)
    resid = ray_out - ray_colors
    loss_t = float((resid ** 2).sum(axis=1).mean()) if len(resid) else 0.0

    n_reg = n_p + (int(aux["ok"].sum()) if aux["fields"] is not None else 0)
    reg_p = float((out_p["delta"] ** 2).sum())
    reg_r = float((aux["fields"]["delta"] ** 2).sum()) if aux["fields"] is not None else 0.0
    loss_r = (reg_p + reg_r) / max(n_reg, 1)

    total = cfg.weight_geometry * loss_g + cfg.weight_texture * loss_t \
        + cfg.weight_warp_reg * loss_r

    if backward:
        # unwind in reverse forward order: rays first, then points
        dray = (2.0 * cfg.weight_texture / max(len(resid), 1)) * resid
        render_rays_backward(nets, aux, dray,
                             dreg=2.0 * cfg.weight_warp_reg / max(n_reg, 1))
        ds = (cfg.weight_geometry / n_p) * dpred
        avatar_backward(nets, out_p["cache"], ds=ds,
                        ddelta=(2.0 * cfg.weight_warp_reg / max(n_reg, 1))
                        * out_p["delta"])
    parts = {"geometry": loss_g, "texture": loss_t, "warp_reg": loss_r}
    return total, parts


def train_avatar(corpus, nets, cfg, body=None, callback=None):
    """Optimize the avatar on the corpus; returns per-epoch loss history.

    An epoch visits every scan draws_per_scan times in shuffled order,
    each visit with freshly drawn points, rays, and jitter.  The warp
    nets stay frozen for the first warp_frozen_epochs so the templates
    settle first.  Template and warp groups use separate Adam
    learning rates; both halve every lr_decay_interval steps.  Raises on
    non-finite losses.
    """
    body = body if body is not None else corpus.subject.body
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    opt_template = [df.AdamState(net, cfg.lr_template,
                                 decay_interval=cfg.lr_decay_interval)
                    for net in nets.template_nets()]
    opt_warp = [df.AdamState(net, cfg.lr_warp, decay_interval=cfg.lr_decay_interval)
                for net in nets.warp_nets()]
    scans = list(corpus.train_scans)
    conds = [pose_conditioning(nets, s.pose, body) for s in scans]
    history = []
    visits = np.repeat(np.arange(len(scans)), max(cfg.draws_per_scan, 1))
    for epoch in range(cfg.epochs):
        order = rng.permutation(visits)
        epoch_parts = {"total": 0.0, "geometry": 0.0, "texture": 0.0, "warp_reg": 0.0}
        n_iters = 0
        for lo in range(0, len(order), cfg.batch_scans):
            batch = order[lo:lo + cfg.batch_scans]
            nets.zero_grad()
            for si in batch:
                scan = scans[si]
                p_idx = rng.choice(len(scan.points), size=cfg.points_per_scan,
                                   replace=False)
                r_idx = rng.choice(len(scan.ray_origins), size=cfg.rays_per_scan,
                                   replace=False)
                jitter = rng.random((cfg.rays_per_scan, cfg.samples_per_ray))
                total, parts = loss_total(
                    nets, scan, conds[si], scan.points[p_idx],
                    scan.point_labels[p_idx], scan.ray_origins[r_idx],
                    scan.ray_dirs[r_idx], scan.ray_far[r_idx],
                    scan.ray_colors[r_idx], cfg, jitter=jitter)
                if not np.isfinite(total):
                    raise RuntimeError(
                        f"training diverged at epoch {epoch} scan {si}: {parts}")
                epoch_parts["total"] += total
                for k, v in parts.items():
                    epoch_parts[k] += v
            # grads accumulated over the batch; scale by batch size
            scale = 1.0 / len(batch)
            for net in nets.all_nets():
                for g in net.grad_arrays():
                    g *= scale
            for opt, net in zip(opt_template, nets.template_nets()):
                opt.step(net)
            if epoch >= cfg.warp_frozen_epochs:
                for opt, net in zip(opt_warp, nets.warp_nets()):
                    opt.step(net)
            n_iters += len(batch)
        history.append({k: v / max(n_iters, 1) for k, v in epoch_parts.items()})
        if callback is not None:
            callback(epoch, history[-1])
    return history


# ---------------------------------------------------------------------------
# animation, texture, correspondences


def occupancy_grid(nets, cond, center, size, n, chunk=65536, clip_box=None):
    """Negated occupancy on a cubic grid (inside = below -0.5 level).

    clip_box, when given as an (lo, hi) pair, zeroes the field outside
    that axis-aligned box.  The field is only supervised inside the
    corpus sampling box, so far regions of the marching cube would
    otherwise grow pose-dependent spurious components.
    """
    grid = gm.ScalarGrid.cube(center=center, size=size, n=n)
    if clip_box is None:
        grid.fill(lambda p: -eval_geo(nets, p, cond), chunk=chunk)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in clip_box)

        def field(p):
            s = np.zeros(len(p))
            inside = np.all((p >= lo) & (p <= hi), axis=1)
            if inside.any():
                s[inside] = eval_geo(nets, p[inside], cond)
            return -s

        grid.fill(field, chunk=chunk)
    return grid


def animate(nets, pose, body, n=96, margin=0.06, window=gm.CANON_WINDOW,
            map_resolution=(256, 256)):
    """Canonical mesh plus front/back normal maps for a novel pose.

    Marches the cubes of the pose-conditioned occupancy at level 0.5 and
    renders the world-frame normals orthographically.  The field is
    clamped to the padded body bounds box, which every training sampler
    covers; the rest of the bounding cube is unsupervised.  Raises when
    the level set is empty.
    """
    cond = pose_conditioning(nets, pose, body)
    lo, hi = body.bounds(margin=margin)
    center = (lo + hi) / 2.0
    size = float((hi - lo).max())
    grid = occupancy_grid(nets, cond, center, size, n, clip_box=(lo, hi))
    mesh = gm.marching_cubes(grid, -0.5)
    if mesh.is_empty():
        raise RuntimeError("animated occupancy has an empty 0.5 level set")
    gm.compute_vertex_normals(mesh)
    front = gm.ortho_render_normals(mesh, "front", map_resolution, window)
    back = gm.ortho_render_normals(mesh, "back", map_resolution, window)
    return mesh, front, back


def generate_texture(nets, mesh, cond, depth=0.02, n_samples=16):
    """Per-vertex colors by volume rendering short rays along -normal.

    Each ray starts depth meters outside the vertex and marches 2*depth
    inward with deterministic midpoint samples; the composited color is
    assigned to the vertex (and stored on the mesh).
    """
    if mesh.vertex_normals is None:
        gm.compute_vertex_normals(mesh)
    v = mesh.vertices
    nrm = mesh.vertex_normals
    origins = v + depth * nrm
    far = np.full(len(v), 2.0 * depth)
    ts = stratified_ts(far, n_samples)  # midpoint rule
    deltas = np.diff(ts, axis=1, append=far[:, None])
    pts = origins[:, None, :] - ts[..., None] * nrm[:, None, :]
    sigma, color = eval_tex(nets, pts.reshape(-1, 3), cond)
    out, cache = composite_quadrature(sigma.reshape(len(v), n_samples),
                                      color.reshape(len(v), n_samples, 3), deltas)
    opacity = cache["weights"].sum(axis=1)
    mesh.vertex_colors = np.clip(out, 0.0, 1.0)
    return mesh.vertex_colors, opacity


def extract_template(nets, center, size, n=96):
    """Mesh of the raw template occupancy (no warp applied)."""
    grid = gm.ScalarGrid.cube(center=center, size=size, n=n)

    def field(p):
        pe = df.posenc_apply(nets.enc, p)
        feat = nets.trunk.forward(pe)
        nets.trunk._tape.pop()
        raw = nets.geo_head.forward(feat)
        nets.geo_head._tape.pop()
        return -df.sigmoid(raw[:, 0])

    grid.fill(field)
    mesh = gm.marching_cubes(grid, -0.5)
    gm.compute_vertex_normals(mesh)
    return mesh


def correspondence_labels(nets, mesh, cond, template_mesh, plane_height=0.1):
    """Binary part labels for mesh vertices via template nearest neighbors.

    The template surface is split once by a horizontal plane; every
    animated vertex is warped into template space and takes the label of
    the nearest template vertex.
    """
    from scipy.spatial import cKDTree

    template_labels = (template_mesh.vertices[:, 1] > plane_height).astype(np.float64)
    warped = warp_points(nets, mesh.vertices, cond)
    _, idx = cKDTree(template_mesh.vertices).query(warped)
    return template_labels[idx]


def label_boundary_height(mesh, labels):
    """Mean canonical height of edges whose endpoint labels disagree."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    flip = labels[edges[:, 0]] != labels[edges[:, 1]]
    if not flip.any():
        return float("nan")
    mids = mesh.vertices[edges[flip]].mean(axis=1)
    return float(mids[:, 1].mean())

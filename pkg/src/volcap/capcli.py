"""Command line driver for the capture pipeline.

Every stage reads one JSON config (--config) and puts its artifacts
under the configured workdir, so stages can run in separate invocations
and still find each other's outputs.  Exit codes: 2 when a required
checkpoint is missing, 3 when normal fusion fails, 4 when the
reconstructed occupancy has an empty level set, 1 for other errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import os
import sys

import numpy as np

from . import avatar as av
from . import bodymodel as bm
from . import config as cf
from . import fileio as fio
from . import normalfusion as nf
from . import reconnet as rn
from . import synthcorpus as sc

EXIT_USAGE = 1
EXIT_MISSING_CHECKPOINT = 2
EXIT_FUSION_FAILURE = 3
EXIT_EMPTY_RECONSTRUCTION = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors by default; 2 is reserved
    # for missing checkpoints here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_pipeline(args):
    if args.config:
        cfg = cf.load_config(args.config)
    else:
        cfg = cf.PipelineConfig(workdir=os.path.abspath("runs/default"))
    return cf.with_seed(cfg, args.seed)


def _require(path, what, code=EXIT_USAGE):
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}", code)
    return path


def _load_avatar_ckpt(paths):
    _require(paths.avatar_ckpt, "avatar checkpoint", EXIT_MISSING_CHECKPOINT)
    return fio.load_avatar(paths.avatar_ckpt)


def _load_recon_ckpt(paths):
    _require(paths.recon_ckpt, "reconstruction checkpoint",
             EXIT_MISSING_CHECKPOINT)
    return fio.load_recon(paths.recon_ckpt)


def _corpus_params(cfg, paths):
    """Generation parameters, preferring the ones synth-corpus recorded."""
    if os.path.exists(paths.corpus_json):
        with open(paths.corpus_json, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        subject = cf._build_section(cf.SubjectParams, raw["subject"],
                                    "corpus.json subject")
        corpus = cf._build_section(cf.CorpusParams, raw["corpus"],
                                   "corpus.json corpus")
        return subject, corpus
    return cfg.subject, cfg.corpus


def _get_corpus(cfg, paths):
    sp, cp = _corpus_params(cfg, paths)
    subject = cf.make_subject(sp)
    return subject, cf.make_corpus(subject, cp)


# ---------------------------------------------------------------------------
# stages


def cmd_synth_corpus(cfg, args):
    paths = cf.run_paths(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    subject = cf.make_subject(cfg.subject)
    corpus = cf.make_corpus(subject, cfg.corpus)
    with open(paths.corpus_json, "w", encoding="utf-8") as fh:
        json.dump({"subject": dataclasses.asdict(cfg.subject),
                   "corpus": dataclasses.asdict(cfg.corpus)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    cap = cfg.capture
    for i, scan in enumerate(corpus.heldout_scans):
        frame = paths.frame_dir(f"{i:03d}")
        os.makedirs(frame, exist_ok=True)
        observed, true_pose, est_pose = sc.synth_observation(
            subject, scan.pose, pose_error=cap.pose_error,
            noise_sigma=cap.noise_sigma, resolution=tuple(cap.observation_res),
            mesh_n=cfg.corpus.mesh_n, seed=cap.seed + i)
        fio.save_normal_map(os.path.join(frame, "observed_front.tnsr"), observed)
        fio.save_pose(os.path.join(frame, "pose.tnsr"), est_pose)
        fio.save_pose(os.path.join(frame, "pose_true.tnsr"), true_pose)
    print(f"corpus: {len(corpus.train_scans)} train / "
          f"{len(corpus.heldout_scans)} held-out scans; frames under "
          f"{os.path.join(cfg.workdir, 'frames')}")
    return 0


def cmd_train_avatar(cfg, args):
    paths = cf.run_paths(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    subject, corpus = _get_corpus(cfg, paths)
    nets = av.build_avatar(cfg.avatar, subject.body.n_joints)
    history = av.train_avatar(corpus, nets, cfg.train, subject.body,
                              callback=_epoch_printer("avatar"))
    fio.save_avatar(paths.avatar_ckpt, nets)
    print(f"avatar checkpoint: {paths.avatar_ckpt} "
          f"(final loss {history[-1]['total']:.5f})")
    return 0


def cmd_train_recon(cfg, args):
    paths = cf.run_paths(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    subject, corpus = _get_corpus(cfg, paths)
    nets = rn.build_recon(cfg.recon)
    history = rn.train_recon(corpus, nets, cfg.recon,
                             callback=_epoch_printer("recon", every=50))
    fio.save_recon(paths.recon_ckpt, nets)
    print(f"reconstruction checkpoint: {paths.recon_ckpt} "
          f"(final loss {history[-1]:.5f})")
    return 0


def _epoch_printer(tag, every=1):
    def cb(epoch, loss):
        if epoch % every == 0 or epoch < 3:
            val = loss["total"] if isinstance(loss, dict) else loss
            print(f"  [{tag}] epoch {epoch}: loss {val:.5f}")
    return cb


def _frame_pose(frame):
    return fio.load_pose(_require(os.path.join(frame, "pose.tnsr"),
                                  "frame pose"))


def cmd_animate(cfg, args):
    paths = cf.run_paths(cfg)
    nets = _load_avatar_ckpt(paths)
    subject = cf.make_subject(cfg.subject)
    body = subject.body
    frame = _require(paths.frame_dir(args.frame), "frame directory")
    pose = _frame_pose(frame)
    cap = cfg.capture
    mesh, front, back = av.animate(nets, pose, body, n=cap.mc_resolution,
                                   margin=cap.mc_margin,
                                   map_resolution=tuple(cap.map_resolution))
    fio.save_normal_map(os.path.join(frame, "avatar_front.tnsr"), front)
    fio.save_normal_map(os.path.join(frame, "avatar_back.tnsr"), back)
    fio.write_ply(os.path.join(frame, "avatar_mesh.ply"), mesh)
    print(f"animated avatar: {mesh.n_vertices} vertices -> {frame}")
    return 0


def _fusion_ok(result):
    return (np.all(np.isfinite(result.trace))
            and np.isfinite(result.residual_rms)
            and np.all(np.isfinite(result.fused.normals)))


def cmd_fuse_normals(cfg, args):
    paths = cf.run_paths(cfg)
    frame = _require(paths.frame_dir(args.frame), "frame directory")
    subject = cf.make_subject(cfg.subject)
    pose = _frame_pose(frame)
    avatar_front = fio.load_normal_map(
        _require(os.path.join(frame, "avatar_front.tnsr"),
                 "avatar normal map (run animate first)"))
    avatar_back = fio.load_normal_map(
        _require(os.path.join(frame, "avatar_back.tnsr"),
                 "avatar normal map (run animate first)"))
    observed = fio.load_normal_map(
        _require(os.path.join(frame, "observed_front.tnsr"),
                 "observed normal map"))
    avatar_mesh = fio.read_ply(
        _require(os.path.join(frame, "avatar_mesh.ply"), "avatar mesh"))

    obs_front, obs_back = bm.canonicalize_normal_map(
        subject.body, pose, avatar_mesh, observed,
        resolution=tuple(cfg.capture.map_resolution))
    try:
        res_front, res_back = nf.fuse(avatar_front, avatar_back,
                                      obs_front, obs_back, cfg.fusion)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise CliError(f"normal fusion failed: {exc}", EXIT_FUSION_FAILURE)
    if not (_fusion_ok(res_front) and _fusion_ok(res_back)):
        raise CliError("normal fusion produced non-finite values",
                       EXIT_FUSION_FAILURE)

    fio.save_normal_map(os.path.join(frame, "fused_front.tnsr"), res_front.fused)
    fio.save_normal_map(os.path.join(frame, "fused_back.tnsr"), res_back.fused)
    for tag, res in (("front", res_front), ("back", res_back)):
        with open(os.path.join(frame, f"fusion_trace_{tag}.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(nf.trace_csv(res.trace))
    if args.dump_intermediates:
        inter = os.path.join(frame, "intermediates")
        os.makedirs(inter, exist_ok=True)
        fio.save_normal_map(os.path.join(inter, "observed_canonical_front.tnsr"),
                            obs_front)
        fio.save_normal_map(os.path.join(inter, "observed_canonical_back.tnsr"),
                            obs_back)
        fio.write_tensors(os.path.join(inter, "rotation_grids.tnsr"),
                          {"front": res_front.grid.cells.astype("<f8"),
                           "back": res_back.grid.cells.astype("<f8")})
    print(f"fused normals -> {frame} "
          f"(front rms {res_front.residual_rms:.5f}, "
          f"back rms {res_back.residual_rms:.5f})")
    return 0


def cmd_reconstruct(cfg, args):
    paths = cf.run_paths(cfg)
    nets = _load_recon_ckpt(paths)
    frame = _require(paths.frame_dir(args.frame), "frame directory")
    subject = cf.make_subject(cfg.subject)
    pose = _frame_pose(frame)
    prefix = {"fused": "fused", "avatar": "avatar"}[args.maps]
    front = fio.load_normal_map(
        _require(os.path.join(frame, f"{prefix}_front.tnsr"),
                 f"{args.maps} front map"))
    back = fio.load_normal_map(
        _require(os.path.join(frame, f"{prefix}_back.tnsr"),
                 f"{args.maps} back map"))
    try:
        canonical, posed = rn.reconstruct(nets, front, back, pose, subject.body,
                                          n=cfg.capture.mc_resolution,
                                          margin=cfg.capture.mc_margin)
    except RuntimeError as exc:
        raise CliError(str(exc), EXIT_EMPTY_RECONSTRUCTION)
    fio.write_ply(os.path.join(frame, "recon_canonical.ply"), canonical)
    fio.write_ply(os.path.join(frame, "recon_posed.ply"), posed)
    print(f"reconstructed {canonical.n_vertices} vertices -> {frame}")
    return 0


def cmd_texgen(cfg, args):
    paths = cf.run_paths(cfg)
    nets = _load_avatar_ckpt(paths)
    frame = _require(paths.frame_dir(args.frame), "frame directory")
    subject = cf.make_subject(cfg.subject)
    pose = _frame_pose(frame)
    canonical = fio.read_ply(
        _require(os.path.join(frame, "recon_canonical.ply"),
                 "reconstructed mesh (run reconstruct first)"))
    posed = fio.read_ply(
        _require(os.path.join(frame, "recon_posed.ply"), "posed mesh"))
    cond = av.pose_conditioning(nets, pose, subject.body)
    colors, opacity = av.generate_texture(nets, canonical, cond,
                                          depth=cfg.capture.texture_depth,
                                          n_samples=cfg.capture.texture_samples)
    posed.vertex_colors = colors.copy()
    fio.write_ply(os.path.join(frame, "textured_canonical.ply"), canonical)
    fio.write_ply(os.path.join(frame, "textured_posed.ply"), posed)
    print(f"textured {canonical.n_vertices} vertices "
          f"(median opacity {np.median(opacity):.3f}) -> {frame}")
    return 0


def _capture_one(cfg, args, frame_name):
    ns = argparse.Namespace(**vars(args))
    ns.frame = frame_name
    ns.maps = "fused"
    cmd_animate(cfg, ns)
    cmd_fuse_normals(cfg, ns)
    cmd_reconstruct(cfg, ns)
    cmd_texgen(cfg, ns)
    return 0


def _capture_worker(payload):
    cfg_dict, args_dict, frame_name = payload
    cfg = cf.config_from_dict(cfg_dict)
    args = argparse.Namespace(**args_dict)
    try:
        return frame_name, _capture_one(cfg, args, frame_name), ""
    except CliError as exc:
        return frame_name, exc.code, str(exc)


def cmd_capture(cfg, args):
    paths = cf.run_paths(cfg)
    if args.frame == "all":
        frames_root = os.path.join(cfg.workdir, "frames")
        _require(frames_root, "frames directory (run synth-corpus first)")
        names = sorted(os.listdir(frames_root))
    else:
        names = [args.frame]
    if args.jobs > 1 and len(names) > 1:
        payloads = [(cf.config_to_dict(cfg), vars(args), n) for n in names]
        with multiprocessing.get_context("fork").Pool(args.jobs) as pool:
            results = pool.map(_capture_worker, payloads)
        failures = [(n, code, msg) for n, code, msg in results if code != 0]
        for n, code, msg in failures:
            print(f"frame {n} failed ({code}): {msg}", file=sys.stderr)
        return failures[0][1] if failures else 0
    for name in names:
        _capture_one(cfg, args, name)
    return 0


def cmd_eval(cfg, args):
    from . import evalsuite as ev
    paths = cf.run_paths(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    rows = ev.run_suite(cfg, only=args.only, jobs=args.jobs)
    csv_text = ev.metrics_csv(rows)
    with open(paths.metrics_csv, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    print(f"metrics written to {paths.metrics_csv}")
    return 0 if all(r.passed for r in rows) else 1


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = _Parser(prog="volcap",
                     description="avatar-conditioned monocular volumetric capture")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None,
                        help="override every stage seed from one value")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker processes for multi-frame stages")
    common.add_argument("--dump-intermediates", action="store_true",
                        help="write extra per-stage artifacts")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-corpus", parents=[common],
                   help="generate the synthetic scan corpus and capture frames")
    sub.add_parser("train-avatar", parents=[common],
                   help="fit the decomposed avatar to the corpus")
    sub.add_parser("train-recon", parents=[common],
                   help="fit the map-conditioned occupancy net")

    p = sub.add_parser("animate", parents=[common],
                       help="avatar mesh and normal maps for a frame's pose")
    p.add_argument("--frame", required=True)

    p = sub.add_parser("fuse-normals", parents=[common],
                       help="fuse avatar and observed normal maps")
    p.add_argument("--frame", required=True)

    p = sub.add_parser("reconstruct", parents=[common],
                       help="mesh from canonical normal maps")
    p.add_argument("--frame", required=True)
    p.add_argument("--maps", choices=("fused", "avatar"), default="fused")

    p = sub.add_parser("texgen", parents=[common],
                       help="paint reconstructed meshes from the avatar texture")
    p.add_argument("--frame", required=True)

    p = sub.add_parser("capture", parents=[common],
                       help="full animate/fuse/reconstruct/texgen pass")
    p.add_argument("--frame", default="all",
                   help="frame name, or 'all' for every frame")

    p = sub.add_parser("eval", parents=[common],
                       help="compute the acceptance metrics CSV")
    p.add_argument("--only", default=None,
                   help="run only metrics whose name contains this substring")
    return parser


_COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "train-avatar": cmd_train_avatar,
    "train-recon": cmd_train_recon,
    "animate": cmd_animate,
    "fuse-normals": cmd_fuse_normals,
    "reconstruct": cmd_reconstruct,
    "texgen": cmd_texgen,
    "capture": cmd_capture,
    "eval": cmd_eval,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_pipeline(args)
        return _COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"volcap {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

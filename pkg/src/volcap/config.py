"""Pipeline configuration tree and its strict JSON loader.

One JSON file drives every CLI stage.  Sections mirror the per-module
config dataclasses; unknown keys are rejected so typos fail loudly
instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from . import avatar as av
from . import bodymodel as bm
from . import difffield as df
from . import normalfusion as nf
from . import reconnet as rn
from . import synthcorpus as sc


@dataclass(frozen=True)
class SubjectParams:
    """Synthetic subject: body plus pose-dependent cloth behavior."""

    mesh_n: int = 96
    weight_falloff: float = 0.05
    wrinkle_amp_base: float = 0.01
    wrinkle_amp_slope: float = 0.004
    wrinkle_wavelength: float = 0.10
    stripe_period: float = 0.30
    stripe_slide: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class CorpusParams:
    n_train: int = 20
    n_heldout: int = 4
    n_views: int = 6
    view_res: tuple = (96, 96)
    mesh_n: int = 96
    points_pool: int = 4096
    rays_pool: int = 512
    sigma_near: float = 0.02
    seed: int = 0


@dataclass(frozen=True)
class CaptureParams:
    """Single-frame capture: observation, fusion input, reconstruction."""

    observation_res: tuple = (256, 256)
    pose_error: float = 0.0
    noise_sigma: float = 0.0
    map_resolution: tuple = (256, 256)
    mc_resolution: int = 128
    mc_margin: float = 0.06
    texture_depth: float = 0.02
    texture_samples: int = 16
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    workdir: str = "runs/default"
    subject: SubjectParams = field(default_factory=SubjectParams)
    corpus: CorpusParams = field(default_factory=CorpusParams)
    avatar: av.AvatarConfig = field(default_factory=av.AvatarConfig)
    train: df.TrainConfig = field(default_factory=df.TrainConfig)
    fusion: nf.FusionConfig = field(default_factory=nf.FusionConfig)
    recon: rn.ReconConfig = field(default_factory=rn.ReconConfig)
    capture: CaptureParams = field(default_factory=CaptureParams)
    seed: int = 0


_SECTIONS = {
    "subject": SubjectParams,
    "corpus": CorpusParams,
    "avatar": av.AvatarConfig,
    "train": df.TrainConfig,
    "fusion": nf.FusionConfig,
    "recon": rn.ReconConfig,
    "capture": CaptureParams,
}


def _build_section(cls, raw, context):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)} in {context}")
    coerced = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[key] = value
    return cls(**coerced)


def config_from_dict(raw):
    unknown = set(raw) - set(_SECTIONS) - {"workdir", "seed"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    kwargs = {}
    if "workdir" in raw:
        kwargs["workdir"] = str(raw["workdir"])
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], f"section {name!r}")
    return PipelineConfig(**kwargs)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path):
    """Parse a JSON pipeline config; workdir resolves against the file."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config root must be a JSON object")
    cfg = config_from_dict(raw)
    if not os.path.isabs(cfg.workdir):
        base = os.path.dirname(os.path.abspath(path))
        cfg = dataclasses.replace(cfg, workdir=os.path.join(base, cfg.workdir))
    return cfg


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def with_seed(cfg, seed):
    """Override every per-stage seed from one global seed."""
    if seed is None:
        return cfg
    seed = int(seed)
    return dataclasses.replace(
        cfg,
        seed=seed,
        subject=dataclasses.replace(cfg.subject, seed=seed),
        corpus=dataclasses.replace(cfg.corpus, seed=seed + 1),
        avatar=dataclasses.replace(cfg.avatar, seed=seed + 2),
        train=dataclasses.replace(cfg.train, seed=seed + 3),
        recon=dataclasses.replace(cfg.recon, seed=seed + 4),
        capture=dataclasses.replace(cfg.capture, seed=seed + 5),
    )


# ---------------------------------------------------------------------------
# workdir layout


@dataclass(frozen=True)
class RunPaths:
    """Canonical artifact locations under one run's workdir."""

    workdir: str

    @property
    def corpus_json(self):
        return os.path.join(self.workdir, "corpus.json")

    @property
    def avatar_ckpt(self):
        return os.path.join(self.workdir, "avatar.tnsr")

    @property
    def recon_ckpt(self):
        return os.path.join(self.workdir, "recon.tnsr")

    def frame_dir(self, name):
        return os.path.join(self.workdir, "frames", str(name))

    @property
    def mesh_dir(self):
        return os.path.join(self.workdir, "meshes")

    @property
    def fusion_trace_csv(self):
        return os.path.join(self.workdir, "fusion_trace.csv")

    @property
    def metrics_csv(self):
        return os.path.join(self.workdir, "metrics.csv")

    @property
    def intermediates_dir(self):
        return os.path.join(self.workdir, "intermediates")


def run_paths(cfg):
    return RunPaths(workdir=cfg.workdir)


# ---------------------------------------------------------------------------
# object construction from configured parameters


def make_subject(params):
    body = bm.default_body(mesh_n=params.mesh_n,
                           weight_falloff=params.weight_falloff)
    return sc.SyntheticSubject(
        body=body,
        wrinkle_amp_base=params.wrinkle_amp_base,
        wrinkle_amp_slope=params.wrinkle_amp_slope,
        wrinkle_wavelength=params.wrinkle_wavelength,
        stripe_period=params.stripe_period,
        stripe_slide=params.stripe_slide,
        seed=params.seed,
    )


def make_corpus(subject, params):
    return sc.build_corpus(
        subject,
        n_train=params.n_train,
        n_heldout=params.n_heldout,
        n_views=params.n_views,
        view_res=tuple(params.view_res),
        mesh_n=params.mesh_n,
        points_pool=params.points_pool,
        rays_pool=params.rays_pool,
        sigma_near=params.sigma_near,
        seed=params.seed,
    )

"""Losses and training loops.

Entry points: :func:`train_base`, :func:`train_incremental` (the residual
controller), :func:`train_baseline` (joint / initial-only / finetune /
finetune + KD / EWC) and :func:`distill_student`.

An epoch is one pass over all training rays in batches of
``batch_rays``.  Epochs 0 and 1 use the plain squared RGB error; later
epochs switch to the beta-weighted form.  Every loop is deterministic for
a fixed seed.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .controller import CompositeField
from .errors import ConfigError, ContractError, InvariantError
from .field import FieldArch, FieldParams
from .gating import GateConfig, base_view_of, gated_render
from .render import RayBatch, camera_rays, render_rays, sample_along, view_rays

VARIANTS = ("joint", "initial_only", "finetune", "finetune_kd", "ewc")
LOG_COLUMNS = ("step", "epoch", "rgb_loss", "kd_loss", "total", "wall_ms")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_rays: int = 192
    n_samples: int = 24
    lr: float = 2e-3
    lr_final_frac: float = 0.1
    lambda_kd: float = 10.0
    kd_rays: int = 64  # pose-pool rays per KD step
    lambda_ewc: float = 100.0
    fisher_rays: int = 256
    weighted_from_epoch: int = 2
    seed: int = 0

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    rgb_term: float
    kd_term: float
    total: float
    weighted: bool


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    wall_s: float = 0.0

    def add(self, step, epoch, parts, wall_ms):
        self.rows.append((step, epoch, parts.rgb_term, parts.kd_term, parts.total, wall_ms))

    def epochs_weighted(self, first_weighted):
        return sorted({r[1] >= first_weighted for r in self.rows})

    def final_loss(self):
        return self.rows[-1][4] if self.rows else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), f"{r[5]:.3f}"])


# ---------------------------------------------------------------- losses


def rgb_loss(c_hat, c_gt, beta_r, epoch, weighted_from_epoch=2):
    """Mean over rays of ||c - c_gt||^2, or of ||c - c_gt||^2 / (2 beta^2) + log beta
    once ``epoch >= weighted_from_epoch``."""
    err = ad.square(c_hat - c_gt).sum(axis=1)
    if epoch < weighted_from_epoch:
        return err.mean()
    if np.any(beta_r.data <= 0):
        raise ContractError("beta must be positive in the weighted loss phase")
    return (err / (2.0 * ad.square(beta_r)) + ad.log(beta_r)).mean()


def kd_anchor_loss(c_hat, c_base):
    return ad.square(c_hat - c_base).sum(axis=1).mean()


@dataclass
class EwcState:
    anchor: dict  # name -> array
    fisher: dict  # name -> array, >= 0
    strength: float = 100.0


def ewc_penalty(params, state):
    """strength/2 * sum_i F_i (theta_i - anchor_i)^2 over the anchored names."""
    total = Tensor(0.0)
    for name, a in state.anchor.items():
        diff = params[name] - a
        total = total + (ad.square(diff) * state.fisher[name]).sum()
    return total * (0.5 * state.strength)


def estimate_fisher(model, rays, n_rays, n_samples=32, seed=0, names=None):
    """Diagonal empirical Fisher: mean over sampled rays of (dL_RGB/dtheta)^2.

    Uses its own RNG so it never perturbs a training stream.
    """
    names = sorted(model.params) if names is None else names
    rng = np.random.default_rng([seed, 29])
    pick = rng.choice(len(rays), size=min(n_rays, len(rays)), replace=False)
    was = {k: model.params[k].requires_grad for k in names}
    for k in names:
        model.params[k].requires_grad = True
    fisher = {k: np.zeros_like(model.params[k].data) for k in names}
    tensors = [model.params[k] for k in names]
    for i in pick:
        ray = rays[np.array([i])]
        res = render_rays(model, ray, n_samples)
        grads = ad.grads_of(rgb_loss(res.color, ray.rgb, None, 0), tensors)
        for k, g in zip(names, grads):
            fisher[k] += g * g
    for k in names:
        fisher[k] /= len(pick)
        model.params[k].requires_grad = was[k]
    return fisher


# ---------------------------------------------------------------- loop


def rays_of(views, frame):
    return RayBatch.cat(view_rays(v, frame) for v in views)


@dataclass(frozen=True)
class Pose:
    """Where an earlier view was taken from: camera, sun and embedding row, no pixels."""

    camera: object
    sun_dir: np.ndarray
    j: int


def poses_of(views):
    return [Pose(v.camera, v.sun_dir, v.index) for v in views]


def pose_rays(poses, frame):
    return RayBatch.cat(camera_rays(p.camera, frame, p.sun_dir, p.j) for p in poses)


@dataclass
class KdPool:
    """Rays from earlier poses with the frozen anchor's colours, computed once
    at bin midpoints."""

    rays: RayBatch
    color: np.ndarray

    @classmethod
    def build(cls, anchor, poses, frame, n_samples):
        rays = pose_rays(poses, frame)
        with ad.batch_invariant():
            color = render_rays(anchor, rays, n_samples, samples=sample_along(rays.near, rays.far, n_samples)).color.data
        return cls(rays, color)


def _kd_term(model, anchor, batch, samples, color, pool, rng, cfg):
    """KD against the frozen anchor: on the current batch, or on a random
    draw from ``pool`` when one is given."""
    if pool is None:
        return kd_anchor_loss(color, render_rays(anchor, batch, cfg.n_samples, samples=samples).color.data)
    idx = rng.integers(0, len(pool.rays), cfg.kd_rays)
    kb = pool.rays[idx]
    c_model = render_rays(model, kb, cfg.n_samples, samples=sample_along(kb.near, kb.far, cfg.n_samples)).color
    return kd_anchor_loss(c_model, pool.color[idx])


def _fit(tensors, masks, rays, cfg, loss_fn, on_step=None):
    """Shared Adam loop.  ``loss_fn(batch, rng, epoch) -> (rgb, kd, extra)``
    with Tensors (kd/extra may be None)."""
    opt = ad.Adam(tensors, lr=cfg.lr, masks=masks)
    rng = np.random.default_rng([cfg.seed, 101])
    per_epoch = max(1, math.ceil(len(rays) / cfg.batch_rays))
    log = TrainLog()
    t0 = time.perf_counter()
    order = None
    for step in range(cfg.steps):
        epoch, k = divmod(step, per_epoch)
        if k == 0:
            order = rng.permutation(len(rays))
        batch = rays[order[k * cfg.batch_rays : (k + 1) * cfg.batch_rays]]
        rgb, kd, extra = loss_fn(batch, rng, epoch)
        total = rgb
        if kd is not None:
            total = total + cfg.lambda_kd * kd
        if extra is not None:
            total = total + extra
        ad.backward(total)
        opt.step(ad.cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final_frac))
        parts = LossBreakdown(rgb.item(), 0.0 if kd is None else kd.item(), total.item(),
                              epoch >= cfg.weighted_from_epoch)
        log.add(step, epoch, parts, 1000.0 * (time.perf_counter() - t0))
        if on_step is not None:
            on_step(step, parts)
    log.wall_s = time.perf_counter() - t0
    return log


def _field_loss(model, cfg, anchor=None, ewc=None, pool=None):
    def loss_fn(batch, rng, epoch):
        samples = sample_along(batch.near, batch.far, cfg.n_samples, rng)
        res = render_rays(model, batch, cfg.n_samples, samples=samples)
        rgb = rgb_loss(res.color, batch.rgb, res.beta, epoch, cfg.weighted_from_epoch)
        kd = None
        if anchor is not None:
            kd = _kd_term(model, anchor, batch, samples, res.color, pool, rng, cfg)
        extra = None if ewc is None else ewc_penalty(model.params, ewc)
        return rgb, kd, extra

    return loss_fn


def _table_size(views):
    return max(v.index for v in views) + 1


def train_base(views, frame, cfg, arch=FieldArch(), n_images=None):
    """Train a field from scratch on ``views``; returns (FieldParams, TrainLog)."""
    if not views:
        raise ContractError("need at least one training view")
    model = FieldParams.init(arch, n_images or _table_size(views), seed=cfg.seed).trainable()
    log = _fit(model.tensors(), model.masks(), rays_of(views, frame), cfg, _field_loss(model, cfg))
    return model.trainable(False), log


def train_incremental(base, views, frame, cfg, anchor_poses=None):
    """Train a zero-initialized controller (and new embedding rows) on ``views``.

    The base stays frozen; its parameter hash is checked afterwards.
    ``anchor_poses`` (see :func:`poses_of`) moves the KD term onto rays
    from those poses.
    """
    before = base.hash()
    n_new = max(0, _table_size(views) - base.n_embed)
    comp = CompositeField.from_base(base, n_new, seed=cfg.seed).trainable()
    anchor = base_view_of(comp)
    pool = None if anchor_poses is None else KdPool.build(anchor, anchor_poses, frame, cfg.n_samples)

    def loss_fn(batch, rng, epoch):
        samples = sample_along(batch.near, batch.far, cfg.n_samples, rng)
        res = render_rays(comp, batch, cfg.n_samples, samples=samples)
        rgb = rgb_loss(res.color, batch.rgb, res.beta, epoch, cfg.weighted_from_epoch)
        if cfg.lambda_kd == 0:
            return rgb, None, None
        return rgb, _kd_term(comp, anchor, batch, samples, res.color, pool, rng, cfg), None

    log = _fit(comp.tensors(), comp.masks(), rays_of(views, frame), cfg, loss_fn)
    comp.trainable(False)
    if base.hash() != before:
        raise InvariantError("frozen base parameters changed during incremental training")
    return comp, log


def finetune(base, views, frame, cfg, kd=False, ewc=None, anchor_poses=None):
    """Continue training every base parameter on ``views`` only."""
    n_new = max(0, _table_size(views) - base.n_embed)
    model = (base.extend_embeddings(n_new, seed=cfg.seed) if n_new else base.copy()).trainable()
    anchor = None
    if kd:
        anchor = FieldParams(base.arch, {**base.params, "embed": Tensor(model.params["embed"].data.copy())}, model.j_old)
    pool = None if anchor_poses is None or not kd else KdPool.build(anchor, anchor_poses, frame, cfg.n_samples)
    log = _fit(model.tensors(), model.masks(), rays_of(views, frame), cfg, _field_loss(model, cfg, anchor, ewc, pool))
    return model.trainable(False), log


def make_ewc_state(base, views, frame, cfg):
    names = [k for k in sorted(base.params) if k != "embed"]
    fisher = estimate_fisher(base, rays_of(views, frame), cfg.fisher_rays, cfg.n_samples, cfg.seed, names)
    return EwcState({k: base.params[k].data.copy() for k in names}, fisher, cfg.lambda_ewc)


def train_baseline(variant, split, frame, base_cfg, inc_cfg, base=None, arch=FieldArch(), kd_anchor="poses"):
    """Run one baseline variant; returns (FieldParams, TrainLog or None)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown baseline variant {variant!r}; choose from {VARIANTS}")
    if variant == "joint":
        views = split.initial + split.incremental
        return train_base(views, frame, base_cfg.replace(steps=base_cfg.steps + inc_cfg.steps), arch)
    if base is None:
        base, _ = train_base(split.initial, frame, base_cfg, arch)
    if variant == "initial_only":
        return base, None
    if variant == "finetune":
        return finetune(base, split.incremental, frame, inc_cfg)
    if variant == "finetune_kd":
        poses = poses_of(split.initial) if kd_anchor == "poses" else None
        return finetune(base, split.incremental, frame, inc_cfg, kd=True, anchor_poses=poses)
    state = make_ewc_state(base, split.initial, frame, inc_cfg)
    return finetune(base, split.incremental, frame, inc_cfg, ewc=state)


# ---------------------------------------------------------------- distillation

STUDENT_ARCH = FieldArch(width=56, depth=5, skip_layer=4, head_hidden=24, levels_x=6, levels_d=2, embed_dim=4)


def teacher_targets(composite, views, frame, gate_config=GateConfig(), n_samples=32):
    """Per-ray colour and depth (normalized units) of the gated composite."""
    colors, depths = [], []
    for v in views:
        out = gated_render(composite, v, frame, gate_config, n_samples=n_samples)
        colors.append(out["rgb"].reshape(-1, 3))
        depths.append(out["depth"].reshape(-1) / frame.scale)
    return np.concatenate(colors), np.concatenate(depths)


def distill_student(composite, gate_config, views, frame, cfg, student_arch=STUDENT_ARCH,
                    depth_weight=1.0, budget=0.20):
    """Fit a compact field to the composite teacher's colour and depth on ``views``.

    Only the teacher's outputs are used as targets.  Returns (student, log).
    """
    n_table = composite.embed.shape[0]
    student = FieldParams.init(student_arch, n_table, seed=cfg.seed)
    ratio = student.param_count() / composite.param_count()
    if ratio > budget:
        raise ConfigError(f"student has {student.param_count()} parameters, "
                          f"{ratio:.1%} of the composite (budget {budget:.0%})")
    student.trainable()
    rays = rays_of(views, frame)
    rays.rgb, rays.depth = teacher_targets(composite, views, frame, gate_config, cfg.n_samples)

    def loss_fn(batch, rng, epoch):
        res = render_rays(student, batch, cfg.n_samples, rng)
        rgb = kd_anchor_loss(res.color, batch.rgb)
        return rgb, None, depth_weight * ad.square(res.depth - batch.depth).mean()

    log = _fit(student.tensors(), student.masks(), rays, cfg, loss_fn)
    return student.trainable(False), log

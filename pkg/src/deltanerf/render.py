"""Ray generation, sampling and discrete volume compositing.

Discretization of the rendering integral with bins of width delta_i:

    alpha_i = 1 - exp(-sigma_i delta_i)
    T_i     = prod_{k<i} (1 - alpha_k) = exp(-sum_{k<i} sigma_k delta_k)
    w_i     = T_i alpha_i
    color   = sum_i w_i c_i
    depth   = sum_i w_i t_i / max(sum_i w_i, eps)
    beta(r) = sum_i w_i beta_i
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .field import Query, compose_appearance

DEPTH_EPS = 1e-8


@dataclass
class RayBatch:
    o: np.ndarray  # (R, 3) normalized origin
    d: np.ndarray  # (R, 3) unit direction
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    j: np.ndarray  # (R,) image index
    u: np.ndarray  # (R, 3) sun direction of the source view
    rgb: np.ndarray | None = None  # (R, 3) ground truth, when known
    pixel: np.ndarray | None = None  # (R, 2) (row, col)
    depth: np.ndarray | None = None  # (R,) target depth, normalized units

    def __len__(self):
        return len(self.o)

    def __getitem__(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return RayBatch(self.o[idx], self.d[idx], self.near[idx], self.far[idx], self.j[idx], self.u[idx],
                        pick(self.rgb), pick(self.pixel), pick(self.depth))

    @staticmethod
    def cat(batches):
        batches = list(batches)
        field = lambda name: None if getattr(batches[0], name) is None else np.concatenate([getattr(b, name) for b in batches])
        return RayBatch(*(field(n) for n in ("o", "d", "near", "far", "j", "u", "rgb", "pixel", "depth")))


def slab_bounds(o, d, z_lo, z_hi):
    """Entry/exit distances of downward rays through the slab z_lo <= z <= z_hi."""
    dz = d[:, 2]
    if np.any(dz >= 0):
        raise ContractError("rays must point downward into the terrain slab")
    near = (o[:, 2] - z_hi) / -dz
    far = (o[:, 2] - z_lo) / -dz
    return np.maximum(near, 0.0), far


def camera_rays(camera, frame, sun_dir, j):
    """All pixel rays of a camera in normalized scene coordinates."""
    dirs = camera.ray_dirs().reshape(-1, 3)
    o = np.broadcast_to(frame.to_norm(camera.origin), dirs.shape).copy()
    near, far = slab_bounds(o, dirs, *frame.z_bounds_norm)
    h, w = camera.height, camera.width
    rows, cols = np.divmod(np.arange(h * w), w)
    return RayBatch(o, dirs, near, far, np.full(h * w, int(j)), np.broadcast_to(sun_dir, dirs.shape).copy(),
                    None, np.stack([rows, cols], axis=1))


def view_rays(view, frame, j=None):
    rays = camera_rays(view.camera, frame, view.sun_dir, view.index if j is None else j)
    rays.rgb = view.rgb.reshape(-1, 3)
    return rays


def sample_along(near, far, n, rng=None):
    """Sample depths t (R, n) and bin widths delta (R, n).

    Bins partition [near, far] evenly.  Without ``rng`` each sample sits at
    its bin midpoint; with ``rng`` it is jittered uniformly inside the bin.
    """
    if n < 2:
        raise ContractError("need at least two samples per ray")
    near, far = np.asarray(near, float), np.asarray(far, float)
    width = (far - near) / n
    offs = np.full((len(near), n), 0.5) if rng is None else rng.uniform(size=(len(near), n))
    t = near[:, None] + (np.arange(n) + offs) * width[:, None]
    return t, np.broadcast_to(width[:, None], t.shape).copy()


def sample_ray(near, far, n, stratified=False, seed=0):
    return sample_along(np.atleast_1d(near), np.atleast_1d(far), n,
                        np.random.default_rng(seed) if stratified else None)


@dataclass
class RenderResult:
    color: Tensor  # (R, 3)
    depth: Tensor  # (R,) along-ray distance, normalized units
    acc: Tensor  # (R,)
    weights: Tensor  # (R, N)
    transmittance: Tensor  # (R, N)
    alpha: Tensor  # (R, N)
    beta: Tensor | None = None  # (R,)


def composite(sigma, colors, delta, t):
    """Alpha-composite per-sample densities (R, N) and colours (R, N, 3)."""
    sigma = ad.as_tensor(sigma)
    if not np.all(np.isfinite(sigma.data)):
        raise NumericError("non-finite density")
    sd = sigma * np.asarray(delta)
    trans = ad.exp(-ad.cumsum_exclusive(sd))
    alpha = 1.0 - ad.exp(-sd)
    w = trans * alpha
    r, n = w.shape
    color = (w.reshape(r, n, 1) * colors).sum(axis=1)
    # sum of weights can overshoot 1 by an ulp on saturated rays
    acc = ad.clip(w.sum(axis=1), 0.0, 1.0)
    depth = (w * np.asarray(t)).sum(axis=1) / ad.maximum(acc, DEPTH_EPS)
    return RenderResult(color, depth, acc, w, trans, alpha)


def aggregate_beta(weights, beta):
    """beta(r) = sum_i T_i alpha_i beta_i."""
    return (ad.as_tensor(weights) * beta).sum(axis=1)


def render_rays(model, rays, n_samples, rng=None, samples=None):
    """Query ``model`` (anything with ``point_forward(Query)``) along rays and composite.

    ``samples`` = (t, delta) reuses sample positions, e.g. to render two
    models on identical points.
    """
    t, delta = sample_along(rays.near, rays.far, n_samples, rng) if samples is None else samples
    r, n = t.shape
    x = (rays.o[:, None, :] + t[..., None] * rays.d[:, None, :]).reshape(-1, 3)
    q = Query(x, np.repeat(rays.d, n, axis=0), np.repeat(rays.u, n, axis=0), np.repeat(rays.j, n))
    out = model.point_forward(q)
    res = composite(out.density.reshape(r, n), compose_appearance(out).reshape(r, n, 3), delta, t)
    res.beta = aggregate_beta(res.weights, out.beta.reshape(r, n))
    return res


def render_image(model, camera, frame, j, sun_dir, n_samples=32, chunk_size=4096):
    """Render colour, depth (meters), beta and opacity maps for a camera.

    Uses the batch-invariant linear kernel, so the result does not depend
    on ``chunk_size``.
    """
    rays = camera_rays(camera, frame, sun_dir, j)
    parts = []
    with ad.batch_invariant():
        for s in range(0, len(rays), chunk_size):
            res = render_rays(model, rays[s : s + chunk_size], n_samples)
            parts.append((res.color.data, res.depth.data, res.beta.data, res.acc.data))
    h, w = camera.height, camera.width
    color, depth, beta, acc = (np.concatenate(p) for p in zip(*parts))
    return {"rgb": color.reshape(h, w, 3), "depth": depth.reshape(h, w) * frame.scale,
            "beta": beta.reshape(h, w), "acc": acc.reshape(h, w)}


def depth_to_altitude(depth_m, camera):
    """World altitude of the point at ``depth_m`` along each pixel ray."""
    return camera.origin[2] + depth_m * camera.ray_dirs()[..., 2]

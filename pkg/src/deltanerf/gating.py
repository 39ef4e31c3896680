"""Uncertainty-aware fusion of base and controller-corrected colours.

Per ray r:

    s(r)       = 1 / max(beta_base(r), beta_floor)
    g(r)       = sigmoid(lambda * s(r) * (e_base(r) - e_res(r)))
    c_fused(r) = g c_res + (1 - g) c_base

With ``normalize`` (the default) s is also multiplied by the image's mean
beta, so lambda does not depend on beta's scale.

e_* are squared RGB errors against ground truth, so the formula is only
usable where ground truth exists ("evaluation" mode).  "deployment" mode
replaces g by the constant ``fallback_gate``.  Depth is never gated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .field import FieldParams
from .render import render_image


@dataclass(frozen=True)
class GateConfig:
    lam: float = 1000.0
    mode: str = "evaluation"
    fallback_gate: float = 0.75
    beta_floor: float = 1e-6
    # scale s by the image's mean beta so lam does not depend on beta's units
    normalize: bool = True

    def __post_init__(self):
        if self.lam <= 0:
            raise ContractError("lambda must be positive")
        if not 0.0 <= self.fallback_gate <= 1.0:
            raise ContractError("fallback gate must lie in [0, 1]")
        if self.mode not in ("evaluation", "deployment"):
            raise ContractError(f"unknown gate mode {self.mode!r}")


def confidence(beta_r, floor=1e-6):
    return 1.0 / np.maximum(beta_r, floor)


def gate(e_base, e_res, s, lam):
    x = lam * np.asarray(s) * (np.asarray(e_base) - np.asarray(e_res))
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite gate argument")
    return np.exp(-np.logaddexp(0.0, -x))


def fuse(c_base, c_res, g):
    g = np.asarray(g)
    if g.ndim == np.ndim(c_base) - 1:
        g = g[..., None]
    return g * c_res + (1.0 - g) * c_base


def base_view_of(composite):
    """The frozen base reading the composite's extended embedding table."""
    b = composite.base
    return FieldParams(b.arch, {**b.params, "embed": composite.embed}, composite.j_old)


def gate_map(base_out, res_out, gt, config):
    if config.mode == "deployment":
        return np.full(base_out["rgb"].shape[:-1], config.fallback_gate)
    e_base = np.sum((base_out["rgb"] - gt) ** 2, axis=-1)
    e_res = np.sum((res_out["rgb"] - gt) ** 2, axis=-1)
    s = confidence(base_out["beta"], config.beta_floor)
    if config.normalize:
        s = s * max(float(np.mean(base_out["beta"])), config.beta_floor)
    return gate(e_base, e_res, s, config.lam)


def gated_render(composite, view, frame, config=GateConfig(), j=None, n_samples=32, gt=None):
    """Fused colour plus per-ray gate for one view.

    ``gt`` defaults to the view's own image.  Depth, beta and opacity come
    from the composite branch unchanged.
    """
    if config.mode == "evaluation":
        gt = view.rgb if gt is None else gt
        if gt is None:
            raise ContractError("evaluation-mode gating needs the ground-truth image")
    j = view.index if j is None else j
    res = render_image(composite, view.camera, frame, j, view.sun_dir, n_samples)
    base = render_image(base_view_of(composite), view.camera, frame, j, view.sun_dir, n_samples)
    g = gate_map(base, res, gt, config)
    return {"rgb": fuse(base["rgb"], res["rgb"], g), "gate": g, "depth": res["depth"], "acc": res["acc"],
            "beta": res["beta"], "rgb_base": base["rgb"], "rgb_res": res["rgb"]}

"""Zero-initialized residual controller over a frozen base field.

Trunk.  The controller runs its own stream next to the base trunk,

    zc_0 = enc(x),   zc_i = relu(H_i zc_{i-1}),   dz_i = Z_i zc_i,

and the base consumes the residuals before its activation,

    z_i = relu(phi_i(z_{i-1}) + dz_i),   z_tilde = z_8.

Heads (rgb, sun visibility, sky only).  With base head layers f_k and a
controller stream hc_1 = G_1(in), hc_k = G_k(relu(hc_{k-1})),

    h_1 = f_1(in) + P_1 hc_1
    h_k = f_k(relu(h_{k-1})) + P_k hc_k
    y   = act(h_N).

H_i and G_k mirror the base layer shapes and start random; every
projection Z_i, P_k starts at exactly zero, so at construction the
composite reproduces the base bit for bit while all controller weights
still receive gradient.  Density and beta never get a head residual; they
only see the corrected trunk feature z_tilde.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import Tensor
from .errors import ContractError
from .field import FieldArch, PointOutput, head_activation, head_inputs, mlp, positional_encode, trunk_forward

RESIDUAL_HEADS = ("rgb", "sunvis", "sky")


class ControllerParams:
    def __init__(self, arch, params, base_hash):
        self.arch = arch
        self.params = params
        self.base_hash = base_hash

    @classmethod
    def init_zero(cls, base, seed=0):
        """Random hidden layers, zero output projections."""
        a = base.arch
        rng = np.random.default_rng([seed, 17])
        p = {}
        for i in range(1, a.depth + 1):
            n_in = a.trunk_in(i)
            p[f"ctrl.trunk.{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(a.width, n_in))
            p[f"ctrl.trunk.{i}.b"] = np.zeros(a.width)
            p[f"ctrl.trunk.{i}.zero.W"] = np.zeros((a.width, a.width))
            p[f"ctrl.trunk.{i}.zero.b"] = np.zeros(a.width)
        for h in RESIDUAL_HEADS:
            dims = a.head_dims(h)
            for k in range(1, len(dims)):
                p[f"ctrl.head.{h}.{k}.W"] = rng.normal(0.0, np.sqrt(2.0 / dims[k - 1]), size=(dims[k], dims[k - 1]))
                p[f"ctrl.head.{h}.{k}.b"] = np.zeros(dims[k])
                p[f"ctrl.head.{h}.{k}.zero.W"] = np.zeros((dims[k], dims[k]))
                p[f"ctrl.head.{h}.{k}.zero.b"] = np.zeros(dims[k])
        return cls(a, {k: Tensor(v, name=k) for k, v in p.items()}, base.hash())

    def layer(self, prefix):
        return self.params[prefix + ".W"], self.params[prefix + ".b"]

    def param_count(self):
        return int(sum(v.data.size for v in self.params.values()))

    def copy(self):
        return ControllerParams(self.arch, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()},
                                self.base_hash)


def trunk_residual_forward(base, ctrl, enc_x, return_layers=False):
    if ctrl.arch != base.arch:
        raise ContractError("controller architecture does not mirror the base trunk")
    a = base.arch
    zc, residuals = enc_x, []
    for i in range(1, a.depth + 1):
        inp = ad.concat([zc, enc_x], axis=-1) if i == a.skip_layer else zc
        zc = ad.relu(ad.linear(inp, *ctrl.layer(f"ctrl.trunk.{i}")))
        residuals.append(ad.linear(zc, *ctrl.layer(f"ctrl.trunk.{i}.zero")))
    if return_layers:
        return _trunk_layers(base, enc_x, residuals)
    return trunk_forward(base, enc_x, residuals)


def _trunk_layers(base, enc_x, residuals):
    a = base.arch
    z, layers = enc_x, []
    for i in range(1, a.depth + 1):
        inp = ad.concat([z, enc_x], axis=-1) if i == a.skip_layer else z
        z = ad.relu(ad.linear(inp, *base.layer(f"trunk.{i}")) + residuals[i - 1])
        layers.append(z)
    return layers


def head_residual_forward(base, ctrl, head, inp):
    """Residual-modulated head evaluation on the head input ``inp``."""
    if head not in RESIDUAL_HEADS:
        raise ContractError(f"head {head!r} has no residual path; route it through the base head")
    n = base.arch.head_layers
    hc = ad.linear(inp, *ctrl.layer(f"ctrl.head.{head}.1"))
    h = ad.linear(inp, *base.layer(f"head.{head}.1")) + ad.linear(hc, *ctrl.layer(f"ctrl.head.{head}.1.zero"))
    for k in range(2, n + 1):
        hc = ad.linear(ad.relu(hc), *ctrl.layer(f"ctrl.head.{head}.{k}"))
        h = ad.linear(ad.relu(h), *base.layer(f"head.{head}.{k}")) + ad.linear(hc, *ctrl.layer(f"ctrl.head.{head}.{k}.zero"))
    return head_activation(head, h, base.arch.beta_min)


class CompositeField:
    """Frozen base + trainable controller + extended embedding table."""

    def __init__(self, base, ctrl, embed, j_old):
        if ctrl.base_hash != base.hash():
            raise ContractError("controller was built for a different base checkpoint")
        self.base = base
        self.ctrl = ctrl
        self.embed = embed
        self.j_old = int(j_old)

    @classmethod
    def from_base(cls, base, n_new, seed=0):
        ext = base.extend_embeddings(n_new, seed=seed) if n_new > 0 else base.copy()
        return cls(base, ControllerParams.init_zero(base, seed), ext.params["embed"], base.n_embed)

    def embedding(self, j):
        j = np.asarray(j, dtype=int)
        if j.size and (j.min() < 0 or j.max() >= self.embed.shape[0]):
            raise IndexError(f"no embedding row for image index {int(j.max())}")
        return self.embed[j]

    def point_forward(self, q):
        a = self.base.arch
        enc_x = Tensor(positional_encode(q.x, a.levels_x))
        enc_d = Tensor(positional_encode(q.d, a.levels_d))
        u, t = Tensor(q.u), self.embedding(q.j)
        z = trunk_residual_forward(self.base, self.ctrl, enc_x)
        outs = {}
        for h in ("density", "beta"):
            outs[h] = head_activation(h, mlp(head_inputs(h, z, enc_d, u, t), self.base.head_layers(h)), a.beta_min)
        for h in RESIDUAL_HEADS:
            outs[h] = head_residual_forward(self.base, self.ctrl, h, head_inputs(h, z, enc_d, u, t))
        return PointOutput(outs["density"], outs["rgb"], outs["beta"], outs["sunvis"], outs["sky"])

    # training plumbing ----------------------------------------------------

    def tensors(self):
        return [self.ctrl.params[k] for k in sorted(self.ctrl.params)] + [self.embed]

    def masks(self):
        m = np.ones_like(self.embed.data)
        m[: self.j_old] = 0.0
        return [None] * len(self.ctrl.params) + [m]

    def trainable(self, flag=True):
        for t in self.tensors():
            t.requires_grad = flag
        self.base.trainable(False)
        return self

    def param_count(self):
        return self.base.param_count() + self.ctrl.param_count() + (self.embed.shape[0] - self.j_old) * self.embed.shape[1]

    def save(self, path):
        arrays = {k: v.data for k, v in self.ctrl.params.items()}
        arrays["embed"] = self.embed.data
        io.save_checkpoint(path, "controller", self.base.arch.to_dict(), arrays,
                           {"j_old": self.j_old, "base_hash": self.ctrl.base_hash})

    @classmethod
    def load(cls, path, base):
        kind, arch, arrays, meta = io.load_checkpoint(path)
        if kind != "controller":
            raise ContractError(f"{path}: expected a controller checkpoint, found {kind!r}")
        if meta["base_hash"] != base.hash() or FieldArch.from_dict(arch) != base.arch:
            raise ContractError("controller checkpoint does not match this base checkpoint")
        embed = Tensor(arrays.pop("embed"), name="embed")
        ctrl = ControllerParams(base.arch, {k: Tensor(v, name=k) for k, v in arrays.items()}, meta["base_hash"])
        return cls(base, ctrl, embed, meta["j_old"])


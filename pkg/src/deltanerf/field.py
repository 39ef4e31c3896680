"""The base radiance field: positional encoding, shared trunk, output heads
and the per-image embedding table.

Head routing:

    density   <- z                      softplus
    rgb       <- [z, enc(d)]            sigmoid
    beta      <- [z, t_j]               beta_min + softplus
    sun_vis   <- [z, u]                 sigmoid
    sky       <- [u]                    sigmoid

``z`` is the trunk output, ``d`` the view direction, ``u`` the sun
direction and ``t_j`` the embedding row of the source image.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import Tensor
from .errors import ConfigError, ContractError

HEADS = ("density", "rgb", "beta", "sunvis", "sky")
HEAD_OUT = {"density": 1, "rgb": 3, "beta": 1, "sunvis": 1, "sky": 3}


@dataclass(frozen=True)
class FieldArch:
    width: int = 64
    depth: int = 8
    skip_layer: int | None = 5  # this layer also receives the encoded input
    head_hidden: int = 32
    head_layers: int = 2
    levels_x: int = 6
    levels_d: int = 2
    embed_dim: int = 4
    beta_min: float = 0.05
    beta_init: float = 0.1  # beta at z = 0

    def __post_init__(self):
        if min(self.width, self.depth, self.head_hidden, self.head_layers, self.levels_x, self.levels_d,
               self.embed_dim) < 1:
            raise ConfigError(f"architecture sizes must be positive: {self}")
        if self.skip_layer is not None and not 2 <= self.skip_layer <= self.depth:
            raise ConfigError(f"skip_layer must lie in 2..{self.depth} or be None")
        if not self.beta_init > self.beta_min:
            raise ConfigError("beta_init must exceed beta_min")

    @property
    def enc_x_dim(self):
        return 3 + 6 * self.levels_x

    @property
    def enc_d_dim(self):
        return 3 + 6 * self.levels_d

    def trunk_in(self, i):
        """Input width of trunk layer i (1-based)."""
        if i == 1:
            return self.enc_x_dim
        return self.width + (self.enc_x_dim if i == self.skip_layer else 0)

    def head_in(self, head):
        return {"density": self.width, "rgb": self.width + self.enc_d_dim,
                "beta": self.width + self.embed_dim, "sunvis": self.width + 3, "sky": 3}[head]

    def head_dims(self, head):
        """Layer widths [in, hidden..., out] of a head."""
        return [self.head_in(head)] + [self.head_hidden] * (self.head_layers - 1) + [HEAD_OUT[head]]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def positional_encode(x, levels):
    """[x, sin(2^k pi x), cos(2^k pi x)] for k = 0..levels-1; width 3 + 6*levels."""
    if levels < 1:
        raise ContractError("levels must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    feats = [x]
    for k in range(levels):
        w = (2.0**k) * np.pi
        feats.append(np.sin(w * x))
        feats.append(np.cos(w * x))
    return np.concatenate(feats, axis=-1)


@dataclass
class Query:
    """A batch of field queries, one row per sample point."""

    x: np.ndarray  # (P, 3) normalized position
    d: np.ndarray  # (P, 3) unit view direction
    u: np.ndarray  # (P, 3) unit sun direction
    j: np.ndarray  # (P,) image index

    def __len__(self):
        return len(self.x)


@dataclass
class PointOutput:
    density: Tensor  # (P, 1)
    rgb: Tensor  # (P, 3)
    beta: Tensor  # (P, 1)
    sun_vis: Tensor  # (P, 1)
    sky: Tensor  # (P, 3)


def compose_appearance(out):
    """c * (sun_vis + (1 - sun_vis) * sky), clamped to [0, 1]."""
    light = out.sun_vis + (1.0 - out.sun_vis) * out.sky
    return ad.clip(out.rgb * light, 0.0, 1.0)


def _glorot_layer(rng, n_in, n_out):
    return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)), np.zeros(n_out)


def mlp(x, layers, act=ad.relu):
    """Apply linear layers [(W, b), ...] with ``act`` between them (not after the last)."""
    for k, (W, b) in enumerate(layers):
        if k:
            x = act(x)
        x = ad.linear(x, W, b)
    return x


class FieldParams:
    """Weights of a field network plus its embedding table.

    ``params`` maps names to leaf Tensors.  Embedding rows below ``j_old``
    are frozen: the optimizer mask blocks their updates even though their
    gradients are still computed.
    """

    def __init__(self, arch, params, j_old=0):
        self.arch = arch
        self.params = params
        self.j_old = int(j_old)

    # construction ---------------------------------------------------------

    @classmethod
    def init(cls, arch=FieldArch(), n_images=1, seed=0):
        rng = np.random.default_rng(seed)
        p = {}
        for i in range(1, arch.depth + 1):
            W, b = _glorot_layer(rng, arch.trunk_in(i), arch.width)
            p[f"trunk.{i}.W"], p[f"trunk.{i}.b"] = W, b
        for h in HEADS:
            dims = arch.head_dims(h)
            for k in range(len(dims) - 1):
                W, b = _glorot_layer(rng, dims[k], dims[k + 1])
                p[f"head.{h}.{k + 1}.W"], p[f"head.{h}.{k + 1}.b"] = W, b
        p[f"head.beta.{arch.head_layers}.b"][:] = np.log(np.expm1(arch.beta_init - arch.beta_min))
        p["embed"] = rng.normal(0.0, 0.1, size=(n_images, arch.embed_dim))
        return cls(arch, {k: Tensor(v, name=k) for k, v in p.items()})

    def copy(self):
        return FieldParams(self.arch, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}, self.j_old)

    def arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def param_count(self):
        return int(sum(v.data.size for v in self.params.values()))

    def hash(self):
        return io.params_hash(self.arrays())

    @property
    def n_embed(self):
        return self.params["embed"].shape[0]

    def trainable(self, flag=True):
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def tensors(self):
        return [self.params[k] for k in sorted(self.params)]

    def masks(self):
        """Optimizer masks aligned with :meth:`tensors`."""
        out = []
        for k in sorted(self.params):
            if k == "embed" and self.j_old > 0:
                m = np.ones_like(self.params[k].data)
                m[: self.j_old] = 0.0
                out.append(m)
            else:
                out.append(None)
        return out

    # embeddings -----------------------------------------------------------

    def extend_embeddings(self, n_new, seed=0):
        """Copy with ``n_new`` fresh embedding rows; existing rows become frozen."""
        if n_new < 1:
            raise ContractError("n_new must be >= 1")
        out = self.copy()
        rng = np.random.default_rng([seed, 3])
        old = out.params["embed"].data
        fresh = rng.normal(0.0, 0.1, size=(n_new, self.arch.embed_dim))
        out.params["embed"] = Tensor(np.concatenate([old, fresh]), name="embed")
        out.j_old = old.shape[0]
        return out

    # forward --------------------------------------------------------------

    def layer(self, prefix):
        return self.params[prefix + ".W"], self.params[prefix + ".b"]

    def head_layers(self, head):
        return [self.layer(f"head.{head}.{k}") for k in range(1, self.arch.head_layers + 1)]

    def embedding(self, j):
        j = np.asarray(j, dtype=int)
        if j.size and (j.min() < 0 or j.max() >= self.n_embed):
            raise IndexError(f"no embedding row for image index {int(j.max())} (table has {self.n_embed})")
        return self.params["embed"][j]

    def trunk_forward(self, enc_x):
        return trunk_forward(self, enc_x)

    def heads_forward(self, z, enc_d, u, t):
        return heads_forward(self, z, enc_d, u, t)

    def point_forward(self, q):
        a = self.arch
        z = trunk_forward(self, Tensor(positional_encode(q.x, a.levels_x)))
        return heads_forward(self, z, Tensor(positional_encode(q.d, a.levels_d)), Tensor(q.u), self.embedding(q.j))

    # persistence ----------------------------------------------------------

    def save(self, path, kind="field", meta=None):
        io.save_checkpoint(path, kind, self.arch.to_dict(), self.arrays(), {"j_old": self.j_old, **(meta or {})})

    @classmethod
    def load(cls, path):
        kind, arch, params, meta = io.load_checkpoint(path)
        if kind not in ("field", "student"):
            raise ConfigError(f"{path}: expected a field checkpoint, found {kind!r}")
        return cls(FieldArch.from_dict(arch), {k: Tensor(v, name=k) for k, v in params.items()}, meta.get("j_old", 0))


def trunk_forward(fp, enc_x, residuals=None):
    """z = sigma_8(phi_8(... sigma_1(phi_1(x)) ...)).

    ``residuals`` (optional) is a list of per-layer pre-activation
    additions, used by the residual controller.
    """
    a = fp.arch
    if enc_x.shape[-1] != a.trunk_in(1):
        raise ContractError(f"encoded input width {enc_x.shape[-1]} != {a.trunk_in(1)}")
    z = enc_x
    for i in range(1, a.depth + 1):
        inp = ad.concat([z, enc_x], axis=-1) if i == a.skip_layer else z
        pre = ad.linear(inp, *fp.layer(f"trunk.{i}"))
        if residuals is not None:
            pre = pre + residuals[i - 1]
        z = ad.relu(pre)
    return z


def head_inputs(head, z, enc_d, u, t):
    return {"density": lambda: z, "rgb": lambda: ad.concat([z, enc_d], -1), "beta": lambda: ad.concat([z, t], -1),
            "sunvis": lambda: ad.concat([z, u], -1), "sky": lambda: u}[head]()


def head_activation(head, h, beta_min):
    if head == "density":
        return ad.softplus(h)
    if head == "beta":
        return ad.softplus(h) + beta_min
    return ad.sigmoid(h)


def heads_forward(fp, z, enc_d, u, t):
    outs = {}
    for h in HEADS:
        raw = mlp(head_inputs(h, z, enc_d, u, t), fp.head_layers(h))
        outs[h] = head_activation(h, raw, fp.arch.beta_min)
    return PointOutput(outs["density"], outs["rgb"], outs["beta"], outs["sunvis"], outs["sky"])

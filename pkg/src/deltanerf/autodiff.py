"""Small reverse-mode autodiff over float64 numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  The tape is
dynamic: it is built while the forward pass runs and walked in reverse
topological order by :func:`backward`.  Tensors that do not (transitively)
require gradients carry no closure, so inference builds no graph at all.

Only what the field networks need is here: linear layers, a handful of
activations, reductions, concatenation, indexing and an exclusive cumsum
for transmittance.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_BATCH_INVARIANT = False


@contextlib.contextmanager
def batch_invariant():
    """Evaluate linear layers with a kernel whose per-row result does not
    depend on how many rows are in the batch.

    BLAS gemm changes its accumulation order with the row count, so
    rendering an image in chunks of 1 vs 4096 rays would otherwise differ
    in the last bits.  The einsum kernel is several times slower; use it
    for inference only.
    """
    global _BATCH_INVARIANT
    prev = _BATCH_INVARIANT
    _BATCH_INVARIANT = True
    try:
        yield
    finally:
        _BATCH_INVARIANT = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _prev=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, opname):
    # a sum is non-finite iff some entry is (barring overflow near 1e308)
    if not np.isfinite(np.sum(arr)) and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {opname}")
    return arr


def _make(data, parents, backward_fn, opname):
    _finite(data, opname)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _prev=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise
# Each backward closure maps the output gradient to a tuple with one entry
# per parent (None where the parent does not need it).


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a):
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sin(a):
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def maximum(a, floor):
    """Elementwise max against a constant floor."""
    above = a.data >= floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * above,), "maximum")


# ---------------------------------------------------------------- structural


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, idx):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def cumsum_exclusive(a):
    """Exclusive cumulative sum over the last axis: out[..., i] = sum_{k<i} a[..., k]."""
    out = np.zeros_like(a.data)
    out[..., 1:] = np.cumsum(a.data, axis=-1)[..., :-1]

    def bw(g):
        # d out_i / d a_k = 1 for k < i, so grad_k = sum_{i>k} g_i
        rev = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
        return (rev - g,)

    return _make(out, (a,), bw, "cumsum_exclusive")


def linear(x, W, b):
    """y = x W^T + b for x of shape (batch, in), W (out, in), b (out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    if _BATCH_INVARIANT:
        y = np.einsum("ij,kj->ik", x.data, W.data) + b.data
    else:
        y = x.data @ W.data.T + b.data
    return _make(y, (x, W, b),
                 lambda g: (g @ W.data if x.requires_grad else None,
                            g.T @ x.data if W.requires_grad else None,
                            g.sum(axis=0) if b.requires_grad else None), "linear")


# ---------------------------------------------------------------- backward


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Leaf gradients accumulate across calls; clear them with
    :func:`zero_grad` between optimizer steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accum(g)
            continue
        for p, gp in zip(node._prev, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp


def zero_grad(params):
    for p in params:
        p.grad = None


def grads_of(loss, params):
    """Return d(loss)/d(p) for each p, as fresh arrays (zeros when unused)."""
    params = list(params)
    zero_grad(params)
    backward(loss)
    out = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    zero_grad(params)
    return out


def grad_check(fn, params, eps=1e-5, max_entries=None, seed=0):
    """Compare analytic gradients with central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params``.  Returns the max over checked entries of
    ``|a - n| / (|a| + |n| + 1e-12)``.  ``max_entries`` caps how many
    coordinates per parameter are probed (chosen at random).
    """
    if not (0.0 < eps <= 1e-3):
        raise ContractError("eps must lie in (0, 1e-3]")
    params = list(params)
    analytic = grads_of(fn(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite function value during grad_check")
            num = (fp - fm) / (2.0 * eps)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, masks=None):
    """One bias-corrected Adam update, in place on ``params``' data.

    ``masks`` (optional, per parameter, broadcastable 0/1 arrays) blocks
    updates where zero; masked entries keep zero moments.  A non-finite
    gradient aborts the step before anything is modified.
    """
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient, Adam step aborted")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        if state.m[k].shape != p.data.shape:
            raise ShapeError(f"state shape {state.m[k].shape} != param shape {p.data.shape}")
        if masks is not None and masks[k] is not None:
            g = g * masks[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        upd = lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
        if masks is not None and masks[k] is not None:
            upd = upd * masks[k]
        p.data -= upd
    return params, state


@dataclass
class Adam:
    params: list
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    masks: list | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamState.zeros_like(self.params)

    def step(self, lr=None):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr,
                  self.beta1, self.beta2, self.eps, self.masks)
        zero_grad(self.params)


def cosine_lr(step, total, base_lr, final_frac=0.1):
    """Cosine decay from base_lr to final_frac * base_lr over ``total`` steps."""
    frac = min(step / max(total, 1), 1.0)
    return base_lr * (final_frac + (1.0 - final_frac) * 0.5 * (1.0 + np.cos(np.pi * frac)))

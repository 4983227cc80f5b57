"""Differentiable operations on :class:`~sigmanet.autodiff.tensor.Tensor`.

Each op computes its forward value with numpy and returns a closure mapping the
upstream gradient to one gradient per parent. Contraction ops report their
multiply-accumulate counts to :mod:`sigmanet.autodiff.flops`.
"""

from __future__ import annotations

import math

import numpy as np

from .flops import record
from .tensor import ShapeError, Tensor, as_tensor

_GELU_C = math.sqrt(2.0 / math.pi)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(x, dtype)


# --------------------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data * b.data
    return Tensor._make(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sqrt_safe(a: Tensor) -> Tensor:
    """Square root of a nonnegative tensor with subgradient 0 at 0."""
    out = np.sqrt(np.maximum(a.data, 0.0))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return Tensor._make(out, (a,), backward, "sqrt")


def arccos_clamped(a: Tensor) -> Tensor:
    """arccos with the argument clamped to [-1, 1].

    Inside the clamp the derivative is -1/sqrt(1 - x^2); at or past the
    boundary the one-sided limit is infinite, so the clamped side contributes
    the value at the closest interior point representable without overflow.
    """
    x = np.clip(a.data, -1.0, 1.0)
    out = np.arccos(x)

    def backward(g):
        denom = np.sqrt(np.maximum(1.0 - x * x, np.finfo(x.dtype).eps))
        return (-g / denom,)

    return Tensor._make(out, (a,), backward, "arccos")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return Tensor._make(out, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data >= lo
    return Tensor._make(np.maximum(x.data, lo), (x,), lambda g: (g * mask,), "clamp_min")


# --------------------------------------------------------------------------- reductions / shape
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with integer ``indices`` (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._make(out, (x,), backward, "take")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    return Tensor._make(np.array(np.broadcast_to(x.data, shape)), (x,), lambda g: (g,), "broadcast")


# --------------------------------------------------------------------------- contractions
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading dimensions.

    Records ``batch * m * k * p`` multiply-accumulates under ``"matmul"``.
    """
    a = _t(a)
    b = _t(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    m, k = a.shape[-2:]
    p = b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64))
    record("matmul", batch * m * k * p)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def _einsum_grad_spec(spec_in: list[str], spec_out: str, i: int) -> str:
    others = [s for j, s in enumerate(spec_in) if j != i]
    return ",".join([spec_out, *others]) + "->" + spec_in[i]


def einsum(spec: str, *operands: Tensor, category: str = "contract") -> Tensor:
    """Two-operand-style einsum without repeated indices inside one operand.

    Records the product of all index extents (one multiply-accumulate per
    term of the summation) under ``category``.
    """
    operands = tuple(_t(o) for o in operands)
    lhs, out_spec = spec.replace(" ", "").split("->")
    in_specs = lhs.split(",")
    sizes: dict[str, int] = {}
    for s, o in zip(in_specs, operands):
        if len(s) != o.ndim:
            raise ShapeError(f"einsum operand {s!r} does not match shape {o.shape}")
        for ch, n in zip(s, o.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum index {ch!r} has sizes {sizes[ch]} and {n}")
    out = np.einsum(spec, *[o.data for o in operands], optimize=True)
    record(category, int(np.prod(list(sizes.values()), dtype=np.int64)))

    def backward(g):
        grads = []
        for i, o in enumerate(operands):
            if not o.requires_grad:
                grads.append(None)
                continue
            rest = [p.data for j, p in enumerate(operands) if j != i]
            grads.append(np.einsum(_einsum_grad_spec(in_specs, out_spec, i), g, *rest, optimize=True))
        return tuple(grads)

    return Tensor._make(np.asarray(out), operands, backward, "einsum")


# --------------------------------------------------------------------------- normalisation
def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max-subtraction.

    Records one softmax unit per element.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    record("softmax", x.size)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    gamma = _t(gamma, x)
    beta = _t(beta, x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, g * xhat, g

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


# --------------------------------------------------------------------------- sampling
def bilinear_sample(fmap: Tensor, x, y) -> Tensor:
    """Sample an ``H x W x D`` map at column ``x`` and row ``y``.

    Evaluates the full tent-kernel sum over every grid point, so locations a
    full cell or more outside the grid produce the zero vector. Differentiable
    with respect to the map and to both coordinates (which may be Tensors).
    """
    fmap = _t(fmap)
    xt = _t(x, fmap)
    yt = _t(y, fmap)
    h, w = fmap.shape[:2]
    cx = xt.item()
    cy = yt.item()
    ox = np.arange(w, dtype=fmap.dtype)
    oy = np.arange(h, dtype=fmap.dtype)
    wx = np.maximum(0.0, 1.0 - np.abs(ox - cx))
    wy = np.maximum(0.0, 1.0 - np.abs(oy - cy))
    # d/dc max(0, 1 - |o - c|) = sign(o - c) inside the support
    dwx = np.where(np.abs(ox - cx) < 1.0, np.sign(ox - cx), 0.0)
    dwy = np.where(np.abs(oy - cy) < 1.0, np.sign(oy - cy), 0.0)
    weights = np.outer(wy, wx)
    out = np.einsum("hw,hwd->d", weights, fmap.data)

    def backward(g):
        gmap = np.outer(wy, wx)[:, :, None] * g[None, None, :]
        proj = np.einsum("hwd,d->hw", fmap.data, g)
        gx = np.einsum("h,w,hw->", wy, dwx, proj).reshape(xt.shape)
        gy = np.einsum("h,w,hw->", dwy, wx, proj).reshape(yt.shape)
        return gmap, gx, gy

    return Tensor._make(out.astype(fmap.dtype), (fmap, xt, yt), backward, "bilinear_sample")


_SAMPLE_CHUNK = 2048


def grid_sample(fmap: Tensor, coords: Tensor) -> Tensor:
    """Batched bilinear sampling of ``(..., H, W, D)`` maps.

    ``coords`` has shape ``(..., M, 2)`` holding (column, row) pairs with the
    same leading dimensions as ``fmap``. Only the four surrounding grid points
    can carry nonzero tent weight, so this gathers those four and zeroes any
    that fall off the grid; it agrees with :func:`bilinear_sample` everywhere.
    Records ``4 * M * D`` multiply-accumulates per map under ``"sample"``.
    """
    fmap = _t(fmap)
    coords = _t(coords, fmap)
    *lead, h, w, d = fmap.shape
    if tuple(coords.shape[:-2]) != tuple(lead) or coords.shape[-1] != 2:
        raise ShapeError(f"grid_sample: map {fmap.shape} vs coords {coords.shape}")
    m = coords.shape[-2]
    nb = int(np.prod(lead, dtype=np.int64)) if lead else 1
    flat = fmap.data.reshape(nb, h * w, d)
    c = coords.data.reshape(nb, m, 2)
    x, y = c[..., 0], c[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        idx = np.where(valid, yi * w + xi, 0).astype(np.intp)
        # sign of d(weight)/dx, d(weight)/dy
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        corners.append((idx, valid, wx, wy, sx, sy))
    bidx = np.arange(nb)[:, None]
    table = flat.reshape(nb * h * w, d)
    # off-grid corners gather row 0 and are silenced through their weight
    gidx = (np.stack([idx for idx, *_ in corners], axis=-1) + (bidx * (h * w))[..., None]).reshape(nb * m, 4)
    wts = np.stack([wx * wy * valid for _, valid, wx, wy, _, _ in corners], axis=-1)
    wts = wts.astype(fmap.dtype).reshape(nb * m, 4)

    def gather(lo, hi):
        return np.take(table, gidx[lo:hi].reshape(-1), axis=0).reshape(hi - lo, 4, d)

    out = np.empty((nb * m, d), dtype=fmap.dtype)
    for lo in range(0, nb * m, _SAMPLE_CHUNK):
        hi = min(lo + _SAMPLE_CHUNK, nb * m)
        out[lo:hi] = np.matmul(wts[lo:hi, None, :], gather(lo, hi))[:, 0, :]
    record("sample", 4 * nb * m * d)

    def backward(g):
        g = g.reshape(nb * m, d)
        gmap = None
        if fmap.requires_grad:
            gmap = np.zeros((nb * h * w, d), dtype=fmap.dtype)
            for k in range(4):
                np.add.at(gmap, gidx[:, k], wts[:, k, None] * g)
            gmap = gmap.reshape(fmap.shape)
        gc = None
        if coords.requires_grad:
            # d(weight)/dx and d(weight)/dy for each corner
            dwx = np.stack([sx * wy * valid for _, valid, _, wy, sx, _ in corners], axis=-1).reshape(nb * m, 4)
            dwy = np.stack([sy * wx * valid for _, valid, wx, _, _, sy in corners], axis=-1).reshape(nb * m, 4)
            proj = np.empty((nb * m, 4), dtype=fmap.dtype)
            for lo in range(0, nb * m, _SAMPLE_CHUNK):
                hi = min(lo + _SAMPLE_CHUNK, nb * m)
                proj[lo:hi] = np.matmul(gather(lo, hi), g[lo:hi, :, None])[..., 0]
            gc = np.stack([(dwx * proj).sum(-1), (dwy * proj).sum(-1)], axis=-1)
            gc = gc.astype(fmap.dtype).reshape(coords.shape)
        return gmap, gc

    return Tensor._make(out.reshape(*lead, m, d), (fmap, coords), backward, "grid_sample")


# --------------------------------------------------------------------------- losses
def cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over rows of ``logits`` whose label is not ignored."""
    labels = np.asarray(labels).reshape(-1)
    flat = reshape(logits, (-1, logits.shape[-1]))
    keep = np.nonzero(labels != ignore_index)[0]
    if keep.size == 0:
        raise ValueError("no labelled rows")
    logp = log_softmax_lastdim(take(flat, keep, axis=0))
    picked = getitem(logp, (np.arange(keep.size), labels[keep]))
    return neg(mean(picked))


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - _t(target, pred)
    return mean(diff * diff)

"""Full self-attention and sparse sampling attention (SSA).

SSA lets each query predict ``n_points`` offsets from its own grid position,
bilinearly resamples keys and values there, and attends over only those
samples. All functions accept arbitrary leading batch dimensions in front of
the ``(N, D')`` token axes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import ShapeError, Tensor


class AttentionKind(str, Enum):
    FULL = "full"
    SSA = "ssa"


@dataclass
class AttentionConfig:
    dim: int
    heads: int
    kind: AttentionKind = AttentionKind.FULL
    grid: tuple[int, int] | None = None
    n_points: int = 8

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        self.kind = AttentionKind(self.kind)
        if self.kind is AttentionKind.SSA and self.grid is None:
            raise ValueError("SSA needs a token grid")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class SsaParams:
    """Offset predictor for one SSA head: ``weight`` is ``D' x 2Np``."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.shape[-1] % 2 or self.weight.shape[-1] == 0:
            raise ValueError("offset weight must produce 2*Np values with Np >= 1")
        if self.bias.shape[-1] != self.weight.shape[-1]:
            raise ShapeError(f"offset bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def n_points(self) -> int:
        return self.weight.shape[-1] // 2

    @classmethod
    def zeros(cls, head_dim: int, n_points: int, dtype=None) -> "SsaParams":
        if n_points < 1:
            raise ValueError("n_points must be >= 1")
        dtype = dtype or np.float32
        return cls(Tensor(np.zeros((head_dim, 2 * n_points), dtype), requires_grad=True),
                   Tensor(np.zeros(2 * n_points, dtype), requires_grad=True))


@dataclass
class HeadWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    ssa: SsaParams | None = field(default=None)


def _affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = F.matmul(x, w)
    return y if b is None else y + b


def _check_square(U: Tensor, *ws: Tensor) -> None:
    for w in ws:
        if w.ndim < 2 or w.shape[-2] != U.shape[-1]:
            raise ShapeError(f"projection {w.shape} does not accept tokens {U.shape}")
    if len({w.shape[-1] for w in ws}) != 1:
        raise ShapeError(f"projections disagree: {[w.shape for w in ws]}")


def qkv(U: Tensor, wq, wk, wv, bq=None, bk=None, bv=None):
    _check_square(U, wq, wk, wv)
    return _affine(U, wq, bq), _affine(U, wk, bk), _affine(U, wv, bv)


def attend_full(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    scale = 1.0 / math.sqrt(Q.shape[-1])
    logits = F.matmul(Q, F.swapaxes(K, -1, -2)) * scale
    attn = F.softmax_lastdim(logits)
    out = F.matmul(attn, V)
    return (out, attn) if return_weights else out


def full_self_attention(U: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                        bq=None, bk=None, bv=None, return_weights: bool = False):
    """softmax(QK^T / sqrt(D')) V with Q, K, V affine maps of ``U``."""
    Q, K, V = qkv(U, wq, wk, wv, bq, bk, bv)
    return attend_full(Q, K, V, return_weights)


# --------------------------------------------------------------------------- SSA
def query_coordinates(grid: tuple[int, int], dtype=np.float64) -> np.ndarray:
    """Row-major (column, row) coordinate of every token on an ``H' x W'`` grid."""
    h, w = grid
    idx = np.arange(h * w)
    return np.stack([idx % w, idx // w], axis=-1).astype(dtype)


def predict_offsets(Q: Tensor, params: SsaParams) -> Tensor:
    """Per-query (dx, dy) offsets in grid units, shape ``(..., N, Np, 2)``."""
    raw = F.matmul(Q, params.weight) + params.bias
    return F.reshape(raw, (*raw.shape[:-1], params.n_points, 2))


def _check_grid(n: int, grid) -> tuple[int, int]:
    h, w = grid
    if h * w != n:
        raise ShapeError(f"grid {h}x{w} does not hold {n} tokens")
    return h, w


def sampling_coordinates(offsets: Tensor, grid) -> Tensor:
    n = offsets.shape[-3]
    base = query_coordinates(_check_grid(n, grid), offsets.dtype)
    return offsets + base[:, None, :]


def sample_keys_values(K: Tensor, V: Tensor, offsets: Tensor, grid):
    """Bilinearly resample keys and values at each query's sampling points.

    Returns ``K', V'`` of shape ``(..., N, Np, D')``.
    """
    *lead, n, d = K.shape
    h, w = _check_grid(n, grid)
    n_points = offsets.shape[-2]
    coords = F.reshape(sampling_coordinates(offsets, grid), (*lead, n * n_points, 2))
    k_map = F.reshape(K, (*lead, h, w, d))
    v_map = F.reshape(V, (*lead, h, w, d))
    k_s = F.grid_sample(k_map, coords)
    v_s = F.grid_sample(v_map, coords)
    return (F.reshape(k_s, (*lead, n, n_points, d)), F.reshape(v_s, (*lead, n, n_points, d)))


def ssa_attend(Q: Tensor, K: Tensor, V: Tensor, offsets: Tensor, grid, return_weights: bool = False):
    """Attention of each query over its own ``Np`` resampled keys/values."""
    *lead, n, d = Q.shape
    k_s, v_s = sample_keys_values(K, V, offsets, grid)
    b = int(np.prod(lead, dtype=np.int64)) if lead else 1
    n_points = offsets.shape[-2]
    q3 = F.reshape(Q, (b, n, d))
    k4 = F.reshape(k_s, (b, n, n_points, d))
    v4 = F.reshape(v_s, (b, n, n_points, d))
    logits = F.einsum("bnd,bnpd->bnp", q3, k4) * (1.0 / math.sqrt(d))
    attn = F.softmax_lastdim(logits)
    out = F.reshape(F.einsum("bnp,bnpd->bnd", attn, v4), (*lead, n, d))
    if return_weights:
        return out, F.reshape(attn, (*lead, n, n_points))
    return out


def ssa_forward(U: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, params: SsaParams, grid,
                bq=None, bk=None, bv=None, return_weights: bool = False):
    Q, K, V = qkv(U, wq, wk, wv, bq, bk, bv)
    offsets = predict_offsets(Q, params)
    return ssa_attend(Q, K, V, offsets, grid, return_weights)


# --------------------------------------------------------------------------- multi-head
def multi_head(U: Tensor, cfg: AttentionConfig, heads: list[HeadWeights], W: Tensor, b: Tensor | None = None) -> Tensor:
    """Run ``cfg.heads`` independent heads, concatenate channels, project with ``W``."""
    if U.shape[-1] != cfg.dim or len(heads) != cfg.heads:
        raise ShapeError(f"tokens {U.shape} / {len(heads)} heads do not match {cfg}")
    outs = []
    for hw in heads:
        if cfg.kind is AttentionKind.SSA:
            outs.append(ssa_forward(U, hw.wq, hw.wk, hw.wv, hw.ssa, cfg.grid, hw.bq, hw.bk, hw.bv))
        else:
            outs.append(full_self_attention(U, hw.wq, hw.wk, hw.wv, hw.bq, hw.bk, hw.bv))
    cat = outs[0] if len(outs) == 1 else F.concat(outs, axis=-1)
    return _affine(cat, W, b)


# --------------------------------------------------------------------------- closed forms
def ssa_flops(n: int, head_dim: int, n_points: int) -> int:
    """Multiply-accumulates of one SSA head: ``3ND'^2 + 12 N Np D' + N Np``."""
    if min(n, head_dim, n_points) < 1:
        raise ValueError("sizes must be positive")
    return 3 * n * head_dim ** 2 + 12 * n * n_points * head_dim + n * n_points


def full_flops(n: int, head_dim: int) -> int:
    """Multiply-accumulates of one full-attention head: ``3ND'^2 + 2N^2 D' + N^2``."""
    if min(n, head_dim) < 1:
        raise ValueError("sizes must be positive")
    return 3 * n * head_dim ** 2 + 2 * n * n * head_dim + n * n


# --------------------------------------------------------------------------- inspection
def sampled_points(offsets: np.ndarray, grid) -> np.ndarray:
    """Rows of (query_index, point_index, x, y) for one head's offsets ``(N, Np, 2)``."""
    offsets = np.asarray(offsets, dtype=np.float64)
    n, n_points, _ = offsets.shape
    coords = offsets + query_coordinates(_check_grid(n, grid))[:, None, :]
    q, p = np.meshgrid(np.arange(n), np.arange(n_points), indexing="ij")
    return np.column_stack([q.ravel(), p.ravel(), coords[..., 0].ravel(), coords[..., 1].ravel()])


def write_offsets_csv(path, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_index", "point_index", "x", "y"])
        for q, p, x, y in rows:
            writer.writerow([int(q), int(p), repr(float(x)), repr(float(y))])

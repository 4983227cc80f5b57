"""Spectral enhancement: recalibrate spatial features channel-wise from spectral tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import ShapeError, Tensor
from .nn import Linear, Module


@dataclass
class SemConfig:
    dim: int
    reduced_dim: int
    n_spec: int

    def __post_init__(self):
        if self.reduced_dim > self.dim:
            raise ValueError(f"reduced dim {self.reduced_dim} exceeds input dim {self.dim}")


def sem_fuse(f_spat: Tensor, f_spec: Tensor, w_spat: Tensor, w_spec: Tensor, b_spec: Tensor | None,
             w_align: Tensor, b_align: Tensor | None) -> Tensor:
    """``(1 + V) * compress(F_spat)`` with ``V`` derived from the spectral tokens.

    ``f_spat`` is ``(..., H', W', D)``; ``f_spec`` is ``(..., N_spec, D)`` with
    the same leading dims. The spectral tokens are compressed to ``D1``,
    averaged over that channel axis to one scalar per token, and the resulting
    ``N_spec`` vector is mapped to ``D1`` channel gains.
    """
    if f_spat.shape[-1] != w_spat.shape[0] or f_spec.shape[-1] != w_spec.shape[0]:
        raise ShapeError(f"SEM inputs {f_spat.shape}, {f_spec.shape} do not match compressors")
    if f_spec.shape[-2] != w_align.shape[0]:
        raise ShapeError(f"{f_spec.shape[-2]} spectral tokens vs alignment map {w_align.shape}")
    if f_spat.shape[:-3] != f_spec.shape[:-2]:
        raise ShapeError(f"batch dims differ: {f_spat.shape} vs {f_spec.shape}")
    spat = F.matmul(f_spat, w_spat)
    spec = F.matmul(f_spec, w_spec)
    if b_spec is not None:
        spec = spec + b_spec
    v = F.mean(spec, axis=-1)  # (..., N_spec)
    v = F.matmul(F.reshape(v, (*v.shape[:-1], 1, v.shape[-1])), w_align)  # (..., 1, D1)
    if b_align is not None:
        v = v + b_align
    gain = F.reshape(v, (*v.shape[:-2], 1, 1, v.shape[-1])) + 1.0
    return spat * gain


class SEM(Module):
    def __init__(self, cfg: SemConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.spat = Linear(cfg.dim, cfg.reduced_dim, rng, bias=False)
        self.spec = Linear(cfg.dim, cfg.reduced_dim, rng)
        self.align = Linear(cfg.n_spec, cfg.reduced_dim, rng)

    def forward(self, f_spat: Tensor, f_spec: Tensor) -> Tensor:
        return sem_fuse(f_spat, f_spec, self.spat.weight, self.spec.weight, self.spec.bias,
                        self.align.weight, self.align.bias)

"""Parameter containers, layers and the optimizer used for training."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, get_default_dtype

INIT_SIGMA = 0.02


def trunc_normal(rng: np.random.Generator, shape, sigma: float = INIT_SIGMA, bound: float = 2.0, dtype=None):
    """Normal(0, sigma) draws, redrawing anything outside [-bound, bound]."""
    dtype = dtype or get_default_dtype()
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


class Module:
    """Minimal container: parameters are Tensor attributes with requires_grad,
    submodules are Module attributes (or lists of Modules)."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        for k, v in state.items():
            if k not in own:
                raise KeyError(f"unexpected parameter {k!r}")
            if own[k].shape != tuple(v.shape):
                raise ValueError(f"shape mismatch for {k!r}: {own[k].shape} vs {tuple(v.shape)}")
            own[k].data = np.array(v, dtype=own[k].dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else trunc_normal(rng, (d_in, d_out))
        self.weight = parameter(w.astype(get_default_dtype()))
        self.bias = parameter(np.zeros(d_out, dtype=get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim, dtype=get_default_dtype()))
        self.bias = parameter(np.zeros(dim, dtype=get_default_dtype()))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied to matrices only; vectors (biases, norms) and embedding
    tables listed in ``no_decay`` are left undecayed.
    """

    def __init__(self, named_params, lr: float = 1.5e-4, weight_decay: float = 0.05,
                 betas=(0.9, 0.95), eps: float = 1e-8, no_decay=("pos_embed", "mask_token")):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.decay = [p.ndim >= 2 and not any(tag in n for tag in no_decay) for n, p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            if self.lr == 0:
                continue
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.decay[i]:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

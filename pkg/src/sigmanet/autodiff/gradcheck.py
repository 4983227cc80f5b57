"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor * max|n|)``.

    The floor keeps entries whose true gradient is orders of magnitude below
    the rest of the gradient from dominating through round-off alone.
    """
    diff = np.abs(analytic - numeric)
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * scale, 1e-300))
    return np.where(diff == 0, 0.0, diff / denom)


def numeric_grad(f, inputs: list[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    out = []
    with no_grad():
        for x in inputs:
            g = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * step)
            out.append(g)
    return out


def grad_check(f, x, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``x`` is a Tensor or a list of Tensors; ``f`` takes no arguments and reads
    them by closure, or takes them positionally when called with a list.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = list(x) if isinstance(x, (list, tuple)) else [x]

    def call():
        return f(*inputs)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = call()
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    numeric = numeric_grad(call, inputs, step)
    a = np.concatenate([g.reshape(-1) for g in analytic])
    n = np.concatenate([g.reshape(-1) for g in numeric])
    return GradCheckReport(a, n, relative_error(a, n), tol)

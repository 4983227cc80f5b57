"""Registered differentiable ops and their finite-difference checks.

Each case builds small random 64-bit inputs and a scalar objective: the op's
output contracted with a fixed random tensor, so every output entry matters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import SsaParams, full_self_attention, ssa_forward
from .autodiff import functional as F
from .autodiff.gradcheck import grad_check
from .autodiff.tensor import Tensor
from .sem import sem_fuse
from .tasks.unmixing import loss_lhalf, loss_sad, loss_tv


def _t(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), dtype=np.float64)


def _probe(out: Tensor, rng) -> Tensor:
    r = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return F.sum(out * r)


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    r = rng.standard_normal((2, 3, 5))
    return lambda a, b: F.sum(F.matmul(a, b) * r), [a, b]


def _softmax(rng):
    x = _t(rng, 3, 6, scale=2.0)
    r = rng.standard_normal((3, 6))
    return lambda x: F.sum(F.softmax_lastdim(x) * r), [x]


def _layer_norm(rng):
    x, g, b = _t(rng, 4, 6), _t(rng, 6), _t(rng, 6)
    r = rng.standard_normal((4, 6))
    return lambda x, g, b: F.sum(F.layer_norm(x, g, b) * r), [x, g, b]


def _gelu(rng):
    x = _t(rng, 5, 4, scale=2.0)
    r = rng.standard_normal((5, 4))
    return lambda x: F.sum(F.gelu(x) * r), [x]


def _coords(rng, size, lo, hi):
    # keep clear of the tent kernel's kinks at integer coordinates
    c = rng.uniform(lo, hi, size)
    frac = c - np.floor(c)
    return c + np.where(frac < 0.05, 0.1, 0.0) - np.where(frac > 0.95, 0.1, 0.0)


def _bilinear(rng):
    fmap = _t(rng, 3, 4, 2)
    x = Tensor(np.asarray(_coords(rng, (), -0.8, 3.8)), dtype=np.float64)
    y = Tensor(np.asarray(_coords(rng, (), -0.8, 2.8)), dtype=np.float64)
    r = rng.standard_normal(2)
    return lambda m, x, y: F.sum(F.bilinear_sample(m, x, y) * r), [fmap, x, y]


def _grid_sample(rng):
    fmap = _t(rng, 2, 3, 3, 2)
    coords = Tensor(_coords(rng, (2, 5, 2), -0.8, 2.8), dtype=np.float64)
    r = rng.standard_normal((2, 5, 2))
    return lambda m, c: F.sum(F.grid_sample(m, c) * r), [fmap, coords]


def _ssa(rng):
    n, d, p = 6, 3, 2
    U = _t(rng, n, d)
    ws = [_t(rng, d, d, scale=0.7) for _ in range(3)]
    ow = _t(rng, d, 2 * p, scale=0.3)
    # fractional bias keeps sampling points away from grid lines
    ob = Tensor(rng.uniform(-1.5, 1.5, 2 * p) + 0.37, dtype=np.float64)
    r = rng.standard_normal((n, d))

    def f(U, wq, wk, wv, ow, ob):
        return F.sum(ssa_forward(U, wq, wk, wv, SsaParams(ow, ob), (2, 3)) * r)

    return f, [U, *ws, ow, ob]


def _full_attention(rng):
    n, d = 5, 3
    U = _t(rng, n, d)
    ws = [_t(rng, d, d, scale=0.7) for _ in range(3)]
    r = rng.standard_normal((n, d))
    return lambda U, wq, wk, wv: F.sum(full_self_attention(U, wq, wk, wv) * r), [U, *ws]


def _sem(rng):
    d, d1, ns = 4, 3, 5
    f_spat, f_spec = _t(rng, 2, 3, d), _t(rng, ns, d)
    w_spat, w_spec, b_spec = _t(rng, d, d1), _t(rng, d, d1), _t(rng, d1)
    w_align, b_align = _t(rng, ns, d1), _t(rng, d1)
    r = rng.standard_normal((2, 3, d1))

    def f(*args):
        return F.sum(sem_fuse(*args) * r)

    return f, [f_spat, f_spec, w_spat, w_spec, b_spec, w_align, b_align]


def _sad(rng):
    x = Tensor(rng.uniform(0.1, 1.0, (6, 5)), dtype=np.float64)
    x_hat = Tensor(rng.uniform(0.1, 1.0, (6, 5)), dtype=np.float64)
    return loss_sad, [x, x_hat]


def _lhalf(rng):
    return loss_lhalf, [Tensor(rng.uniform(0.05, 1.0, (4, 3)), dtype=np.float64)]


def _tv(rng):
    E = rng.uniform(0, 1, (3, 6))
    # keep first differences away from the kink of |.| at zero
    d = np.diff(E, axis=1)
    d = np.where(np.abs(d) < 0.02, 0.05 * np.sign(d + 1e-12), d)
    E = np.concatenate([E[:, :1], E[:, :1] + np.cumsum(d, axis=1)], axis=1)
    return loss_tv, [Tensor(E, dtype=np.float64)]


REGISTRY = {
    "matmul": _matmul,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "gelu": _gelu,
    "bilinear_sample": _bilinear,
    "grid_sample": _grid_sample,
    "full_attention": _full_attention,
    "ssa_forward": _ssa,
    "sem": _sem,
    "loss_sad": _sad,
    "loss_lhalf": _lhalf,
    "loss_tv": _tv,
}


@dataclass
class OpResult:
    name: str
    trials: int
    failures: int
    worst: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def check_op(name: str, trials: int = 100, seed: int = 0, tol: float = 1e-4) -> OpResult:
    build = REGISTRY[name]
    failures = 0
    worst = 0.0
    t0 = time.perf_counter()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, len(name)])
        f, inputs = build(rng)
        report = grad_check(f, inputs, tol=tol)
        worst = max(worst, report.max_rel_error)
        failures += not report.passed
    return OpResult(name, trials, failures, worst, time.perf_counter() - t0)


def run_suite(trials: int = 100, seed: int = 0, tol: float = 1e-4, names=None) -> list[OpResult]:
    return [check_op(n, trials, seed, tol) for n in (names or REGISTRY)]


def format_table(results: list[OpResult]) -> str:
    lines = [f"{'op':<16} {'trials':>6} {'fail':>5} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<16} {r.trials:>6} {r.failures:>5} {r.worst:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

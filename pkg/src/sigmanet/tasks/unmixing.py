"""Unmixing head: abundance encoder, linear-mixture decoder and its three-term loss."""

from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_cube
from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, no_grad, set_default_dtype, get_default_dtype
from ..backbone import SigmaConfig
from ..data import HsiCube, MixtureGroundTruth
from ..nn import AdamW, Linear, Module, parameter
from ..sem import SEM, SemConfig
from .common import batchify, build_backbone, tokens_to_map, upsample_bilinear

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- encode / decode
def unmix_encode(features: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel 1x1 projection to ``C_a`` logits followed by a softmax."""
    logits = F.matmul(features, weight)
    if bias is not None:
        logits = logits + bias
    return F.softmax_lastdim(logits)


def unmix_decode(Z: Tensor, endmembers: Tensor) -> Tensor:
    """Linear mixture: every pixel is ``z^T W^D``."""
    if Z.shape[-1] != endmembers.shape[0]:
        raise ValueError(f"abundances {Z.shape} do not match endmembers {endmembers.shape}")
    return F.matmul(Z, endmembers)


# --------------------------------------------------------------------------- losses
def loss_sad(x, x_hat: Tensor) -> Tensor:
    """Mean spectral angle between corresponding pixels of ``x`` and ``x_hat``."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    c = x.shape[-1]
    xf = F.reshape(x, (-1, c))
    yf = F.reshape(x_hat, (-1, c))
    nx = np.sqrt((xf.data ** 2).sum(-1))
    ny = np.sqrt((yf.data ** 2).sum(-1))
    for name, norms in (("x", nx), ("x_hat", ny)):
        bad = np.nonzero(norms == 0)[0]
        if bad.size:
            raise ValueError(f"zero-norm spectrum in {name} at pixel {int(bad[0])}")
    dot = F.sum(xf * yf, axis=-1)
    norm_x = F.sqrt_safe(F.sum(xf * xf, axis=-1))
    norm_y = F.sqrt_safe(F.sum(yf * yf, axis=-1))
    cos = dot / (norm_x * norm_y)
    return F.mean(F.arccos_clamped(cos))


def loss_lhalf(Z: Tensor) -> Tensor:
    """Mean over pixels of ``sum_j sqrt(z_j)``; subgradient 0 at 0."""
    if np.any(Z.data < 0):
        raise ValueError("abundances must be nonnegative")
    per_pixel = F.sum(F.sqrt_safe(Z), axis=-1)
    return F.mean(per_pixel)


def loss_tv(endmembers: Tensor) -> Tensor:
    """Sum of absolute first differences along the spectral axis."""
    if endmembers.shape[-1] < 2:
        raise ValueError("TV needs at least two channels")
    c = endmembers.shape[-1]
    diff = endmembers[:, 1:c] - endmembers[:, 0:c - 1]
    return F.sum(F.abs(diff))


def unmix_total_loss(x, x_hat: Tensor, Z: Tensor, endmembers: Tensor, alpha: float = 0.35, beta: float = 0.1):
    """``mean(SAD + alpha * L_1/2) + beta * TV``. Returns (total, {term: value})."""
    sad = loss_sad(x, x_hat)
    lhalf = loss_lhalf(Z)
    tv = loss_tv(endmembers)
    total = sad + lhalf * alpha + tv * beta
    return total, {"sad": float(sad.item()), "lhalf": float(lhalf.item()), "tv": float(tv.item())}


# --------------------------------------------------------------------------- metrics
def spectral_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def match_endmembers(estimated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Permutation ``p`` minimising mean SAD between ``estimated[p]`` and ``reference``.

    Exhaustive for up to six endmembers, Hungarian assignment beyond.
    """
    k = len(reference)
    cost = spectral_angle(estimated[:, None, :], reference[None, :, :])  # est x ref
    if k <= 6:
        best = min(itertools.permutations(range(k)), key=lambda p: cost[list(p), range(k)].sum())
        return np.array(best)
    rows, cols = linear_sum_assignment(cost.T)
    return cols[np.argsort(rows)]


def unmixing_metrics(abundances: np.ndarray, endmembers: np.ndarray, truth: MixtureGroundTruth) -> dict:
    perm = match_endmembers(endmembers, truth.endmembers)
    sad = spectral_angle(endmembers[perm], truth.endmembers)
    ab = abundances[..., perm]
    mse = float(np.mean((ab - truth.abundances) ** 2))
    out = {"abundance_mse": mse, "mean_sad": float(sad.mean())}
    out.update({f"sad_{j}": float(s) for j, s in enumerate(sad)})
    return out


def init_endmembers(pixels: np.ndarray, k: int) -> np.ndarray:
    """Pick ``k`` extreme pixels by successive orthogonal projection.

    Starts from the pixel with the largest norm and repeatedly takes the pixel
    with the largest residual after projecting out those already chosen.
    """
    X = np.asarray(pixels, dtype=np.float64).reshape(-1, pixels.shape[-1])
    R = X.copy()
    chosen = []
    for _ in range(k):
        i = int(np.argmax((R ** 2).sum(1)))
        chosen.append(i)
        u = R[i] / (np.linalg.norm(R[i]) + 1e-12)
        R = R - np.outer(R @ u, u)
    return np.maximum(X[chosen], 0.0)


# --------------------------------------------------------------------------- model
@dataclass
class UnmixConfig:
    n_endmembers: int = 4
    alpha: float = 0.35
    beta: float = 0.1
    epochs: int = 200
    lr: float = 1e-3
    endmember_lr: float = 1e-4
    weight_decay: float = 0.0
    depth: int = 4
    dim: int = 32
    heads: int = 4
    patch: int = 2
    n_spec: int = 64
    n_points: int = 8
    reduced_dim: int = 32
    use_ssa: bool = True
    finetune_backbone: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


class UnmixNet(Module):
    def __init__(self, cfg: UnmixConfig, in_shape, checkpoint=None):
        h, w, c = in_shape
        self.cfg = cfg
        n_spec = min(cfg.n_spec, c)
        self.sigma_cfg = SigmaConfig(tuple(in_shape), cfg.depth, cfg.dim, cfg.heads, 4, cfg.patch, n_spec,
                                     cfg.n_points, cfg.use_ssa, cfg.seed)
        self.backbone, self.adaptation = build_backbone(self.sigma_cfg, checkpoint, seed=cfg.seed)
        rng = np.random.default_rng(cfg.seed + 11)
        self.sem = SEM(SemConfig(cfg.dim, cfg.reduced_dim, n_spec), rng)
        self.head = Linear(cfg.reduced_dim, cfg.n_endmembers, rng)
        self.endmembers = parameter(np.full((cfg.n_endmembers, c), 1.0 / c, dtype=get_default_dtype()))
        self.out_hw = (h, w)

    def trainable(self):
        for name, p in self.named_parameters():
            if name == "endmembers":
                continue
            if self.cfg.finetune_backbone or not name.startswith("backbone."):
                yield name, p

    def abundances(self, x: Tensor) -> Tensor:
        """Abundances at token resolution, ``(B, H', W', C_a)``."""
        _, z_spat = self.backbone.forward_spat(x)
        _, z_spec = self.backbone.forward_spec(x)
        fmap = tokens_to_map(z_spat, self.backbone.spat.cfg.grid)
        fused = self.sem(fmap, z_spec)
        return unmix_encode(fused, self.head.weight, self.head.bias)

    def forward(self, x):
        z = upsample_bilinear(self.abundances(x), self.out_hw)
        return z, unmix_decode(z, self.endmembers)


def _encoder_input(cube: HsiCube) -> np.ndarray:
    scale = float(np.abs(cube.data).max()) or 1.0
    return batchify(cube.data / scale, get_default_dtype())


def run_finetune_unmix(cfg: UnmixConfig, cube: HsiCube, checkpoint=None, truth: MixtureGroundTruth | None = None):
    """Fit the unmixing head on one cube.

    Returns ``(abundances H x W x C_a, endmembers C_a x C, metrics, model)``.
    Endmembers are projected onto the nonnegative orthant after every step.
    """
    set_default_dtype(cfg.dtype)
    cube = check_cube(cube)
    model = UnmixNet(cfg, cube.shape, checkpoint)
    model.endmembers.data = init_endmembers(cube.data, cfg.n_endmembers).astype(get_default_dtype())
    x_in = _encoder_input(cube)
    target = batchify(cube.data, get_default_dtype())
    opt = AdamW(model.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    em_opt = AdamW([("endmembers", model.endmembers)], lr=cfg.endmember_lr, weight_decay=0.0)
    curve = []
    for epoch in range(cfg.epochs):
        z, x_hat = model(x_in)
        loss, terms = unmix_total_loss(target, x_hat, z, model.endmembers, cfg.alpha, cfg.beta)
        value = float(loss.item())
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite unmixing loss at epoch {epoch}: {terms}")
        opt.zero_grad()
        em_opt.zero_grad()
        loss.backward()
        opt.step()
        em_opt.step()
        model.endmembers.data = np.maximum(model.endmembers.data, 0.0)
        curve.append((epoch, value, terms["sad"], terms["lhalf"], terms["tv"]))
        if epoch % 50 == 0:
            log.info("epoch %d J=%.5f %s", epoch, value, terms)
    with no_grad():
        z, x_hat = model(x_in)
        _, terms = unmix_total_loss(target, x_hat, z, model.endmembers, cfg.alpha, cfg.beta)
    Z = z.data[0].astype(np.float64)
    W = model.endmembers.data.astype(np.float64)
    metrics = {"loss_sad": terms["sad"], "loss_lhalf": terms["lhalf"], "loss_tv": terms["tv"],
               "alpha": cfg.alpha, "beta": cfg.beta}
    if truth is not None:
        metrics.update(unmixing_metrics(Z, W, truth))
    model.curve = curve
    return Z, W, metrics, model


class HyperUnmixer(TransformerMixin, BaseEstimator):
    """Blind unmixing estimator. ``fit`` learns endmembers and abundances of one
    cube; ``transform`` returns its ``H x W x C_a`` abundance map."""

    def __init__(self, n_endmembers=4, alpha=0.35, beta=0.1, epochs=200, lr=1e-3, endmember_lr=1e-4, depth=4, dim=32,
                 heads=4, patch=2, n_spec=64, reduced_dim=32, use_ssa=True, finetune_backbone=True,
                 checkpoint=None, seed=0, dtype="float32"):
        self.n_endmembers = n_endmembers
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.lr = lr
        self.endmember_lr = endmember_lr
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.patch = patch
        self.n_spec = n_spec
        self.reduced_dim = reduced_dim
        self.use_ssa = use_ssa
        self.finetune_backbone = finetune_backbone
        self.checkpoint = checkpoint
        self.seed = seed
        self.dtype = dtype

    def _config(self) -> UnmixConfig:
        names = {f.name for f in dataclasses.fields(UnmixConfig)}
        return UnmixConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None, truth: MixtureGroundTruth | None = None):
        cube = check_cube(X)
        Z, W, metrics, model = run_finetune_unmix(self._config(), cube, self.checkpoint, truth)
        self.abundances_ = Z
        self.endmembers_ = W
        self.metrics_ = metrics
        self.model_ = model
        self.loss_curve_ = [row[1] for row in model.curve]
        self.adaptation_ = model.adaptation
        self.n_features_in_ = cube.C
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        cube = check_cube(X)
        if cube.shape != (*self.model_.out_hw, self.n_features_in_):
            raise ValueError(f"cube shape {cube.shape} differs from the fitted shape")
        with no_grad():
            z, _ = self.model_(_encoder_input(cube))
        return z.data[0].astype(np.float64)

    def inverse_transform(self, Z):
        check_is_fitted(self, "endmembers_")
        return np.asarray(Z) @ self.endmembers_

"""Pixel classification head over the four full-attention-layer features."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_cube, check_labels
from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, no_grad, set_default_dtype, get_default_dtype
from ..backbone import SigmaConfig
from ..data import HsiCube
from ..nn import AdamW, Linear, Module
from ..sem import SEM, SemConfig
from .common import batchify, build_backbone, tokens_to_map, upsample_bilinear

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass
class SegHeadConfig:
    n_classes: int = 2
    reduced_dim: int = 16
    hidden: int = 64
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.05
    depth: int = 4
    dim: int = 32
    heads: int = 4
    patch: int = 8
    n_spec: int = 16
    n_points: int = 8
    use_ssa: bool = True
    finetune_backbone: bool = True
    seed: int = 0
    dtype: str = "float32"


class SegHead(Module):
    def __init__(self, cfg: SegHeadConfig, n_spec: int, rng):
        self.cfg = cfg
        self.sems = [SEM(SemConfig(cfg.dim, cfg.reduced_dim, n_spec), rng) for _ in range(4)]
        self.fuse1 = Linear(4 * cfg.reduced_dim, cfg.hidden, rng)
        self.fuse2 = Linear(cfg.hidden, cfg.n_classes, rng)

    def forward(self, features, spectral, out_hw):
        return seg_head_forward(features, spectral, self, out_hw)


def seg_head_forward(features, spectral: Tensor, head: SegHead, out_hw) -> Tensor:
    """Upsample each of the four feature maps, enhance each with its own SEM,
    concatenate and classify every pixel with two 1x1 layers.

    ``features`` are ``(B, H', W', D)`` maps; returns ``(B, H, W, K)`` logits.
    """
    if len(features) != 4 or any(f is None for f in features):
        raise ValueError(f"need four feature maps, got {len(features)}")
    fused = [sem(upsample_bilinear(f, out_hw), spectral) for f, sem in zip(features, head.sems)]
    x = F.concat(fused, axis=-1)
    return head.fuse2(F.gelu(head.fuse1(x)))


def overall_accuracy(pred: np.ndarray, labels: np.ndarray, ignore: int = IGNORE) -> float:
    keep = labels != ignore
    if not keep.any():
        raise ValueError("no labelled pixels")
    return float(np.mean(pred[keep] == labels[keep]))


class SegNet(Module):
    def __init__(self, cfg: SegHeadConfig, in_shape, checkpoint=None):
        h, w, c = in_shape
        n_spec = min(cfg.n_spec, c)
        self.cfg = cfg
        self.sigma_cfg = SigmaConfig(tuple(in_shape), cfg.depth, cfg.dim, cfg.heads, 4, cfg.patch, n_spec,
                                     cfg.n_points, cfg.use_ssa, cfg.seed)
        self.backbone, self.adaptation = build_backbone(self.sigma_cfg, checkpoint, seed=cfg.seed)
        self.head = SegHead(cfg, n_spec, np.random.default_rng(cfg.seed + 13))
        self.out_hw = (h, w)

    def trainable(self):
        for name, p in self.named_parameters():
            if self.cfg.finetune_backbone or not name.startswith("backbone."):
                yield name, p

    def forward(self, x) -> Tensor:
        feats, _ = self.backbone.forward_spat(x)
        _, spec = self.backbone.forward_spec(x)
        grid = self.backbone.spat.cfg.grid
        maps = [tokens_to_map(f, grid) for f in feats]
        return self.head(maps, spec, self.out_hw)


def _encoder_input(cube: HsiCube) -> np.ndarray:
    x = cube.data
    mu = x.mean(axis=(0, 1), keepdims=True)
    sd = x.std(axis=(0, 1), keepdims=True) + 1e-6
    return batchify((x - mu) / sd, get_default_dtype())


def run_finetune_seg(cfg: SegHeadConfig, cube: HsiCube, labels, checkpoint=None, test_labels=None):
    """Train on the labelled pixels of one scene (``-1`` marks unlabelled).

    Returns ``(logits H x W x K, metrics, model)``.
    """
    set_default_dtype(cfg.dtype)
    cube = check_cube(cube)
    labels = check_labels(labels, cube.shape[:2])
    if labels.max() >= cfg.n_classes:
        raise ValueError(f"label {labels.max()} out of range for {cfg.n_classes} classes")
    model = SegNet(cfg, cube.shape, checkpoint)
    x = _encoder_input(cube)
    opt = AdamW(model.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    for epoch in range(cfg.epochs):
        logits = model(x)
        loss = F.cross_entropy(logits, labels, ignore_index=IGNORE)
        value = float(loss.item())
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((epoch, value))
        if epoch % 25 == 0:
            log.info("epoch %d CE=%.5f", epoch, value)
    with no_grad():
        logits = model(x).data[0].astype(np.float64)
    pred = logits.argmax(-1)
    metrics = {"train_oa": overall_accuracy(pred, labels)}
    if test_labels is not None:
        metrics["test_oa"] = overall_accuracy(pred, check_labels(test_labels, cube.shape[:2]))
    model.curve = curve
    return logits, metrics, model


class HyperSegmenter(ClassifierMixin, BaseEstimator):
    """Scene classifier: ``fit(cube, label_map)`` then ``predict(cube)`` -> label map."""

    def __init__(self, n_classes=2, reduced_dim=16, hidden=64, epochs=100, lr=1e-3, weight_decay=0.05,
                 depth=4, dim=32, heads=4, patch=8, n_spec=16, use_ssa=True, finetune_backbone=True,
                 checkpoint=None, seed=0, dtype="float32"):
        self.n_classes = n_classes
        self.reduced_dim = reduced_dim
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.patch = patch
        self.n_spec = n_spec
        self.use_ssa = use_ssa
        self.finetune_backbone = finetune_backbone
        self.checkpoint = checkpoint
        self.seed = seed
        self.dtype = dtype

    def _config(self) -> SegHeadConfig:
        names = {f.name for f in dataclasses.fields(SegHeadConfig)}
        return SegHeadConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y):
        cube = check_cube(X)
        logits, metrics, model = run_finetune_seg(self._config(), cube, y, self.checkpoint)
        self.model_ = model
        self.metrics_ = metrics
        self.classes_ = np.arange(self.n_classes)
        self.loss_curve_ = [v for _, v in model.curve]
        self.adaptation_ = model.adaptation
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        with no_grad():
            return self.model_(_encoder_input(check_cube(X))).data[0].astype(np.float64)

    def predict(self, X):
        return self.decision_function(X).argmax(-1)

    def score(self, X, y, sample_weight=None):
        labels = check_labels(y, check_cube(X).shape[:2])
        return overall_accuracy(self.predict(X), labels)

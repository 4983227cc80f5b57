"""Pieces shared by the fine-tuning heads."""

from __future__ import annotations

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor
from ..backbone import SigmaBackbone, SigmaConfig, interp_matrix
from ..checkpoint import load_adapted, load_checkpoint


def upsample_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resize ``(B, h, w, D)`` maps to ``(B, H, W, D)`` (half-pixel centres)."""
    _, h, w, _ = x.shape
    H, W = out_hw
    if (h, w) == (H, W):
        return x
    ry = Tensor(interp_matrix(h, H, align_corners=False, dtype=x.dtype))
    rx = Tensor(interp_matrix(w, W, align_corners=False, dtype=x.dtype))
    return F.einsum("ai,bj,nijd->nabd", ry, rx, x)


def tokens_to_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    b, _, d = tokens.shape
    return F.reshape(tokens, (b, grid[0], grid[1], d))


def build_backbone(cfg: SigmaConfig, checkpoint=None, seed: int = 0):
    """Construct the backbone and optionally load an adapted checkpoint.

    Returns ``(backbone, adaptation report)``.
    """
    model = SigmaBackbone(cfg)
    report = []
    if checkpoint is not None:
        state = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
        report = load_adapted(model, state, seed=seed)
    return model, report


def batchify(x: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    return x[None] if x.ndim == 3 else x

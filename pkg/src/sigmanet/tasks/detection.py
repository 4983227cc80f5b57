from __future__ import annotations

from ..autodiff import functional as F
from ..autodiff.tensor import ShapeError, Tensor


def target_similarity_map(features: Tensor, target: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel dot product of ``(H', W', D1)`` features with the target
    spectrum mapped from ``C`` to ``D1`` channels."""
    if target.shape[-1] != weight.shape[0] or features.shape[-1] != weight.shape[1]:
        raise ShapeError(f"target {target.shape}, map {weight.shape}, features {features.shape} disagree")
    t = F.matmul(F.reshape(target, (1, target.shape[-1])), weight)
    if bias is not None:
        t = t + bias
    t = F.reshape(t, (weight.shape[1],))
    return F.sum(features * t, axis=-1)

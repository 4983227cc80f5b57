"""Spatial-spectral hyperspectral foundation model on a small numpy autodiff core."""

from .attention import AttentionKind, full_self_attention, ssa_forward
from .backbone import SigmaBackbone, SigmaConfig, ViT, ViTConfig, full_attention_layers
from .data import HsiCube, read_cube, write_cube
from .mae import MaskedAutoencoder, PretrainConfig, run_pretrain
from .tasks.segmentation import HyperSegmenter
from .tasks.unmixing import HyperUnmixer

__version__ = "0.1.0"

__all__ = [
    "AttentionKind",
    "HsiCube",
    "HyperSegmenter",
    "HyperUnmixer",
    "MaskedAutoencoder",
    "PretrainConfig",
    "SigmaBackbone",
    "SigmaConfig",
    "ViT",
    "ViTConfig",
    "full_attention_layers",
    "full_self_attention",
    "read_cube",
    "run_pretrain",
    "ssa_forward",
    "write_cube",
]

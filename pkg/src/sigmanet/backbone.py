"""Spatial and spectral vision transformers.

The spatial network tokenises non-overlapping ``P x P x C`` patches; the
spectral network averages contiguous channel groups and tokenises each group's
``H*W`` image. Blocks at depths ``n/4, n/2, 3n/4, n`` keep full attention and
the rest use sparse sampling attention once ``use_ssa`` is on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, AttentionKind, HeadWeights, SsaParams, multi_head, predict_offsets
from .autodiff import functional as F
from .autodiff.tensor import ShapeError, Tensor, get_default_dtype, no_grad
from .nn import INIT_SIGMA, LayerNorm, Linear, Module, parameter, trunc_normal


def full_attention_layers(depth: int) -> frozenset[int]:
    """1-indexed layers that keep full attention: ``i * depth/4`` for i = 1..4."""
    if depth < 4 or depth % 4:
        raise ValueError(f"depth must be a positive multiple of 4, got {depth}")
    q = depth // 4
    return frozenset(i * q for i in range(1, 5))


@dataclass
class ViTConfig:
    kind: str = "spatial"  # "spatial" | "spectral"
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_ratio: int = 4
    patch: int = 8
    n_spec: int = 100
    in_shape: tuple[int, int, int] = (64, 64, 100)
    n_points: int = 8
    use_ssa: bool = True
    init_sigma: float = INIT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("spatial", "spectral"):
            raise ValueError(f"unknown subnetwork kind {self.kind!r}")
        self.in_shape = tuple(int(v) for v in self.in_shape)
        full_attention_layers(self.depth)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        h, w, c = self.in_shape
        if self.kind == "spatial" and (h % self.patch or w % self.patch):
            raise ValueError(f"input {h}x{w} not divisible by patch {self.patch}")
        if self.kind == "spectral" and self.n_spec > c:
            raise ValueError(f"n_spec {self.n_spec} exceeds channel count {c}")

    @property
    def schedule(self) -> frozenset[int]:
        return full_attention_layers(self.depth)

    @property
    def grid(self) -> tuple[int, int]:
        if self.kind == "spatial":
            return (self.in_shape[0] // self.patch, self.in_shape[1] // self.patch)
        return (1, self.n_spec)

    @property
    def n_tokens(self) -> int:
        h, w = self.grid
        return h * w

    def attention_kind(self, layer: int) -> AttentionKind:
        if not self.use_ssa or layer in self.schedule:
            return AttentionKind.FULL
        return AttentionKind.SSA


@dataclass
class TokenBatch:
    tokens: Tensor  # B x N x D
    grid: tuple[int, int]
    pos: Tensor | None = None

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[-2] != h * w:
            raise ShapeError(f"{self.tokens.shape[-2]} tokens do not fill grid {self.grid}")


# --------------------------------------------------------------------------- tokenisers
def patchify(x, patch: int):
    """``B x H x W x C`` -> ``B x (H/P * W/P) x (P*P*C)``, row-major patches."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"input {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    t = F.reshape(x, (b, gh, patch, gw, patch, c))
    t = F.transpose(t, (0, 1, 3, 2, 4, 5))
    return F.reshape(t, (b, gh * gw, patch * patch * c)), (gh, gw)


def spatial_patch_embed(x, patch: int, embed: Linear) -> TokenBatch:
    tokens, grid = patchify(x, patch)
    return TokenBatch(embed(tokens), grid)


def channel_groups(n_channels: int, n_groups: int) -> list[tuple[int, int]]:
    """Contiguous groups; the first ``C mod N`` groups get one extra channel."""
    if n_groups > n_channels or n_groups < 1:
        raise ValueError(f"cannot split {n_channels} channels into {n_groups} groups")
    base, extra = divmod(n_channels, n_groups)
    out, start = [], 0
    for g in range(n_groups):
        size = base + (g < extra)
        out.append((start, start + size))
        start += size
    return out


def group_average_matrix(n_channels: int, n_groups: int, dtype=None) -> np.ndarray:
    m = np.zeros((n_channels, n_groups), dtype=dtype or get_default_dtype())
    for g, (a, b) in enumerate(channel_groups(n_channels, n_groups)):
        m[a:b, g] = 1.0 / (b - a)
    return m


def spectral_group(x, n_spec: int) -> Tensor:
    """``B x H x W x C`` -> ``B x N_spec x (H*W)`` channel-group means."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    b, h, w, c = x.shape
    avg = F.matmul(F.reshape(x, (b, h * w, c)), Tensor(group_average_matrix(c, n_spec, x.dtype)))
    return F.transpose(avg, (0, 2, 1))


def spectral_tokenize(x, n_spec: int, embed: Linear) -> TokenBatch:
    return TokenBatch(embed(spectral_group(x, n_spec)), (1, n_spec))


def add_positional(tb: TokenBatch) -> TokenBatch:
    if tb.pos is None or tuple(tb.pos.shape) != tuple(tb.tokens.shape[-2:]):
        raise ShapeError(f"positional table {None if tb.pos is None else tb.pos.shape} "
                         f"does not match tokens {tb.tokens.shape}")
    return TokenBatch(tb.tokens + tb.pos, tb.grid, tb.pos)


# --------------------------------------------------------------------------- layers
class AttentionHead(Module):
    def __init__(self, dim: int, head_dim: int, rng, ssa_points: int | None):
        self.wq = parameter(trunc_normal(rng, (dim, head_dim)))
        self.wk = parameter(trunc_normal(rng, (dim, head_dim)))
        self.wv = parameter(trunc_normal(rng, (dim, head_dim)))
        dt = get_default_dtype()
        self.bq = parameter(np.zeros(head_dim, dt))
        self.bk = parameter(np.zeros(head_dim, dt))
        self.bv = parameter(np.zeros(head_dim, dt))
        if ssa_points is not None:
            self.offset_weight = parameter(np.zeros((head_dim, 2 * ssa_points), dt))
            self.offset_bias = parameter(np.zeros(2 * ssa_points, dt))

    def weights(self) -> HeadWeights:
        ssa = None
        if hasattr(self, "offset_weight"):
            ssa = SsaParams(self.offset_weight, self.offset_bias)
        return HeadWeights(self.wq, self.wk, self.wv, self.bq, self.bk, self.bv, ssa)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng):
        self.cfg = cfg
        pts = cfg.n_points if cfg.kind is AttentionKind.SSA else None
        self.heads = [AttentionHead(cfg.dim, cfg.head_dim, rng, pts) for _ in range(cfg.heads)]
        self.proj = Linear(cfg.dim, cfg.dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return multi_head(x, self.cfg, [h.weights() for h in self.heads], self.proj.weight, self.proj.bias)


class Block(Module):
    """Pre-norm transformer block: ``u' = MHSA(LN(u)) + u; out = FFN(LN(u')) + u'``."""

    def __init__(self, cfg: AttentionConfig, ffn_ratio: int, rng):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.fc1 = Linear(cfg.dim, ffn_ratio * cfg.dim, rng)
        self.fc2 = Linear(ffn_ratio * cfg.dim, cfg.dim, rng)

    @property
    def kind(self) -> AttentionKind:
        return self.attn.cfg.kind

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def transformer_block(tb: TokenBatch, block: Block) -> TokenBatch:
    return TokenBatch(block(tb.tokens), tb.grid, tb.pos)


class ViT(Module):
    """Either subnetwork. ``forward`` returns (features at the full-attention
    layers, final layer-normed tokens)."""

    def __init__(self, cfg: ViTConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h, w, c = cfg.in_shape
        d_in = cfg.patch * cfg.patch * c if cfg.kind == "spatial" else h * w
        self.patch_embed = Linear(d_in, cfg.dim, rng)
        self.pos_embed = parameter(trunc_normal(rng, (cfg.n_tokens, cfg.dim)))
        self.blocks = []
        for layer in range(1, cfg.depth + 1):
            kind = cfg.attention_kind(layer)
            acfg = AttentionConfig(cfg.dim, cfg.heads, kind, cfg.grid, cfg.n_points)
            self.blocks.append(Block(acfg, cfg.ffn_ratio, rng))
        self.norm = LayerNorm(cfg.dim)

    def embed(self, x) -> TokenBatch:
        if self.cfg.kind == "spatial":
            tb = spatial_patch_embed(x, self.cfg.patch, self.patch_embed)
        else:
            tb = spectral_tokenize(x, self.cfg.n_spec, self.patch_embed)
        tb.pos = self.pos_embed
        return add_positional(tb)

    def forward_tokens(self, tokens: Tensor):
        feats = []
        for layer, blk in enumerate(self.blocks, start=1):
            tokens = blk(tokens)
            if layer in self.cfg.schedule:
                feats.append(tokens)
        return feats, self.norm(tokens)

    def forward(self, x):
        x = _as_batch(x, self.cfg.in_shape)
        return self.forward_tokens(self.embed(x).tokens)

    def attention_kinds(self) -> list[AttentionKind]:
        return [b.kind for b in self.blocks]

    def layer_offsets(self, x, layer: int) -> np.ndarray:
        """Offsets predicted by every head of SSA ``layer`` (1-based) for the
        first sample, shape ``(heads, N, Np, 2)``."""
        if not 1 <= layer <= len(self.blocks):
            raise ValueError(f"layer {layer} outside 1..{len(self.blocks)}")
        blk = self.blocks[layer - 1]
        if blk.kind is not AttentionKind.SSA:
            raise ValueError(f"layer {layer} uses full attention; SSA layers are "
                             f"{[i for i, k in enumerate(self.attention_kinds(), 1) if k is AttentionKind.SSA]}")
        with no_grad():
            tokens = self.embed(_as_batch(x, self.cfg.in_shape)).tokens
            for b in self.blocks[:layer - 1]:
                tokens = b(tokens)
            u = blk.norm1(tokens)
            out = []
            for head in blk.attn.heads:
                hw = head.weights()
                q = F.matmul(u, hw.wq) + hw.bq
                out.append(predict_offsets(q, hw.ssa).data[0])
        return np.stack(out)


def _as_batch(x, in_shape) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if x.ndim == 3:
        x = F.reshape(x, (1, *x.shape))
    if tuple(x.shape[1:]) != tuple(in_shape):
        raise ShapeError(f"input {x.shape[1:]} does not match configured {tuple(in_shape)}")
    return x


@dataclass
class SigmaConfig:
    """Both subnetworks over one input shape."""

    in_shape: tuple[int, int, int] = (64, 64, 100)
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_ratio: int = 4
    patch: int = 8
    n_spec: int = 100
    n_points: int = 8
    use_ssa: bool = True
    seed: int = 0
    spectral: bool = True

    def spatial(self) -> ViTConfig:
        return ViTConfig("spatial", self.depth, self.dim, self.heads, self.ffn_ratio, self.patch,
                         self.n_spec, self.in_shape, self.n_points, self.use_ssa, seed=self.seed)

    def spectral_cfg(self) -> ViTConfig:
        return ViTConfig("spectral", self.depth, self.dim, self.heads, self.ffn_ratio, self.patch,
                         self.n_spec, self.in_shape, self.n_points, self.use_ssa, seed=self.seed + 1)


class SigmaBackbone(Module):
    """Spatial ViT plus (optionally) spectral ViT sharing one input."""

    def __init__(self, cfg: SigmaConfig):
        self.cfg = cfg
        self.spat = ViT(cfg.spatial())
        self.spec = ViT(cfg.spectral_cfg()) if cfg.spectral else None

    def forward_spat(self, x):
        return self.spat(x)

    def forward_spec(self, x):
        if self.spec is None:
            raise RuntimeError("backbone was built without the spectral subnetwork")
        return self.spec(x)


# --------------------------------------------------------------------------- fine-tuning adaptation
def interp_matrix(n_src: int, n_dst: int, align_corners: bool = True, dtype=np.float64) -> np.ndarray:
    """``n_dst x n_src`` linear-interpolation weights along one axis."""
    if n_src == n_dst:
        return np.eye(n_src, dtype=dtype)
    if align_corners:
        pos = np.zeros(n_dst) if n_dst == 1 else np.linspace(0.0, n_src - 1, n_dst)
    else:
        pos = np.clip((np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5, 0.0, n_src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    m = np.zeros((n_dst, n_src), dtype=dtype)
    m[np.arange(n_dst), lo] += 1.0 - frac
    m[np.arange(n_dst), hi] += frac
    return m


def interpolate_pos_embed(table: np.ndarray, n_dst: int, mode: str = "spatial") -> np.ndarray:
    """Resample an ``N x D`` positional table to ``n_dst`` rows.

    ``spatial`` treats rows as a square grid (bilinear); ``spectral`` as a line.
    """
    table = np.asarray(table)
    n_src, d = table.shape
    if n_src == n_dst:
        return table.copy()
    if mode == "spectral":
        return (interp_matrix(n_src, n_dst) @ table).astype(table.dtype)
    if mode != "spatial":
        raise ValueError(f"unknown mode {mode!r}")
    s, t = int(round(n_src ** 0.5)), int(round(n_dst ** 0.5))
    if s * s != n_src or t * t != n_dst:
        raise ValueError(f"spatial interpolation needs square sizes, got {n_src} -> {n_dst}")
    m = interp_matrix(s, t)
    grid = table.reshape(s, s, d)
    out = np.einsum("ai,bj,ijd->abd", m, m, grid)
    return out.reshape(t * t, d).astype(table.dtype)


def adapt_patch_embed(weight: np.ndarray, c_pretrain: int, c_finetune: int, target_shape=None,
                      seed: int = 0, sigma: float = INIT_SIGMA):
    """Pass pre-trained embedding weights through, or reinitialise on a channel mismatch.

    Returns ``(weight, reinitialized)``.
    """
    if c_pretrain == c_finetune and (target_shape is None or tuple(target_shape) == weight.shape):
        return weight, False
    shape = target_shape if target_shape is not None else (weight.shape[0] // c_pretrain * c_finetune, weight.shape[1])
    return trunc_normal(np.random.default_rng(seed), shape, sigma, dtype=weight.dtype), True

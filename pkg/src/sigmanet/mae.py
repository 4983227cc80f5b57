"""Masked-autoencoder pre-training for the spatial and spectral subnetworks."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_cube_batch
from .attention import AttentionConfig, AttentionKind
from .autodiff import functional as F
from .autodiff.tensor import Tensor, no_grad, set_default_dtype, get_default_dtype
from .backbone import Block, ViT, ViTConfig, patchify, spectral_group
from .checkpoint import save_checkpoint
from .data import HsiCube, preprocess, synth_random_cube
from .nn import AdamW, LayerNorm, Linear, Module, parameter, trunc_normal

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    n: int
    ratio: float
    masked: np.ndarray
    visible: np.ndarray
    seed: int | None = None


def mask_count(n: int, ratio: float) -> int:
    # round half up
    return int(math.floor(ratio * n + 0.5))


def make_mask(n: int, ratio: float, seed=None) -> MaskPlan:
    """Uniformly mask ``round(ratio * n)`` of ``n`` tokens, deterministically per seed."""
    if not 0 < ratio < 1 or n < 2:
        raise ValueError(f"need 0 < ratio < 1 and n >= 2, got ratio={ratio}, n={n}")
    k = mask_count(n, ratio)
    if k == 0 or k == n:
        raise ValueError(f"ratio {ratio} masks {k} of {n} tokens")
    perm = np.random.default_rng(seed).permutation(n)
    return MaskPlan(n, ratio, np.sort(perm[:k]), np.sort(perm[k:]), seed)


@dataclass
class PretrainConfig:
    kind: str = "spatial"
    mask_ratio: float = 0.75
    steps: int = 200
    batch: int = 4
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    channels: int = 100
    source_channels: int = 175
    size: int = 64
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 8
    n_spec: int = 100
    decoder_depth: int = 1
    decoder_dim: int = 32
    decoder_heads: int = 4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.channels > self.source_channels:
            raise ValueError("channels exceeds source channel count")
        if self.kind not in ("spatial", "spectral"):
            raise ValueError(f"unknown kind {self.kind!r}")

    def vit(self) -> ViTConfig:
        return ViTConfig(self.kind, self.depth, self.dim, self.heads, 4, self.patch, self.n_spec,
                         (self.size, self.size, self.channels), use_ssa=False, seed=self.seed)


class MAE(Module):
    """ViT encoder over visible tokens plus a shallow full-sequence decoder."""

    def __init__(self, cfg: PretrainConfig):
        self.cfg = cfg
        vcfg = cfg.vit()
        self.encoder = ViT(vcfg)
        rng = np.random.default_rng(cfg.seed + 7)
        if cfg.kind == "spatial":
            target_dim = cfg.patch * cfg.patch * cfg.channels
        else:
            target_dim = cfg.size * cfg.size
        self.n_tokens = vcfg.n_tokens
        self.decoder_embed = Linear(cfg.dim, cfg.decoder_dim, rng)
        self.mask_token = parameter(trunc_normal(rng, (1, 1, cfg.decoder_dim)))
        self.decoder_pos = parameter(trunc_normal(rng, (vcfg.n_tokens, cfg.decoder_dim)))
        dec = AttentionConfig(cfg.decoder_dim, cfg.decoder_heads, AttentionKind.FULL)
        self.decoder_blocks = [Block(dec, 4, rng) for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(cfg.decoder_dim)
        self.decoder_pred = Linear(cfg.decoder_dim, target_dim, rng)

    @property
    def prefix(self) -> str:
        return "spat" if self.cfg.kind == "spatial" else "spec"

    def target(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_default_dtype()))
        if self.cfg.kind == "spatial":
            return patchify(x, self.cfg.patch)[0]
        return spectral_group(x, self.cfg.n_spec)

    def encode(self, x, plan: MaskPlan | None) -> Tensor:
        tokens = self.encoder.embed(x).tokens
        if plan is not None:
            tokens = F.take(tokens, plan.visible, axis=1)
        return self.encoder.forward_tokens(tokens)[1]

    def decode(self, latent: Tensor, plan: MaskPlan) -> Tensor:
        d = self.decoder_embed(latent)
        b = d.shape[0]
        fill = F.broadcast_to(self.mask_token, (b, len(plan.masked), d.shape[-1]))
        seq = F.concat([d, fill], axis=1)
        order = np.argsort(np.concatenate([plan.visible, plan.masked]), kind="stable")
        seq = F.take(seq, order, axis=1) + self.decoder_pos
        for blk in self.decoder_blocks:
            seq = blk(seq)
        return self.decoder_pred(self.decoder_norm(seq))

    def forward(self, x, plan: MaskPlan) -> Tensor:
        return self.decode(self.encode(x, plan), plan)

    def export_state(self) -> dict:
        state = {}
        for name, p in self.named_parameters():
            if name.startswith("encoder."):
                state[f"{self.prefix}.{name[len('encoder.'):]}"] = p.data.copy()
            else:
                state[f"decoder.{name}"] = p.data.copy()
        return state


def masked_mse(pred: Tensor, target: Tensor, plan: MaskPlan) -> Tensor:
    """Mean squared error over the masked tokens only."""
    if len(plan.masked) == 0 or len(plan.visible) == 0:
        raise ValueError("plan must mask some but not all tokens")
    p = F.take(pred, plan.masked, axis=1)
    t = F.take(target, plan.masked, axis=1)
    return F.mse(p, t.data)


def _check_plan(model: MAE, plan: MaskPlan):
    if plan.n != model.n_tokens:
        raise ValueError(f"plan covers {plan.n} tokens, model has {model.n_tokens}")


def mae_spatial_step(batch, model: MAE, plan: MaskPlan) -> Tensor:
    if model.cfg.kind != "spatial":
        raise ValueError("model is not a spatial MAE")
    _check_plan(model, plan)
    return masked_mse(model(batch, plan), model.target(batch), plan)


def mae_spectral_step(batch, model: MAE, plan: MaskPlan) -> Tensor:
    if model.cfg.kind != "spectral":
        raise ValueError("model is not a spectral MAE")
    _check_plan(model, plan)
    return masked_mse(model(batch, plan), model.target(batch), plan)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    eval_initial: float | None = None
    eval_final: float | None = None
    checkpoint: str | None = None
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        with open(out / "loss.csv", "w") as fh:
            fh.write("step,loss\n")
            for step, loss in self.losses:
                fh.write(f"{step},{loss!r}\n")
        lines = [f"final_loss = {self.losses[-1][1]!r}" if self.losses else "final_loss = none",
                 f"eval_initial = {self.eval_initial!r}",
                 f"eval_final = {self.eval_final!r}",
                 f"checkpoint = {Path(self.checkpoint).name if self.checkpoint else None}"]
        lines += [f"config.{k} = {v}" for k, v in self.config.items()]
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
        # kept apart so the other artifacts stay byte-identical across runs
        (out / "timing.txt").write_text(f"wall_time_s = {self.wall_time:.3f}\n")


def synthetic_stream(cfg: PretrainConfig):
    """Endless synthetic DN cubes standing in for a pre-training corpus."""
    i = 0
    while True:
        yield synth_random_cube(cfg.size, cfg.size, cfg.source_channels, seed=cfg.seed * 100003 + i)
        i += 1


def _prepare_batch(cubes, cfg: PretrainConfig, rng) -> np.ndarray:
    arrs = []
    for cube in cubes:
        if not isinstance(cube, HsiCube):
            cube = HsiCube(cube)
        arrs.append(preprocess(cube, cfg.channels, rng).data)
    return np.stack(arrs).astype(get_default_dtype())


def run_pretrain(cfg: PretrainConfig, data=None, out_dir=None, model: MAE | None = None) -> tuple[MAE, TrainReport]:
    """Train an MAE: select channels, normalise, tokenise, mask, step, update."""
    set_default_dtype(cfg.dtype)
    model = model or MAE(cfg)
    data = iter(synthetic_stream(cfg) if data is None else data)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(config=dataclasses.asdict(cfg))
    t0 = time.perf_counter()

    first = list(islice(data, cfg.batch))
    if not first:
        raise ValueError("empty data stream")
    eval_x = _prepare_batch(first, cfg, np.random.default_rng(cfg.seed + 1))
    eval_plan = make_mask(model.n_tokens, cfg.mask_ratio, seed=cfg.seed + 2)

    def evaluate() -> float:
        with no_grad():
            return float(masked_mse(model(eval_x, eval_plan), model.target(eval_x), eval_plan).item())

    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    pending = first
    if cfg.steps > 0:
        report.eval_initial = evaluate()
    for step in range(cfg.steps):
        cubes = pending or list(islice(data, cfg.batch))
        pending = None
        if not cubes:
            log.warning("data stream exhausted after %d steps", step)
            break
        x = _prepare_batch(cubes, cfg, rng)
        plan = make_mask(model.n_tokens, cfg.mask_ratio, seed=(cfg.seed, step))
        loss = masked_mse(model(x, plan), model.target(x), plan)
        value = float(loss.item())
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at step {step} (lr={cfg.lr}, batch range "
                                        f"[{x.min():.3g}, {x.max():.3g}])")
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.losses.append((step, value))
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, value)
    if cfg.steps > 0:
        report.eval_final = evaluate()
    report.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.sgmc"
        save_checkpoint(model.export_state(), ckpt)
        report.checkpoint = str(ckpt)
        report.write(out)
    return model, report


class MaskedAutoencoder(BaseEstimator):
    """Estimator wrapper around :func:`run_pretrain`.

    ``fit`` takes a sequence of raw DN cubes (``HsiCube`` or ``H x W x C``
    arrays); ``transform`` returns final encoder tokens for normalised input.
    """

    def __init__(self, kind="spatial", mask_ratio=0.75, steps=200, batch=4, lr=1.5e-4,
                 weight_decay=0.05, channels=100, depth=4, dim=64, heads=4, patch=8, n_spec=100,
                 decoder_depth=1, decoder_dim=32, seed=0, dtype="float32"):
        self.kind = kind
        self.mask_ratio = mask_ratio
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.weight_decay = weight_decay
        self.channels = channels
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.patch = patch
        self.n_spec = n_spec
        self.decoder_depth = decoder_depth
        self.decoder_dim = decoder_dim
        self.seed = seed
        self.dtype = dtype

    def _config(self, cubes) -> PretrainConfig:
        h, w, c = cubes[0].shape
        if h != w:
            raise ValueError(f"pre-training tiles must be square, got {h}x{w}")
        return PretrainConfig(kind=self.kind, mask_ratio=self.mask_ratio, steps=self.steps, batch=self.batch,
                              lr=self.lr, weight_decay=self.weight_decay, channels=self.channels,
                              source_channels=c, size=h, depth=self.depth, dim=self.dim, heads=self.heads,
                              patch=self.patch, n_spec=self.n_spec, decoder_depth=self.decoder_depth,
                              decoder_dim=self.decoder_dim, seed=self.seed, dtype=self.dtype)

    def fit(self, X, y=None):
        cubes = check_cube_batch(X)

        def cycle():
            while True:
                yield from cubes

        cfg = self._config(cubes)
        self.model_, self.report_ = run_pretrain(cfg, cycle())
        self.loss_curve_ = [loss for _, loss in self.report_.losses]
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "model_")
        arr = np.stack([c.data for c in check_cube_batch(X)]).astype(get_default_dtype())
        with no_grad():
            return self.model_.encode(arr, None).data

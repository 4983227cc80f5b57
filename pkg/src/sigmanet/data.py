"""Hyperspectral cubes: binary I/O, tiling, channel selection, normalisation
and synthetic generators with known ground truth."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"HSIG"
VERSION = 1
DN_SCALE = 4000.0
_HEADER = struct.Struct("<4sIIIII")
_MAX_ELEMENTS = 2 ** 34


class HsigError(ValueError):
    """Base class for malformed HSIG files."""


class BadMagicError(HsigError):
    pass


class TruncatedError(HsigError):
    pass


class DimensionOverflowError(HsigError):
    pass


@dataclass
class HsiCube:
    """An ``H x W x C`` float32 cube with free-form string metadata."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or 0 in self.data.shape:
            raise ValueError(f"cube must be H x W x C with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    H = property(lambda self: self.data.shape[0])
    W = property(lambda self: self.data.shape[1])
    C = property(lambda self: self.data.shape[2])

    def with_data(self, data, **meta) -> "HsiCube":
        return HsiCube(data, {**self.meta, **meta})


@dataclass
class MixtureGroundTruth:
    endmembers: np.ndarray  # C_a x C
    abundances: np.ndarray  # H x W x C_a
    noise_sigma: float


# --------------------------------------------------------------------------- I/O
def _encode_meta(meta: dict) -> bytes:
    for k, v in meta.items():
        if "\n" in k or "=" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot be encoded")
    return "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")


def _decode_meta(raw: bytes) -> dict:
    meta = {}
    for line in raw.decode("utf-8").split("\n"):
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return meta


def dumps_cube(cube: HsiCube) -> bytes:
    h, w, c = cube.shape
    meta = _encode_meta(cube.meta)
    planes = np.transpose(cube.data, (2, 0, 1)).astype("<f4")
    return _HEADER.pack(MAGIC, VERSION, h, w, c, len(meta)) + meta + planes.tobytes()


def loads_cube(buf: bytes) -> HsiCube:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError("file ends inside the header")
    _, version, h, w, c, meta_len = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise HsigError(f"unsupported HSIG version {version}")
    if h == 0 or w == 0 or c == 0:
        raise DimensionOverflowError(f"zero dimension in header ({h}, {w}, {c})")
    n = h * w * c
    if n > _MAX_ELEMENTS:
        raise DimensionOverflowError(f"header dims ({h}, {w}, {c}) exceed the element limit")
    start = _HEADER.size + meta_len
    if len(buf) < start + 4 * n:
        raise TruncatedError(f"payload has {len(buf) - start} bytes, expected {4 * n}")
    meta = _decode_meta(buf[_HEADER.size:start])
    planes = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(c, h, w)
    return HsiCube(np.transpose(planes, (1, 2, 0)).astype(np.float32), meta)


def write_cube(cube: HsiCube, path) -> None:
    Path(path).write_bytes(dumps_cube(cube))


def read_cube(path) -> HsiCube:
    return loads_cube(Path(path).read_bytes())


# --------------------------------------------------------------------------- preprocessing
def clip_patches(cube: HsiCube, size: int, stride: int | None = None) -> list[HsiCube]:
    """Row-major tiles of ``size x size``; trailing remainders are dropped."""
    stride = size if stride is None else stride
    if size < 1 or stride < 1:
        raise ValueError("size and stride must be >= 1")
    if size > min(cube.H, cube.W):
        raise ValueError(f"patch size {size} exceeds cube extent {cube.H}x{cube.W}")
    out = []
    for r in range(0, cube.H - size + 1, stride):
        for c in range(0, cube.W - size + 1, stride):
            out.append(cube.with_data(cube.data[r:r + size, c:c + size], row=r, col=c))
    return out


def select_channels(cube: HsiCube, n_channels: int, seed=None, rng: np.random.Generator | None = None) -> HsiCube:
    """Keep a random contiguous run of ``n_channels`` bands, in order."""
    if n_channels > cube.C or n_channels < 1:
        raise ValueError(f"cannot select {n_channels} channels from {cube.C}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    start = int(rng.integers(0, cube.C - n_channels + 1))
    return cube.with_data(cube.data[:, :, start:start + n_channels], channel_start=start)


def normalize_dn(cube: HsiCube) -> HsiCube:
    """Divide by 4000 and flag the cube; the pipeline refuses flagged input."""
    return cube.with_data(cube.data / np.float32(DN_SCALE), normalized="dn4000")


def preprocess(cube: HsiCube, n_channels: int, rng: np.random.Generator) -> HsiCube:
    if cube.meta.get("normalized"):
        raise ValueError("cube is already normalised")
    return normalize_dn(select_channels(cube, n_channels, rng=rng))


# --------------------------------------------------------------------------- synthetic data
def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    shape = v.shape
    v = v.reshape(-1, shape[-1])
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, v.shape[1] + 1)
    rho = (u - css / k > 0).sum(axis=1)
    theta = css[np.arange(len(v)), rho - 1] / rho
    return np.maximum(v - theta[:, None], 0.0).reshape(shape)


def _smooth_fields(rng, h, w, k, sigma):
    f = rng.normal(size=(h, w, k))
    f = gaussian_filter(f, sigma=(sigma, sigma, 0), mode="wrap")
    return f / (f.std(axis=(0, 1), keepdims=True) + 1e-12)


def synth_endmembers(n_members: int, n_channels: int, rng: np.random.Generator) -> np.ndarray:
    steps = rng.normal(0.0, 0.08, size=(n_members, n_channels))
    walks = rng.uniform(0.0, 0.3, size=(n_members, 1)) + np.cumsum(steps, axis=1)
    walks = np.maximum(gaussian_filter(walks, sigma=(0, 2.0), mode="nearest"), 0.0)
    # comparable brightness across materials; shape carries the identity
    brightness = rng.uniform(0.3, 0.6, size=(n_members, 1))
    return walks * brightness / np.maximum(walks.mean(axis=1, keepdims=True), 1e-12)


def synth_mixture_cube(h: int, w: int, c: int, n_members: int, noise_sigma: float = 0.0, seed=0,
                       smoothness: float = 3.0, spread: float = 0.6, pure: bool = False):
    """Linear-mixture cube ``X = A E + noise`` with its ground truth.

    Abundances are smooth random fields projected onto the simplex, so many
    pixels sit on faces or vertices of it. ``pure=True`` snaps every pixel to
    its dominant endmember.
    """
    if n_members < 2 or c < n_members:
        raise ValueError("need 2 <= n_members <= c")
    rng = np.random.default_rng(seed)
    E = synth_endmembers(n_members, c, rng)
    fields = _smooth_fields(rng, h, w, n_members, smoothness)
    A = project_simplex(spread * fields + 1.0 / n_members)
    if pure:
        A = np.eye(n_members)[A.argmax(axis=-1)]
    X = A.reshape(-1, n_members) @ E
    if noise_sigma > 0:
        X = X + rng.normal(0.0, noise_sigma, size=X.shape)
    meta = {"kind": "mixture", "seed": seed, "value_type": "reflectance",
            "endmembers": n_members, "noise": noise_sigma}
    cube = HsiCube(X.reshape(h, w, c), meta)
    return cube, MixtureGroundTruth(E, A, float(noise_sigma))


def synth_random_cube(h: int, w: int, c: int, seed=0, smoothness: float = 2.0) -> HsiCube:
    """Band-correlated DN-like cube with values in [0, 4000]."""
    rng = np.random.default_rng(seed)
    n_basis = 6
    basis = _smooth_fields(rng, h, w, n_basis, smoothness)
    spectra = gaussian_filter(rng.normal(size=(n_basis, c)), sigma=(0, max(c / 20, 1.0)), mode="nearest")
    spectra /= spectra.std(axis=1, keepdims=True) + 1e-12
    mean_curve = 2000.0 + 600.0 * np.sin(np.linspace(0, np.pi, c))
    x = mean_curve + 250.0 * np.tensordot(basis, spectra, axes=(2, 0)) / np.sqrt(n_basis)
    x = np.clip(x, 0.0, DN_SCALE)
    return HsiCube(x, {"kind": "random", "seed": seed, "value_type": "DN"})

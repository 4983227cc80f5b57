"""``SGMC`` checkpoint files and loading with fine-tuning adaptation.

Layout (little-endian)::

    "SGMC" | version u32 | count u32
    count x [name_len u32 | name utf-8 | ndim u32 | dims u32*ndim | dtype u8 | offset u64 | nbytes u64]
    raw buffers (offsets are relative to the first buffer byte)

dtype codes: 0 = float32, 1 = float64.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .backbone import adapt_patch_embed, interpolate_pos_embed

MAGIC = b"SGMC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(state: dict) -> bytes:
    header = [MAGIC, struct.pack("<II", VERSION, len(state))]
    buffers, offset = [], 0
    for name, arr in state.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        enc = name.encode("utf-8")
        header.append(struct.pack("<I", len(enc)) + enc)
        header.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        header.append(struct.pack("<BQQ", code, offset, len(raw)))
        buffers.append(raw)
        offset += len(raw)
    return b"".join(header) + b"".join(buffers)


def loads_checkpoint(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        records = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            code, off, nbytes = struct.unpack_from("<BQQ", buf, pos)
            pos += 17
            records.append((name, dims, code, off, nbytes))
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint manifest") from exc
    state = OrderedDict()
    for name, dims, code, off, nbytes in records:
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dt.itemsize or pos + off + nbytes > len(buf):
            raise CheckpointError(f"{name}: payload size mismatch or truncation")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos + off)
        state[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
    return state


def save_checkpoint(state: dict, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(state))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return loads_checkpoint(Path(path).read_bytes())


def load_adapted(module, state: dict, seed: int = 0) -> list[tuple[str, str]]:
    """Copy ``state`` into ``module``, adapting what fine-tuning allows.

    Mismatched embedding weights are reinitialised, mismatched positional
    tables are interpolated, anything else that does not fit is skipped.
    Returns ``(name, action)`` for every entry that was not loaded verbatim.
    """
    own = dict(module.named_parameters())
    report = []
    for name, value in state.items():
        if name not in own:
            report.append((name, "skipped: not in model"))
            continue
        target = own[name]
        if tuple(value.shape) == target.shape:
            target.data = np.array(value, dtype=target.dtype)
            continue
        if name.endswith("patch_embed.weight"):
            w, _ = adapt_patch_embed(value, value.shape[0], target.shape[0], target.shape, seed=seed)
            target.data = w.astype(target.dtype)
            report.append((name, f"reinitialized: {tuple(value.shape)} -> {target.shape}"))
        elif name.endswith("pos_embed") and value.shape[1] == target.shape[1]:
            mode = "spectral" if name.startswith("spec") else "spatial"
            target.data = interpolate_pos_embed(value, target.shape[0], mode).astype(target.dtype)
            report.append((name, f"interpolated: {value.shape[0]} -> {target.shape[0]} ({mode})"))
        else:
            report.append((name, f"skipped: shape {tuple(value.shape)} vs {target.shape}"))
    for name in own:
        if name not in state:
            report.append((name, "missing: kept initialization"))
    return report

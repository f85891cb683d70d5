"""Model checkpoints (DMCK format).

``DMCK`` magic, u16 version, then parameter records until end of file, each
``u32 name length | utf-8 name | u32 rank | u32 dims... | f32 payload``; all
little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .unet import UNet, UNetConfig

MAGIC = b"DMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_params(params: dict[str, Tensor | np.ndarray]) -> bytes:
    out = bytearray(MAGIC + struct.pack("<H", VERSION))
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def decode_params(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {bytes(buf[:4])!r}")
    if len(buf) < 6:
        raise CheckpointError("checkpoint header truncated")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    pos, params = 6, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"payload of {name!r} truncated")
            params[name] = np.frombuffer(buf, "<f4", count, pos).astype(np.float32).reshape(dims)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"checkpoint truncated at byte {pos}") from exc
    return params


def save_checkpoint(model: UNet, path: str | Path) -> int:
    blob = encode_params(model.params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return len(blob)


def load_checkpoint(path: str | Path, cfg: UNetConfig) -> UNet:
    arrays = decode_params(Path(path).read_bytes())
    model = UNet(cfg)
    missing = set(model.params) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)[:5]}...")
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
        p.data = arrays[name].copy()
    return model

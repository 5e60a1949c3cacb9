"""Binary primitive-set (PRM1) and packed-tensor (PKT1) files, plus PNG/PFM images.

All writers go through a temp file and ``os.replace`` so a crashed run never
leaves a half-written output behind.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .diffusion import Normalization, PackedTensor
from .primitives import PrimitiveSet

PRM_MAGIC = b"PRM1"
PKT_MAGIC = b"PKT1"


class FileFormatError(ValueError):
    """Malformed or truncated binary file."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_bytes()


def _take(buf: bytes, off: int, n: int, path) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise FileFormatError(f"{path}: truncated file ({len(buf)} bytes, need at least {off + n})")
    return buf[off:off + n], off + n


# --------------------------------------------------------------------------- PRM1


def save_primitive_set(pset: PrimitiveSet, path) -> None:
    pset.validate()
    K, S, W = pset.K, pset.S, pset.grid_width
    kin = np.concatenate([pset.positions, pset.rotations, pset.base_scale, pset.delta_scale], axis=1)
    parts = [
        PRM_MAGIC,
        struct.pack("<III", K, S, W),
        kin.astype("<f4").tobytes(),
        pset.color.astype("<f4").tobytes(),
        pset.density.astype("<f4").tobytes(),
    ]
    atomic_write_bytes(path, b"".join(parts))


def load_primitive_set(path) -> PrimitiveSet:
    buf = _read(path)
    magic, off = _take(buf, 0, 4, path)
    if magic != PRM_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected 'PRM1'")
    head, off = _take(buf, off, 12, path)
    K, S, W = struct.unpack("<III", head)
    sizes = (K * 13, K * 3 * S ** 3, K * S ** 3)
    arrays = []
    for n in sizes:
        raw, off = _take(buf, off, 4 * n, path)
        arrays.append(np.frombuffer(raw, dtype="<f4").astype(np.float64))
    if off != len(buf):
        raise FileFormatError(f"{path}: {len(buf) - off} trailing bytes")
    kin = arrays[0].reshape(K, 13)
    pset = PrimitiveSet(
        positions=kin[:, 0:3].copy(),
        rotations=kin[:, 3:7].copy(),
        base_scale=kin[:, 7:10].copy(),
        delta_scale=kin[:, 10:13].copy(),
        color=arrays[1].reshape(K, 3, S, S, S),
        density=arrays[2].reshape(K, S, S, S),
        grid_width=W,
    )
    return pset.validate()


# --------------------------------------------------------------------------- PKT1


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_packed(tensor: PackedTensor, path, norm: Normalization = Normalization(), extra: dict | None = None) -> None:
    """PKT1 tensor plus a ``<path>.json`` sidecar holding the normalization constants."""
    body = PKT_MAGIC + struct.pack("<II", tensor.W, tensor.S) + tensor.data.astype("<f4").tobytes()
    atomic_write_bytes(path, body)
    meta = {"W": tensor.W, "S": tensor.S, "normalization": norm.to_dict()}
    if extra:
        meta.update(extra)
    atomic_write_text(_sidecar(path), json.dumps(meta, indent=1))


def load_packed(path) -> tuple[PackedTensor, Normalization]:
    buf = _read(path)
    magic, off = _take(buf, 0, 4, path)
    if magic != PKT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected 'PKT1'")
    head, off = _take(buf, off, 8, path)
    W, S = struct.unpack("<II", head)
    n = (W * S) ** 2 * 7 * S
    raw, off = _take(buf, off, 4 * n, path)
    if off != len(buf):
        raise FileFormatError(f"{path}: {len(buf) - off} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(W * S, W * S, 7 * S)
    if not np.all(np.isfinite(data)):
        raise FileFormatError(f"{path}: non-finite tensor entries")
    side = _sidecar(path)
    norm = Normalization()
    if side.is_file():
        norm = Normalization(**json.loads(side.read_text(encoding="utf-8"))["normalization"])
    return PackedTensor(data, W, S), norm


# --------------------------------------------------------------------------- images


def save_png(image: np.ndarray, path) -> None:
    """Float image in [0, 1] (H, W) or (H, W, 3) as 8-bit PNG."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(img).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_png(path) -> np.ndarray:
    with Image.open(_existing(path)) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def _existing(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def save_pfm(image: np.ndarray, path) -> None:
    """Little-endian float32 PFM (scale -1), rows stored bottom to top."""
    img = np.asarray(image, dtype=np.float64)
    color = img.ndim == 3
    if color and img.shape[2] != 3:
        raise ValueError(f"PFM needs 1 or 3 channels, got {img.shape}")
    H, W = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{W} {H}\n-1.0\n".encode("ascii")
    atomic_write_bytes(path, header + np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    buf = _read(path)
    lines = buf.split(b"\n", 3)
    if len(lines) < 4 or lines[0] not in (b"PF", b"Pf"):
        raise FileFormatError(f"{path}: not a PFM file")
    color = lines[0] == b"PF"
    W, H = map(int, lines[1].split())
    scale = float(lines[2])
    dtype = "<f4" if scale < 0 else ">f4"
    C = 3 if color else 1
    n = W * H * C
    if len(lines[3]) < 4 * n:
        raise FileFormatError(f"{path}: truncated PFM data")
    data = np.frombuffer(lines[3][:4 * n], dtype=dtype).astype(np.float64)
    data = data.reshape((H, W, 3) if color else (H, W))
    return data[::-1].copy()

"""Bit-exact file formats: cubes, masks, checkpoints, PGM maps, CSV tables.

All integers are little-endian. Every writer goes through a temp file in the
same directory followed by os.replace, so a crash never leaves a partial
artifact under the target name. Readers reject malformed input with the
first offending byte offset rather than guessing.

Layouts:
  HSC1  "HSC1" | u32 H W C | H*W*C f32, index order ((h*W + w)*C + c)
  MSK1  "MSK1" | u32 H W   | H*W f32, row-major
  S2CK  "S2CK" | u32 version | u32 count | per tensor: u16 name length,
        name bytes, u8 rank, u32 dims, f32 payload | u32 CRC32 of all
        preceding bytes
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor
from .network import ModelParams
from .optics import CodedMask, HyperCube

CHECKPOINT_VERSION = 1
# refuse absurd headers before allocating (bytes of payload)
MAX_PAYLOAD = 1 << 33


class FileFormatError(ValueError):
    pass


def _atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _need(buf: bytes, offset: int, count: int, what: str) -> None:
    if offset + count > len(buf):
        raise FileFormatError(
            f"truncated {what} at offset {offset}: need {count} bytes, have {len(buf) - offset}")


def _check_magic(buf: bytes, magic: bytes, path: str) -> None:
    _need(buf, 0, 4, "header")
    if buf[:4] != magic:
        raise FileFormatError(
            f"{path}: bad magic {buf[:4]!r} at offset 0, expected {magic!r}")


def write_cube(path: str, cube: HyperCube) -> None:
    header = b"HSC1" + struct.pack("<III", cube.h, cube.w, cube.n_lambda)
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    _atomic_write(path, header + payload)


def read_cube(path: str) -> HyperCube:
    with open(path, "rb") as f:
        buf = f.read()
    _check_magic(buf, b"HSC1", path)
    _need(buf, 4, 12, "dimension header")
    h, w, c = struct.unpack_from("<III", buf, 4)
    if min(h, w, c) < 1 or 4 * h * w * c > MAX_PAYLOAD:
        raise FileFormatError(f"{path}: dimension overflow {h}x{w}x{c} at offset 4")
    want = 16 + 4 * h * w * c
    if len(buf) != want:
        raise FileFormatError(
            f"{path}: payload length {len(buf) - 16} at offset 16, expected {want - 16}")
    data = np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w, c)
    return HyperCube(data.copy())


def write_mask(path: str, mask: CodedMask) -> None:
    header = b"MSK1" + struct.pack("<II", mask.h, mask.w)
    _atomic_write(path, header + np.ascontiguousarray(mask.data, dtype="<f4").tobytes())


def read_mask(path: str) -> CodedMask:
    with open(path, "rb") as f:
        buf = f.read()
    _check_magic(buf, b"MSK1", path)
    _need(buf, 4, 8, "dimension header")
    h, w = struct.unpack_from("<II", buf, 4)
    if min(h, w) < 1 or 4 * h * w > MAX_PAYLOAD:
        raise FileFormatError(f"{path}: dimension overflow {h}x{w} at offset 4")
    want = 12 + 4 * h * w
    if len(buf) != want:
        raise FileFormatError(
            f"{path}: payload length {len(buf) - 12} at offset 12, expected {want - 12}")
    return CodedMask(np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w).copy())


def write_checkpoint(path: str, params: ModelParams) -> None:
    parts = [b"S2CK", struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FileFormatError(f"checkpoint: name too long ({len(nb)} bytes)")
        # ascontiguousarray would promote rank-0 to (1,) and lose the rank
        arr = np.asarray(t.data, dtype="<f4")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    _atomic_write(path, body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        buf = f.read()
    _check_magic(buf, b"S2CK", path)
    _need(buf, 4, 8, "checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(
            f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    _need(buf, len(buf) - 4, 4, "CRC trailer")
    stored = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FileFormatError(
            f"{path}: CRC mismatch, stored {stored:#010x} vs computed {actual:#010x}")
    params = ModelParams()
    off = 12
    body = buf[:-4]
    for i in range(count):
        _need(body, off, 2, f"tensor {i} name length")
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        _need(body, off, nlen, f"tensor {i} name")
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        _need(body, off, 1, f"tensor {name!r} rank")
        rank = body[off]
        off += 1
        _need(body, off, 4 * rank, f"tensor {name!r} dims")
        shape = struct.unpack_from(f"<{rank}I", body, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if 4 * size > MAX_PAYLOAD:
            raise FileFormatError(f"{path}: tensor {name!r} dimension overflow {shape}")
        _need(body, off, 4 * size, f"tensor {name!r} payload")
        data = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name in params:
            raise FileFormatError(f"{path}: duplicate tensor name {name!r}")
        params.add(name, Tensor(data.copy(), requires_grad=True))
    if off != len(body):
        raise FileFormatError(
            f"{path}: {len(body) - off} trailing bytes at offset {off}")
    return params


def write_pgm(path: str, img: np.ndarray) -> None:
    """8-bit P5 image, linearly mapped from [0, max]; the max goes into a
    sidecar text file so absolute values stay recoverable."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise FileFormatError(f"write_pgm: rank {arr.ndim}, expected 2")
    arr = np.maximum(arr, 0.0)
    mx = float(arr.max()) if arr.size else 0.0
    scaled = np.zeros(arr.shape, dtype=np.uint8) if mx <= 0 else \
        np.round(arr / mx * 255.0).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, header + scaled.tobytes())
    _atomic_write(f"{path}.max", f"{mx:.6g}\n".encode("ascii"))


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, float) or isinstance(x, np.floating):
        return f"{float(x):.6g}"
    return str(x)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Fixed-order CSV, floats at 6 significant digits, header mandatory."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(x) for x in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))

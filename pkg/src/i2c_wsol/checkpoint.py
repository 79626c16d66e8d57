"""Binary checkpoint: model tensors plus the centre bank, CRC-protected.

Layout (little-endian)::

    "I2CK" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | float32 data
    bank section (see ``bank.CenterBank.snapshot``): u32 Y | u32 D | f64 alpha |
        per class: D x float32 centre, u64 update counter
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import bank as B
from . import engine as E
from .errors import DataFormatError
from .model import ModelParams

MAGIC = b"I2CK"
VERSION = 1


def encode(params: ModelParams, bank: B.CenterBank) -> bytes:
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(raw)}sB", len(raw), raw, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    parts.append(bank.snapshot())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> tuple[ModelParams, B.CenterBank]:
    if len(buf) < 16:
        raise DataFormatError("checkpoint truncated", offset=len(buf))
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise DataFormatError("checkpoint CRC mismatch", offset=len(buf) - 4)
    magic, version, count = struct.unpack_from("<4sII", body, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    params = ModelParams()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(body):
                raise DataFormatError(f"tensor {name!r} data truncated", offset=pos)
            data = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            params[name] = E.Tensor(data, requires_grad=True, name=name)
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataFormatError(f"malformed tensor table: {exc}", offset=pos) from exc
    bank = B.restore(body, pos)
    end = pos + B.bank_nbytes(bank.num_classes, bank.dim)
    if end != len(body):
        raise DataFormatError(f"{len(body) - end} unexpected bytes after bank section", offset=end)
    return params, bank


def save(path, params: ModelParams, bank: B.CenterBank) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode(params, bank))


def load(path) -> tuple[ModelParams, B.CenterBank]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint {p}; run `train` first")
    return decode(p.read_bytes())

"""Global class-centre memory with per-class decaying update rates.

Centres are held in float64 while training; the serialized form stores them
as little-endian float32, each class row followed by its u64 update counter.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import ConfigError, DataFormatError, InputError

_HEADER = struct.Struct("<IId")  # Y, D, alpha


def update_rate(t: int, alpha: float) -> float:
    """``exp(-alpha * t)``; 1 on a class's first update, then strictly decreasing."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if t < 0:
        raise InputError(f"update counter must be non-negative, got {t}")
    return math.exp(-alpha * t)


class CenterBank:
    def __init__(self, centers, counters, alpha: float):
        centers = np.array(centers, dtype=np.float64)
        counters = np.array(counters, dtype=np.uint64)
        if centers.ndim != 2 or counters.shape != (centers.shape[0],):
            raise ConfigError(f"bank shapes disagree: centers {centers.shape}, counters {counters.shape}")
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
        self.centers = centers
        self.counters = counters
        self.alpha = float(alpha)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def center(self, y: int) -> np.ndarray:
        self._check_class(y)
        return self.centers[y]

    def _check_class(self, y) -> None:
        if not (isinstance(y, (int, np.integer)) and 0 <= y < self.num_classes):
            raise InputError(f"unknown class id {y!r} for a bank of {self.num_classes} classes")

    def update_center(self, y: int, rep) -> float:
        """Blend ``rep`` into centre ``y`` at rate ``exp(-alpha * t_y)`` and bump ``t_y``.

        Returns the rate that was used.
        """
        self._check_class(y)
        a = np.asarray(rep, dtype=np.float64)
        if a.shape != (self.dim,) or not np.all(np.isfinite(a)):
            raise InputError(f"class representation must be a finite vector of length {self.dim}")
        eta = update_rate(int(self.counters[y]), self.alpha)
        self.centers[y] = (1.0 - eta) * self.centers[y] + eta * a
        self.counters[y] += np.uint64(1)
        return eta

    def snapshot(self) -> bytes:
        """Serialize to an immutable byte string (centres at single precision)."""
        parts = [_HEADER.pack(self.num_classes, self.dim, self.alpha)]
        row = struct.Struct(f"<{self.dim}fQ")
        for y in range(self.num_classes):
            parts.append(row.pack(*self.centers[y].astype(np.float32).tolist(), int(self.counters[y])))
        return b"".join(parts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CenterBank):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and np.array_equal(self.centers, other.centers)
            and np.array_equal(self.counters, other.counters)
        )

    def copy(self) -> "CenterBank":
        return CenterBank(self.centers.copy(), self.counters.copy(), self.alpha)


def init_bank(num_classes: int, dim: int, seed: int, alpha: float = 0.05) -> CenterBank:
    """Centres drawn from ``U[-0.01, 0.01]``, all counters zero."""
    if num_classes < 1 or dim < 1:
        raise ConfigError(f"bank dimensions must be positive, got Y={num_classes} D={dim}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBA4C]))
    return CenterBank(rng.uniform(-0.01, 0.01, size=(num_classes, dim)), np.zeros(num_classes), alpha)


def update_center(bank: CenterBank, y: int, rep) -> float:
    return bank.update_center(y, rep)


def snapshot(bank: CenterBank) -> bytes:
    return bank.snapshot()


def bank_nbytes(num_classes: int, dim: int) -> int:
    return _HEADER.size + num_classes * (4 * dim + 8)


def restore(buf: bytes, offset: int = 0) -> CenterBank:
    """Inverse of :meth:`CenterBank.snapshot`; reads starting at ``offset``."""
    view = memoryview(buf)
    if len(view) - offset < _HEADER.size:
        raise DataFormatError("bank header truncated", offset=len(view))
    y, d, alpha = _HEADER.unpack_from(view, offset)
    if y < 1 or d < 1:
        raise DataFormatError(f"bank header declares Y={y} D={d}", offset=offset)
    need = bank_nbytes(y, d)
    if len(view) - offset < need:
        raise DataFormatError(f"bank section truncated: need {need} bytes", offset=len(view))
    row = struct.Struct(f"<{d}fQ")
    centers = np.empty((y, d))
    counters = np.empty(y, dtype=np.uint64)
    pos = offset + _HEADER.size
    for i in range(y):
        *vals, count = row.unpack_from(view, pos)
        centers[i] = np.asarray(vals, dtype=np.float32)
        counters[i] = count
        pos += row.size
    if not np.all(np.isfinite(centers)):
        raise DataFormatError("bank contains non-finite centres", offset=offset + _HEADER.size)
    try:
        return CenterBank(centers, counters, alpha)
    except ConfigError as exc:
        raise DataFormatError(f"bank alpha invalid: {exc}", offset=offset) from exc

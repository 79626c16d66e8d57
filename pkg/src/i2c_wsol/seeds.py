"""Object seed selection and seed-vector extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .errors import ConfigError


@dataclass
class SeedVectors:
    coords: np.ndarray  # [K, 2] (row, col)
    vectors: E.Tensor  # [K, D]
    class_id: int
    image_id: int
    fallback: bool = False


def seed_rng(seed: int, epoch: int, step: int, sample_id: int) -> np.random.Generator:
    """Independent stream per (run seed, epoch, step, sample)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(step), int(sample_id), 0x5EED]))


def select_seeds(normalized, delta: float, k: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Draw ``k`` pixels whose normalized score exceeds ``delta``.

    With at least ``k`` eligible pixels the draw is without replacement.
    With fewer, every eligible pixel is taken once and the remaining slots are
    filled uniformly with replacement.  With none, ``k`` copies of the
    row-major-first argmax are returned and the fallback flag is set.
    """
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    m = np.asarray(normalized)
    eligible = np.argwhere(m > delta)
    n = len(eligible)
    if n == 0:
        peak = np.unravel_index(int(np.argmax(m)), m.shape)
        return np.tile(np.array(peak, dtype=np.int64), (k, 1)), True
    if n >= k:
        pick = rng.choice(n, size=k, replace=False)
    else:
        pick = np.concatenate([rng.permutation(n), rng.integers(0, n, size=k - n)])
    return eligible[pick].astype(np.int64), False


def extract_seed_vectors(features: E.Tensor, coords, image_index: int | None = None) -> E.Tensor:
    """Gather ``[K,D]`` seed vectors from ``[D,H,W]`` features, or from image ``image_index`` of a batch."""
    cs = np.asarray(coords, dtype=np.int64)
    if image_index is not None:
        cs = np.column_stack([np.full(len(cs), image_index, dtype=np.int64), cs])
    return E.gather_spatial(features, cs)

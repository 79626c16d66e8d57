"""Stochastic and global consistency losses and the joint objective.

Seed vectors of same-class images are pulled together pairwise (stochastic
consistency), and the per-batch class mean of all seed vectors is pulled
towards the bank centre for that class (global consistency).  Bank centres
enter as constants: no gradient ever reaches the bank.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import engine as E
from .bank import CenterBank
from .errors import ConfigError, InputError
from .seeds import SeedVectors


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.008
    lambda2: float = 0.001
    warmup_epochs: int = 1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self.lambda1}, {self.lambda2}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be non-negative, got {self.warmup_epochs}")

    def effective(self, epoch: int) -> tuple[float, float]:
        if epoch < self.warmup_epochs:
            return 0.0, 0.0
        return self.lambda1, self.lambda2


@dataclass
class BatchClassGroup:
    class_id: int
    members: list[SeedVectors]
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        for sv in self.members:
            if sv.class_id != self.class_id:
                raise InputError(f"seed vectors of class {sv.class_id} placed in group {self.class_id}")
        used = [i for p in self.pairs for i in p]
        if len(used) != len(set(used)) or any(not 0 <= i < len(self.members) for i in used):
            raise InputError(f"pairs {self.pairs} are not disjoint member indices")


def group_by_class(seed_sets: Sequence[SeedVectors], rng: np.random.Generator | None = None) -> list[BatchClassGroup]:
    """Bucket seed sets by class and pair members off.

    Each bucket is shuffled with ``rng`` (kept in batch order when ``rng`` is
    None) and split into consecutive disjoint pairs; an odd leftover stays
    unpaired.  Groups come out sorted by class id.
    """
    buckets: dict[int, list[SeedVectors]] = defaultdict(list)
    for sv in seed_sets:
        buckets[sv.class_id].append(sv)
    groups = []
    for y in sorted(buckets):
        members = buckets[y]
        order = list(range(len(members))) if rng is None else [int(i) for i in rng.permutation(len(members))]
        pairs = [(order[i], order[i + 1]) for i in range(0, len(order) - 1, 2)]
        groups.append(BatchClassGroup(y, members, pairs))
    return groups


def sc_loss(vi: E.Tensor | SeedVectors, vj: E.Tensor | SeedVectors) -> E.Tensor:
    """Mean over seed rows of the squared distance between row k of each image.

    Accepts bare ``[K,D]`` tensors or :class:`SeedVectors`; the latter must
    share a class.
    """
    if isinstance(vi, SeedVectors) and isinstance(vj, SeedVectors) and vi.class_id != vj.class_id:
        raise InputError(f"seed sets belong to different classes: {vi.class_id} vs {vj.class_id}")
    vi = vi.vectors if isinstance(vi, SeedVectors) else vi
    vj = vj.vectors if isinstance(vj, SeedVectors) else vj
    if vi.shape != vj.shape:
        raise InputError(f"seed sets differ in shape: {vi.shape} vs {vj.shape}")
    return E.squared_l2_mean(vi, vj)


def batch_sc_loss(groups: Sequence[BatchClassGroup]) -> E.Tensor:
    terms = []
    for g in groups:
        for i, j in g.pairs:
            terms.append(sc_loss(g.members[i], g.members[j]))
    if not terms:
        return E.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = E.add(total, t)
    return E.scale(total, 1.0 / len(terms))


def class_batch_representation(group: BatchClassGroup) -> E.Tensor:
    """Mean of all K*|B_y| seed vectors of one class in the batch."""
    if not group.members:
        raise InputError(f"class {group.class_id} has no seed vectors in this batch")
    return E.mean_rows(E.concat_rows([m.vectors for m in group.members]))


def gc_loss(reps: Mapping[int, E.Tensor], bank: CenterBank) -> E.Tensor:
    """Average over batch classes of ``||a_y - w_y||^2``, with ``w_y`` held constant."""
    if not reps:
        return E.Tensor(0.0)
    ys = sorted(reps)
    for y in ys:
        bank._check_class(y)
    a = E.stack_rows([reps[y] for y in ys])
    w = E.Tensor(bank.centers[ys])
    return E.squared_l2_mean(a, w)


def total_loss(cls: E.Tensor, sc: E.Tensor, gc: E.Tensor, weights: LossWeights, epoch: int) -> E.Tensor:
    """``cls + lambda1*sc + lambda2*gc``; zero-weight terms are left out of the graph entirely."""
    l1, l2 = weights.effective(epoch)
    loss = cls
    if l1 > 0:
        loss = E.add(loss, E.scale(sc, l1))
    if l2 > 0:
        loss = E.add(loss, E.scale(gc, l2))
    return loss

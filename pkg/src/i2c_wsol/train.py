"""Training loop for the classifier with optional consistency losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from . import model as M
from .bank import CenterBank, init_bank
from .config import RunConfig
from .consistency import batch_sc_loss, class_batch_representation, gc_loss, group_by_class, total_loss
from .errors import NumericError
from .locmap import normalize_map
from .seeds import SeedVectors, extract_seed_vectors, seed_rng, select_seeds
from .synthdata import Dataset, pair_batch_sampler

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    cls: float
    sc: float
    gc: float
    train_cls_err: float
    fallback_rate: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} L_cls={self.cls:.6f} L_sc={self.sc:.6f} L_gc={self.gc:.6f} "
            f"train_cls_err={self.train_cls_err:.6f} seed_fallback={self.fallback_rate:.6f}"
        )


@dataclass
class TrainResult:
    params: M.ModelParams
    bank: CenterBank
    history: list[EpochLog] = field(default_factory=list)


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    if cfg.lr_decay_epochs:
        return cfg.lr * 0.5 ** (epoch // cfg.lr_decay_epochs)
    return cfg.lr


def _check_finite(**terms) -> None:
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericError(f"loss term {name} became non-finite ({value})")


def train(cfg: RunConfig, train_set: Dataset, on_epoch=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of paired-category SGD.

    Warm-up epochs optimise the classification loss alone.  Afterwards the
    consistency terms enabled by ``cfg.mode`` join the objective, and the
    bank is refreshed (after the optimiser step) whenever the global term is
    active.  Every random choice comes from a stream derived from
    ``cfg.seed``, so runs are bitwise reproducible.
    """
    mcfg = cfg.model_config()
    params = M.init_model(mcfg, cfg.seed)
    bank = init_bank(mcfg.num_classes, mcfg.feature_channels, cfg.seed, cfg.alpha)
    opt = E.SGD(params.tensors(), cfg.lr, cfg.momentum)
    weights = cfg.loss_weights()
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C]))
    result = TrainResult(params, bank)

    for epoch in range(cfg.epochs):
        lam_sc, lam_gc = weights.effective(epoch)
        lr = learning_rate(cfg, epoch)
        sums = np.zeros(3)
        wrong = seen = fallbacks = seeded = 0
        for step in range(cfg.epoch_steps()):
            idx = pair_batch_sampler(train_set, cfg.categories_per_batch, cfg.images_per_category, batch_rng)
            labels = train_set.labels[idx]
            out = M.forward(params, train_set.images[idx], mcfg)
            cls = E.softmax_cross_entropy(out.logits, labels)
            # checked before seed selection, which would choke on non-finite maps first
            _check_finite(L_cls=cls.item())
            sc = gc = E.Tensor(0.0)
            reps = {}
            if lam_sc > 0 or lam_gc > 0:
                seed_sets = []
                for pos, sample_idx in enumerate(idx):
                    y = int(labels[pos])
                    norm = normalize_map(out.class_maps.data[pos, y])
                    rng = seed_rng(cfg.seed, epoch, step, int(sample_idx))
                    coords, fell_back = select_seeds(norm, cfg.delta, cfg.K, rng)
                    vectors = extract_seed_vectors(out.features, coords, image_index=pos)
                    seed_sets.append(SeedVectors(coords, vectors, y, int(sample_idx), fell_back))
                    fallbacks += fell_back
                    seeded += 1
                pair_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, step, 0x9A12]))
                groups = group_by_class(seed_sets, pair_rng)
                if lam_sc > 0:
                    sc = batch_sc_loss(groups)
                if lam_gc > 0:
                    reps = {g.class_id: class_batch_representation(g) for g in groups}
                    gc = gc_loss(reps, bank)
            loss = total_loss(cls, sc, gc, weights, epoch)
            _check_finite(L_sc=sc.item(), L_gc=gc.item(), L_total=loss.item())

            E.backward(loss)
            opt.step(lr)
            for y, rep in reps.items():
                bank.update_center(y, rep.data)

            sums += (cls.item(), sc.item(), gc.item())
            wrong += int(np.sum(out.logits.data.argmax(axis=1) != labels))
            seen += len(idx)

        steps = max(cfg.epoch_steps(), 1)
        entry = EpochLog(
            epoch=epoch,
            cls=sums[0] / steps,
            sc=sums[1] / steps,
            gc=sums[2] / steps,
            train_cls_err=100.0 * wrong / max(seen, 1),
            fallback_rate=fallbacks / seeded if seeded else 0.0,
        )
        result.history.append(entry)
        log.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry)
    return result

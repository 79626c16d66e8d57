"""Top-1 / Top-5 / Gt-known localization error and classification error."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .errors import InputError, NumericError
from .locmap import BBox, box_from_map, iou, localization_hit, normalize_map, sweep_threshold, upsample_bilinear

__all__ = ["iou", "Judgement", "EvalReport", "judge_sample", "evaluate", "full_size_map", "predict", "tune_threshold"]

TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class Judgement:
    sample_id: int
    gt_label: int
    pred_label: int
    pred_box: BBox | None
    iou: float  # best IoU of the top-1 class box against the gt boxes
    top1_hit: bool
    top5_hit: bool
    gtknown_hit: bool
    top1_cls_hit: bool
    top5_cls_hit: bool


@dataclass
class EvalReport:
    top1_loc_err: float
    top5_loc_err: float
    gtknown_loc_err: float
    top1_cls_err: float
    top5_cls_err: float
    tau: float
    k_top: int
    judgements: list[Judgement] = field(default_factory=list)
    num_classes: int | None = None

    @property
    def low_discrimination_top5(self) -> bool:
        """Top-k over few classes says little; flagged when k covers at least half of them."""
        return self.num_classes is not None and 2 * self.k_top >= self.num_classes

    def metrics(self) -> dict[str, float]:
        return {
            "top1_loc_err": self.top1_loc_err,
            "top5_loc_err": self.top5_loc_err,
            "gtknown_loc_err": self.gtknown_loc_err,
            "top1_cls_err": self.top1_cls_err,
            "top5_cls_err": self.top5_cls_err,
            "tau": self.tau,
        }

    def check_ordering(self) -> None:
        problems = []
        if self.gtknown_loc_err > self.top1_loc_err:
            problems.append("gtknown_loc_err > top1_loc_err")
        if self.top5_loc_err > self.top1_loc_err:
            problems.append("top5_loc_err > top1_loc_err")
        if self.top1_loc_err < self.top1_cls_err:
            problems.append("top1_loc_err < top1_cls_err")
        for name, v in self.metrics().items():
            if name != "tau" and not 0.0 <= v <= 100.0:
                problems.append(f"{name}={v} outside [0, 100]")
        if problems:
            raise AssertionError("metric ordering violated: " + "; ".join(problems))


def full_size_map(raw: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Normalize a raw class map and resize it to image resolution."""
    return upsample_bilinear(normalize_map(raw), *size)


def _best_iou(box: BBox | None, gt_boxes: Sequence[BBox]) -> float:
    if box is None:
        return 0.0
    return max(iou(box, g) for g in gt_boxes)


def judge_sample(logits, maps, gt_label: int, gt_boxes: Sequence[BBox], tau: float, k_top: int, sample_id: int = 0) -> Judgement:
    """Score one image.

    ``maps`` maps class id to a normalized full-resolution map (a ``[Y,H,W]``
    array works too); only the top-k classes and ``gt_label`` are consulted.
    """
    scores = np.asarray(logits, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    top = [int(c) for c in order[:k_top]]
    pred = top[0]
    boxes: dict[int, BBox | None] = {}

    def box_for(c):
        if c not in boxes:
            boxes[c] = box_from_map(maps[c], tau)
        return boxes[c]

    top1 = pred == gt_label and localization_hit(box_for(pred), gt_boxes)
    top5 = gt_label in top and localization_hit(box_for(gt_label), gt_boxes)
    gtknown = localization_hit(box_for(gt_label), gt_boxes)
    return Judgement(
        sample_id=sample_id,
        gt_label=int(gt_label),
        pred_label=pred,
        pred_box=box_for(pred),
        iou=_best_iou(box_for(pred), gt_boxes),
        top1_hit=top1,
        top5_hit=top5,
        gtknown_hit=gtknown,
        top1_cls_hit=pred == gt_label,
        top5_cls_hit=gt_label in top,
    )


def predict(params, images: np.ndarray, config: M.ModelConfig, batch_size: int = 100):
    """Forward pass in batches; returns ``(logits [N,Y], class_maps [N,Y,h,w])``."""
    logits, maps = [], []
    for start in range(0, len(images), batch_size):
        out = M.forward(params, images[start : start + batch_size], config)
        logits.append(out.logits.data)
        maps.append(out.class_maps.data)
    logits = np.concatenate(logits)
    maps = np.concatenate(maps)
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(maps))):
        raise NumericError("non-finite model output during evaluation")
    return logits, maps


def _report(judgements: list[Judgement], tau: float, k_top: int, num_classes: int) -> EvalReport:
    n = len(judgements)

    def err(attr):
        return 100.0 * sum(not getattr(j, attr) for j in judgements) / n

    report = EvalReport(
        top1_loc_err=err("top1_hit"),
        top5_loc_err=err("top5_hit"),
        gtknown_loc_err=err("gtknown_hit"),
        top1_cls_err=err("top1_cls_hit"),
        top5_cls_err=err("top5_cls_hit"),
        tau=tau,
        k_top=k_top,
        judgements=judgements,
        num_classes=num_classes,
    )
    report.check_ordering()
    return report


def evaluate(params, dataset, config: M.ModelConfig, tau: float, k_top: int | None = None) -> EvalReport:
    """Judge every sample of ``dataset`` at box threshold ``tau``."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate an empty split")
    y = config.num_classes
    k_top = min(5, y) if k_top is None else k_top
    logits, maps = predict(params, dataset.images, config)
    size = dataset.images.shape[-2:]
    judgements = []
    for i, sample in enumerate(dataset.samples):
        wanted = set(int(c) for c in np.argsort(-logits[i], kind="stable")[:k_top]) | {sample.label}
        full = {c: full_size_map(maps[i, c], size) for c in wanted}
        judgements.append(judge_sample(logits[i], full, sample.label, sample.gt_boxes, tau, k_top, sample.sample_id))
    return _report(judgements, tau, k_top, y)


def tune_threshold(params, dataset, config: M.ModelConfig, grid: Sequence[float] = TAU_GRID):
    """Choose the box threshold on ``dataset`` (ground-truth class maps)."""
    _, maps = predict(params, dataset.images, config)
    size = dataset.images.shape[-2:]
    items = [(full_size_map(maps[i, s.label], size), s.gt_boxes) for i, s in enumerate(dataset.samples)]
    return sweep_threshold(items, grid)

"""Segmentation quality metrics: mIOU, high-precision accuracy, variance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .data import batch_tensors
from .tensor import no_grad

HP_ACC_THRESHOLD = 0.75


def miou(pred_mask, gt_mask, classes):
    """Mean intersection-over-union across classes.

    Classes absent from both masks are excluded from the mean (their IOU
    would be 0/0); the result is in [0, 1].
    """
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    ious = []
    for c in range(classes):
        p = pred_mask == c
        g = gt_mask == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    if not ious:
        raise ValueError("no class present in either mask")
    return float(np.mean(ious))


def hp_acc(per_image, threshold=HP_ACC_THRESHOLD):
    """Fraction of images whose mIOU is strictly above the threshold."""
    if len(per_image) == 0:
        raise ValueError("hp_acc of an empty list")
    return float(np.mean([v > threshold for v in per_image]))


def miou_variance(per_image):
    """Population variance (divide by n) of the per-image mIOU list."""
    if len(per_image) == 0:
        raise ValueError("variance of an empty list")
    arr = np.asarray(per_image, dtype=np.float64)
    if np.all(arr == arr[0]):
        return 0.0  # keep constant lists exactly at zero despite mean rounding
    return float(((arr - arr.mean()) ** 2).mean())


@dataclass
class MetricsReport:
    """Per-image mIOU list plus its aggregates and the model's cost counters."""

    per_image_miou: list
    mean_miou: float
    hp_acc: float
    variance: float
    params: int
    flops: int
    threshold: float = HP_ACC_THRESHOLD

    @classmethod
    def from_per_image(cls, per_image, params, flops, threshold=HP_ACC_THRESHOLD):
        per_image = [float(v) for v in per_image]
        return cls(
            per_image_miou=per_image,
            mean_miou=float(np.mean(per_image)),
            hp_acc=hp_acc(per_image, threshold),
            variance=miou_variance(per_image),
            params=int(params),
            flops=int(flops),
            threshold=threshold,
        )

    def to_dict(self):
        return {
            "per_image_miou": self.per_image_miou,
            "mean_miou": self.mean_miou,
            "hp_acc": self.hp_acc,
            "variance": self.variance,
            "params": self.params,
            "flops": self.flops,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def predict_masks(model, images):
    """Eval-mode forward pass; argmax over logits (ties go to the lowest class id)."""
    with no_grad():
        logits = model.forward(images, training=False)
    return logits.data.argmax(axis=1)


def evaluate(model, dataset, threshold=HP_ACC_THRESHOLD, transform=None, batch=16):
    """Per-image mIOU over a dataset, aggregated into a MetricsReport."""
    if len(dataset) == 0:
        raise ValueError("evaluate on an empty dataset")
    samples = dataset.samples
    if transform is not None:
        samples = [transform(s) for s in samples]
    input_shape = samples[0].image.shape
    classes = model.output_shape(input_shape)[0]
    per_image = []
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        images, masks = batch_tensors(chunk)
        pred = predict_masks(model, images)
        for p, g in zip(pred, masks):
            per_image.append(miou(p, g, classes))
    return MetricsReport.from_per_image(
        per_image,
        params=models.count_params(model),
        flops=models.count_flops(model, input_shape),
        threshold=threshold,
    )

"""Scikit-learn style estimator facade over the distillation pipeline.

``SpiritDistiller`` exposes the student training schemes through the usual
``fit`` / ``predict`` / ``score`` surface so the pipeline composes with the
wider ecosystem (cloning, parameter search, pipelines).  ``X`` is a float
(n, 3, H, W) image batch in [0, 1] and ``y`` an integer (n, H, W) class
mask batch; images are fed to the networks at their native resolution
(no cropping or pooling), so H and W must be divisible by the encoder's
total downsampling factor.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import models
from .data import AugmentSpec, DomainDataset, Sample, default_domain_params
from .metrics import miou, predict_masks
from .pipeline import RunSetup, default_stage_configs, run_mode
from .serialization import read_tensors
from .tensor import Tensor
from .validation import check_divisible, check_image_batch, check_mask_batch


class SpiritDistiller(BaseEstimator):
    """Compact segmentation student trained by cross-domain feature distillation.

    Parameters
    ----------
    mode : {'scratch', 'sd', 'esd'}
        'scratch' trains the student directly on (X, y); 'sd' distills the
        teacher front on target images first; 'esd' additionally mixes
        proximity-domain images into the distillation stream.
    teacher : str or list, optional
        Teacher checkpoint path (or pre-loaded (name, array) pairs).
        Required for 'sd' and 'esd'.
    proximity_images : array-like, optional
        Unlabeled proximity-domain images for 'esd'.
    r : float, default=0.5
        Target-to-proximity mix ratio during distillation ('esd' only).
    blocks, widths, classes, split_index, grouping
        Architecture knobs shared with the teacher checkpoint.
    stages : dict, optional
        Per-stage StageConfig overrides; defaults follow the desk-scale setup.
    flip_prob : float, default=0.5
        Horizontal-flip augmentation probability during training.
    random_state : int, default=0
        Master seed; fits are bit-reproducible for equal inputs and params.
    """

    def __init__(self, mode="sd", teacher=None, proximity_images=None, r=0.5,
                 blocks=4, widths=(16, 32, 64, 128), classes=2, split_index=None,
                 grouping="gcd", stages=None, flip_prob=0.5, random_state=0):
        self.mode = mode
        self.teacher = teacher
        self.proximity_images = proximity_images
        self.r = r
        self.blocks = blocks
        self.widths = widths
        self.classes = classes
        self.split_index = split_index
        self.grouping = grouping
        self.stages = stages
        self.flip_prob = flip_prob
        self.random_state = random_state

    def _arch(self, resolution):
        return models.ArchConfig(blocks=self.blocks, widths=tuple(self.widths),
                                 classes=self.classes, resolution=resolution,
                                 split_index=self.split_index, grouping=self.grouping)

    def _dataset(self, images, masks, domain):
        if masks is None:
            masks = np.zeros((len(images), images.shape[2], images.shape[3]), dtype=np.int64)
        samples = [Sample(image=img, mask=m, domain=domain)
                   for img, m in zip(images, masks)]
        return DomainDataset(samples=samples, domain=domain, seed=0,
                             params=default_domain_params(domain),
                             resolution=images.shape[2])

    def fit(self, X, y):
        """Train the student on (X, y) according to ``mode``; returns self."""
        if self.mode not in ("scratch", "sd", "esd"):
            raise ValueError(f"mode must be 'scratch', 'sd' or 'esd', got '{self.mode}'")
        X = check_image_batch(X)
        y = check_mask_batch(y, X, self.classes)
        resolution = X.shape[2]
        check_divisible(resolution, 2 ** self.blocks, "image size")
        arch = self._arch(resolution)

        teacher_state = None
        if self.mode in ("sd", "esd"):
            if self.teacher is None:
                raise ValueError(f"mode '{self.mode}' needs a teacher checkpoint")
            teacher_state = (read_tensors(self.teacher)
                             if isinstance(self.teacher, str) else list(self.teacher))

        target = self._dataset(X, y, "target")
        if self.mode == "esd":
            if self.proximity_images is None:
                raise ValueError("mode 'esd' needs proximity_images")
            XP = check_image_batch(self.proximity_images, name="proximity_images")
            if XP.shape[2:] != X.shape[2:]:
                raise ValueError(
                    f"proximity images {XP.shape[2:]} must match X resolution {X.shape[2:]}"
                )
            proximity = self._dataset(XP, None, "proximity")
        else:
            proximity = target  # unused source of samples for sd/scratch

        spec = AugmentSpec(resize_to=None, crop=resolution,
                           flip_prob=self.flip_prob, pool=False)
        setup = RunSetup(arch=arch, stages=self.stages or default_stage_configs(),
                         target=target, proximity=proximity, eval_target=target,
                         teacher_state=teacher_state, target_augment=spec,
                         proximity_augment=spec, master_seed=self.random_state)
        r = float(self.r) if self.mode == "esd" else None
        record, model = run_mode(setup, self.mode, seed=0, r=r)
        self.model_ = model
        self.record_ = record
        self.classes_ = self.classes
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this SpiritDistiller is not fitted yet; call fit first")

    def predict(self, X):
        """Per-pixel class ids for an image batch, shape (n, H, W)."""
        self._check_fitted()
        X = check_image_batch(X)
        return predict_masks(self.model_, Tensor(X))

    def score(self, X, y):
        """Mean per-image mIOU of the predictions against ``y``."""
        self._check_fitted()
        X = check_image_batch(X)
        y = check_mask_batch(y, X, self.classes_)
        pred = predict_masks(self.model_, Tensor(X))
        return float(np.mean([miou(p, g, self.classes_) for p, g in zip(pred, y)]))

"""Three-stage training: feature distillation, frozen training, fine-tuning.

Stage 1 trains the student's feature extractor to reproduce the teacher
front's feature maps on a mixed target/proximity input stream (mean squared
error).  Stage 2 trains the student head on target-domain batches with the
extractor frozen, statistics included.  Stage 3 fine-tunes the whole
student at a small learning rate.  ``run_mode`` wires these stages into the
comparison modes: scratch training, distillation (sd / esd), and the
fine-tuning-transfer baselines built by stacking the teacher front under a
fresh head.

Every run is a deterministic function of (config, seed): all randomness
flows from explicitly derived generators, so reruns reproduce loss curves
and checkpoints bit-exactly.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import models
from . import tensor as T
from .data import (AugmentSpec, MixStream, augmented_shape, batch_tensors,
                   eval_transform, random_choice)
from .metrics import MetricsReport, evaluate
from .optim import SGD

MODES = ("scratch", "sd", "esd", "ftt_frozen", "ftt_finetuned")


@dataclass(frozen=True)
class StageConfig:
    """Optimizer hyperparameters and stopping policy for one training stage."""

    learning_rate: float
    momentum: float
    weight_decay: float = 3e-3
    batch_size: int = 8
    max_steps: int = 300
    patience: int = 25
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1 or self.max_steps < 1 or self.patience < 1:
            raise ValueError("batch_size, max_steps and patience must be positive")
        if self.min_delta < 0:
            raise ValueError(f"min_delta must be nonnegative, got {self.min_delta}")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown stage fields: {sorted(extra)}")
        return cls(**d)


def default_stage_configs():
    """Stage hyperparameters: distillation, frozen head training, fine-tuning."""
    return {
        "stage1": StageConfig(learning_rate=3e-3, momentum=0.99, max_steps=400),
        "stage2": StageConfig(learning_rate=1e-2, momentum=0.9, max_steps=300),
        "stage3": StageConfig(learning_rate=5e-5, momentum=0.99, max_steps=150, patience=20),
    }


def default_pretrain_config():
    return StageConfig(learning_rate=1e-2, momentum=0.9, max_steps=700, patience=40)


class PlateauDetector:
    """Stop once the smoothed loss makes no progress for ``patience`` steps.

    The smoothed loss is the mean of the last ``patience`` raw losses; the
    detector fires after ``patience`` consecutive evaluations without an
    improvement greater than ``min_delta`` over the best smoothed value.
    """

    def __init__(self, patience, min_delta):
        self.patience = patience
        self.min_delta = min_delta
        self.window = deque(maxlen=patience)
        self.best = math.inf
        self.stale = 0

    def update(self, loss):
        self.window.append(loss)
        if len(self.window) < self.patience:
            return False
        smoothed = sum(self.window) / len(self.window)
        if smoothed < self.best - self.min_delta:
            self.best = smoothed
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _train_loop(label, loss_fn, params, cfg):
    """Shared stage loop: step until plateau or ``max_steps``; returns the curve."""
    optimizer = SGD(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    detector = PlateauDetector(cfg.patience, cfg.min_delta)
    curve = []
    for step in range(cfg.max_steps):
        loss = loss_fn()
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError(f"{label} diverged: loss is not finite at step {step}")
        T.backward(loss)
        optimizer.step()
        curve.append(value)
        if detector.update(value):
            break
    return curve


def stage1_feature_distill(front, extractor, stream, cfg):
    """Train the extractor to match the teacher front's features on the stream.

    The front runs frozen in eval mode, so the regression target is a
    deterministic function of each input batch; the extractor runs in train
    mode (its batchnorm statistics must be populated here, stage 2 freezes
    them).  Both networks see the same augmented batch.
    """
    probe = stream.target if stream.p_target > 0 else stream.proximity
    spec = stream.target_augment if stream.p_target > 0 else stream.proximity_augment
    in_shape = augmented_shape(spec, probe.resolution)
    front_shape = front.output_shape(in_shape)
    extractor_shape = extractor.output_shape(in_shape)
    if front_shape != extractor_shape:
        raise ValueError(
            f"feature shapes differ: front {front_shape} vs extractor {extractor_shape}"
        )
    params = extractor.trainable_params()
    if not params:
        raise ValueError("extractor has no trainable parameters")

    def loss_fn():
        images, _ = batch_tensors(stream.next_batch())
        with T.no_grad():
            target_features = front.forward(images, training=False)
        predicted = extractor.forward(images, training=True)
        return T.mse_loss(predicted, target_features)

    return _train_loop("feature distillation", loss_fn, params, cfg)


def _segmentation_loop(label, model, dataset, cfg, rng, augment_spec):
    params = model.trainable_params()
    if not params:
        raise ValueError(f"{label}: no trainable parameters")

    def loss_fn():
        samples = random_choice(dataset, rng, cfg.batch_size)
        images, masks = batch_tensors(samples, augment_spec, rng)
        logits = model.forward(images, training=True)
        return T.pixel_cross_entropy(logits, masks)

    return _train_loop(label, loss_fn, params, cfg)


def stage2_frozen_train(student, target_dataset, cfg, rng, augment_spec=None):
    """Train the head on target batches; the extractor stays frozen throughout."""
    return _segmentation_loop("frozen training", student, target_dataset, cfg, rng, augment_spec)


def stage3_finetune(student, target_dataset, cfg, rng, augment_spec=None):
    """Fine-tune the whole student at the stage-3 learning rate."""
    return _segmentation_loop("fine-tuning", student, target_dataset, cfg, rng, augment_spec)


def pretrain_teacher(source_dataset, cfg, arch, seed, augment_spec=None):
    """Train a fresh teacher on the source domain; returns (teacher, loss curve)."""
    if len(source_dataset) == 0:
        raise ValueError("source dataset is empty")
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    teacher = models.build_teacher(arch, init_rng)
    data_rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    curve = _segmentation_loop("teacher pretraining", teacher, source_dataset, cfg,
                               data_rng, augment_spec)
    return teacher, curve


@dataclass
class RunRecord:
    """Everything one training run produced, JSON-serializable."""

    mode: str
    r: float | None
    seed: int
    curves: dict
    steps: dict
    metrics: MetricsReport
    checkpoint: str = ""

    def key(self):
        return run_key(self.mode, self.r, self.seed)

    def to_dict(self):
        r = self.r
        if r is not None and math.isinf(r):
            r = "inf"
        return {
            "mode": self.mode,
            "r": r,
            "seed": self.seed,
            "curves": self.curves,
            "steps": self.steps,
            "metrics": self.metrics.to_dict(),
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, d):
        r = d["r"]
        if r == "inf":
            r = math.inf
        return cls(mode=d["mode"], r=r, seed=d["seed"], curves=d["curves"],
                   steps=d["steps"], metrics=MetricsReport.from_dict(d["metrics"]),
                   checkpoint=d["checkpoint"])


def run_key(mode, r, seed):
    if mode == "esd":
        label = "inf" if math.isinf(r) else format(float(r), "g")
        return f"{mode}_r{label}_s{seed}"
    return f"{mode}_s{seed}"


@dataclass
class RunSetup:
    """Shared ingredients for the comparison runs of one experiment."""

    arch: models.ArchConfig
    stages: dict
    target: object
    proximity: object
    eval_target: object
    teacher_state: list | None = None
    target_augment: AugmentSpec = field(default_factory=AugmentSpec)
    proximity_augment: AugmentSpec = field(default_factory=AugmentSpec)
    threshold: float = 0.75
    master_seed: int = 0

    def network_input_shape(self):
        return augmented_shape(self.target_augment, self.target.resolution)


def _load_teacher(setup):
    if setup.teacher_state is None:
        raise ValueError("this mode needs a pretrained teacher; run pretrain-teacher first")
    teacher = models.build_teacher(setup.arch, np.random.default_rng(0))
    teacher.load_state(setup.teacher_state)
    teacher.set_frozen("", True)
    return teacher


def _build_student_parts(setup, init_rng, front):
    in_shape = setup.network_input_shape()
    feat_c, feat_h, _ = front.output_shape(in_shape)
    up = 4 * feat_h  # two fixed 2x upsamples inside the head
    if in_shape[1] % up:
        raise ValueError(
            f"head cannot restore {in_shape[1]}x{in_shape[2]} from {feat_h}-pixel features"
        )
    final_scale = in_shape[1] // up
    extractor = models.build_extractor_from_front(front, init_rng, setup.arch.grouping)
    head = models.build_student_head(feat_c, setup.arch.classes, max(final_scale, 1),
                                     init_rng, setup.arch.grouping)
    return extractor, head


def _eval_spec(setup):
    # Deterministic center crop at the training crop size, then the same pooling.
    return AugmentSpec(resize_to=None, crop=setup.target_augment.crop,
                       flip_prob=0.0, pool=setup.target_augment.pool)


def _finish_run(setup, model, mode, r, seed, curves):
    report = evaluate(model, setup.eval_target, threshold=setup.threshold,
                      transform=eval_transform(_eval_spec(setup)))
    steps = {name: len(curve) for name, curve in curves.items()}
    return RunRecord(mode=mode, r=r, seed=seed, curves=curves, steps=steps,
                     metrics=report), model


def run_mode(setup, mode, seed, r=None):
    """Execute one comparison run; returns (RunRecord, trained model graph)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}' (expected one of {MODES})")
    if mode == "esd":
        if r is None:
            raise ValueError("esd requires a mix ratio r")
        if r < 0:
            raise ValueError(f"mix ratio r must be nonnegative, got {r}")
    elif r is not None:
        raise ValueError(f"mode '{mode}' does not take a mix ratio")

    def rng_for(slot):
        return np.random.default_rng(np.random.SeedSequence((setup.master_seed, seed, slot)))

    stages = setup.stages
    init_rng = rng_for(1)

    if mode == "scratch":
        split_at = setup.arch.effective_split_index
        teacher_shape = models.build_teacher(setup.arch, np.random.default_rng(0))
        front = models.split_teacher(teacher_shape, split_at).front
        extractor, head = _build_student_parts(setup, init_rng, front)
        student = models.concat_graphs(("extractor", extractor), ("head", head))
        curves = {
            "stage2": stage2_frozen_train(student, setup.target, stages["stage2"],
                                          rng_for(3), setup.target_augment),
            "stage3": stage3_finetune(student, setup.target, stages["stage3"],
                                      rng_for(4), setup.target_augment),
        }
        return _finish_run(setup, student, mode, r, seed, curves)

    teacher = _load_teacher(setup)
    split = models.split_teacher(teacher, setup.arch.effective_split_index)

    if mode in ("sd", "esd"):
        mix_r = math.inf if mode == "sd" else float(r)
        extractor, head = _build_student_parts(setup, init_rng, split.front)
        stream = MixStream(setup.target, setup.proximity, mix_r,
                           seed=np.random.SeedSequence((setup.master_seed, seed, 2)),
                           batch_size=stages["stage1"].batch_size,
                           target_augment=setup.target_augment,
                           proximity_augment=setup.proximity_augment)
        curve1 = stage1_feature_distill(split.front, extractor, stream, stages["stage1"])
        student = models.concat_graphs(("extractor", extractor), ("head", head))
        student.set_frozen("extractor.", True)
        curve2 = stage2_frozen_train(student, setup.target, stages["stage2"],
                                     rng_for(3), setup.target_augment)
        student.set_frozen("extractor.", False)
        curve3 = stage3_finetune(student, setup.target, stages["stage3"],
                                 rng_for(4), setup.target_augment)
        curves = {"stage1": curve1, "stage2": curve2, "stage3": curve3}
        return _finish_run(setup, student, mode, r, seed, curves)

    # ftt baselines: the teacher front (copied, weights kept) under a fresh head.
    front_copy = split.front.copy()
    in_shape = setup.network_input_shape()
    feat_c, feat_h, _ = front_copy.output_shape(in_shape)
    head = models.build_student_head(feat_c, setup.arch.classes,
                                     max(in_shape[1] // (4 * feat_h), 1),
                                     init_rng, setup.arch.grouping)
    stacked = models.concat_graphs(("front", front_copy), ("head", head))
    stacked.set_frozen("front.", True)
    curves = {
        "stage2": stage2_frozen_train(stacked, setup.target, stages["stage2"],
                                      rng_for(3), setup.target_augment),
    }
    if mode == "ftt_finetuned":
        stacked.set_frozen("front.", False)
        curves["stage3"] = stage3_finetune(stacked, setup.target, stages["stage3"],
                                           rng_for(4), setup.target_augment)
    return _finish_run(setup, stacked, mode, r, seed, curves)

"""Cross-domain knowledge distillation for compact segmentation networks."""

from .tensor import (Tensor, backward, batchnorm2d, bilinear_upsample, conv2d,
                     maxpool2d, mse_loss, no_grad, pixel_cross_entropy, relu)
from .optim import SGD
from .models import (ArchConfig, LayerSpec, ModuleGraph, TeacherSplit,
                     build_extractor_from_front, build_student_head, build_teacher,
                     concat_graphs, count_flops, count_params, gcd_groups,
                     set_frozen, split_teacher)
from .data import (AugmentSpec, DomainDataset, DomainParams, MixStream, Sample,
                   augment, default_domain_params, generate_domain, random_choice,
                   shuffle_select)
from .metrics import MetricsReport, evaluate, hp_acc, miou, miou_variance
from .pipeline import (MODES, RunRecord, RunSetup, StageConfig,
                       default_stage_configs, pretrain_teacher, run_mode,
                       stage1_feature_distill, stage2_frozen_train, stage3_finetune)
from .estimator import SpiritDistiller

__version__ = "0.1.0"

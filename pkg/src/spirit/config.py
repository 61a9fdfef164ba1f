"""Experiment configuration: defaults, JSON loading, field-path validation.

A user config file only needs the keys it wants to change; everything else
comes from the defaults.  Validation errors carry the dotted path of the
offending field so the CLI can report them machine-parsably.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import AugmentSpec, DomainParams, default_domain_params
from .models import ArchConfig
from .pipeline import MODES, StageConfig, default_pretrain_config, default_stage_configs


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class DomainConfig:
    role: str
    n: int
    resolution: int
    seed: int | None = None          # derived from master_seed when omitted
    params: DomainParams | None = None

    def resolved_params(self):
        return self.params if self.params is not None else default_domain_params(self.role)


@dataclass
class ExperimentConfig:
    master_seed: int = 2024
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(resolution=32))
    datasets: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    stages: dict = field(default_factory=default_stage_configs)
    pretrain: StageConfig = field(default_factory=default_pretrain_config)
    modes: tuple = ("scratch", "sd", "esd")
    r_list: tuple = (0.2, 0.5, 1.0)
    seeds: tuple = (1, 2, 3, 4, 5)
    threshold: float = 0.75

    def domain(self, key):
        return self.datasets[key]

    def domain_seed(self, key):
        cfg = self.datasets[key]
        if cfg.seed is not None:
            return cfg.seed
        offsets = {"source": 11, "target": 12, "proximity": 13,
                   "eval_target": 14, "eval_source": 15}
        return self.master_seed + offsets[key]


DOMAIN_KEYS = ("source", "target", "proximity", "eval_target", "eval_source")
_DOMAIN_ROLES = {"source": "source", "target": "target", "proximity": "proximity",
                 "eval_target": "target", "eval_source": "source"}


def default_config_dict():
    """The desk-scale experiment as a plain JSON-ready dict."""
    stages = default_stage_configs()
    return {
        "master_seed": 2024,
        "arch": {
            "blocks": 4,
            "widths": [16, 32, 64, 128],
            "in_channels": 3,
            "classes": 2,
            "resolution": 48,
            "split_index": None,
            "grouping": "gcd",
        },
        "datasets": {
            "source": {"n": 1024, "resolution": 128, "seed": None, "params": None},
            "target": {"n": 64, "resolution": 128, "seed": None, "params": None},
            "proximity": {"n": 1024, "resolution": 128, "seed": None, "params": None},
            "eval_target": {"n": 64, "resolution": 128, "seed": None, "params": None},
            "eval_source": {"n": 64, "resolution": 128, "seed": None, "params": None},
        },
        "augment": {
            "crop": 96,
            "flip_prob": 0.5,
            "proximity_resize": 256,
        },
        "stages": {name: cfg.to_dict() for name, cfg in stages.items()},
        "pretrain": default_pretrain_config().to_dict(),
        "modes": ["scratch", "sd", "esd"],
        "r_list": [0.2, 0.5, 1.0],
        "seeds": [1, 2, 3, 4, 5],
        "threshold": 0.75,
    }


def _merge(base, override, path):
    if isinstance(base, dict):
        if not isinstance(override, dict):
            raise ConfigError(path, f"expected an object, got {type(override).__name__}")
        out = dict(base)
        for key, value in override.items():
            if key not in base:
                raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
            child = f"{path}.{key}" if path else key
            out[key] = _merge(base[key], value, child)
        return out
    return override


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def _check_int(value, path, minimum=None):
    _require(isinstance(value, int) and not isinstance(value, bool), path,
             f"expected an integer, got {value!r}")
    if minimum is not None:
        _require(value >= minimum, path, f"must be >= {minimum}, got {value}")
    return value


def _check_number(value, path, minimum=None):
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), path,
             f"expected a number, got {value!r}")
    if minimum is not None:
        _require(value >= minimum, path, f"must be >= {minimum}, got {value}")
    return float(value)


def from_dict(raw):
    """Validate a fully merged config dict into an ExperimentConfig."""
    master_seed = _check_int(raw["master_seed"], "master_seed", minimum=0)

    arch_raw = raw["arch"]
    try:
        arch = ArchConfig.from_dict(arch_raw)
    except ValueError as e:
        raise ConfigError("arch", str(e)) from None

    datasets = {}
    for key in DOMAIN_KEYS:
        node = raw["datasets"][key]
        path = f"datasets.{key}"
        n = _check_int(node["n"], f"{path}.n", minimum=1)
        resolution = _check_int(node["resolution"], f"{path}.resolution", minimum=32)
        _require(resolution & (resolution - 1) == 0, f"{path}.resolution",
                 f"must be a power of two, got {resolution}")
        seed = node["seed"]
        if seed is not None:
            seed = _check_int(seed, f"{path}.seed", minimum=0)
        params = node["params"]
        if params is not None:
            try:
                params = DomainParams.from_dict(params)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{path}.params", str(e)) from None
        datasets[key] = DomainConfig(role=_DOMAIN_ROLES[key], n=n, resolution=resolution,
                                     seed=seed, params=params)

    aug = raw["augment"]
    crop = _check_int(aug["crop"], "augment.crop", minimum=2)
    _require(crop % 2 == 0, "augment.crop", f"must be even (maxpool halves it), got {crop}")
    flip = _check_number(aug["flip_prob"], "augment.flip_prob", minimum=0.0)
    _require(flip <= 1.0, "augment.flip_prob", f"must be <= 1, got {flip}")
    resize = aug["proximity_resize"]
    if resize is not None:
        resize = _check_int(resize, "augment.proximity_resize", minimum=crop)
    augment = {"crop": crop, "flip_prob": flip, "proximity_resize": resize}
    _require(crop <= datasets["target"].resolution, "augment.crop",
             f"larger than target resolution {datasets['target'].resolution}")

    stages = {}
    for name in ("stage1", "stage2", "stage3"):
        try:
            stages[name] = StageConfig.from_dict(raw["stages"][name])
        except ValueError as e:
            raise ConfigError(f"stages.{name}", str(e)) from None
    try:
        pretrain = StageConfig.from_dict(raw["pretrain"])
    except ValueError as e:
        raise ConfigError("pretrain", str(e)) from None

    modes = tuple(raw["modes"])
    for i, mode in enumerate(modes):
        _require(mode in MODES, f"modes[{i}]", f"unknown mode '{mode}'")
    r_list = tuple(_check_number(v, f"r_list[{i}]", minimum=0.0)
                   for i, v in enumerate(raw["r_list"]))
    seeds = tuple(_check_int(v, f"seeds[{i}]") for i, v in enumerate(raw["seeds"]))
    _require(len(seeds) > 0, "seeds", "needs at least one seed")
    threshold = _check_number(raw["threshold"], "threshold", minimum=0.0)
    _require(threshold < 1.0, "threshold", f"must be < 1, got {threshold}")

    cfg = ExperimentConfig(master_seed=master_seed, arch=arch, datasets=datasets,
                           augment=augment, stages=stages, pretrain=pretrain,
                           modes=modes, r_list=r_list, seeds=seeds, threshold=threshold)
    _check_geometry(cfg)
    return cfg


def _check_geometry(cfg):
    crop = cfg.augment["crop"]
    net = crop // 2
    down = 2 ** cfg.arch.blocks
    _require(net % down == 0, "augment.crop",
             f"network input {net} must be divisible by 2^blocks = {down}")
    _require(cfg.arch.resolution == net, "arch.resolution",
             f"must equal the network input size {net} (crop {crop} after maxpool)")
    _require(cfg.datasets["eval_target"].resolution >= crop, "datasets.eval_target.resolution",
             f"must be at least augment.crop ({crop}); evaluation center-crops")
    _require(cfg.datasets["eval_source"].resolution >= crop, "datasets.eval_source.resolution",
             f"must be at least augment.crop ({crop}); evaluation center-crops")
    _require(cfg.datasets["source"].resolution >= crop, "datasets.source.resolution",
             f"must be at least augment.crop ({crop})")
    feat = net // (2 ** (split_block_count(cfg.arch)))
    _require(feat >= 1 and net % (4 * feat) == 0, "arch.split_index",
             f"head cannot upsample {feat}-pixel features back to {net}")


def split_block_count(arch):
    """Number of maxpools in the teacher front at the configured split."""
    idx = arch.effective_split_index
    # Each encoder block is 7 layers ending in its maxpool.
    return min(idx // 7, arch.blocks)


def load_config(path=None, overrides=None, env_seed=None):
    """Merge defaults <- file <- overrides, then validate.

    ``env_seed`` (the SPIRIT_SEED environment variable) replaces the master
    seed after merging.
    """
    merged = default_config_dict()
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("<file>", f"invalid JSON: {e}") from None
        merged = _merge(merged, user, "")
    if overrides:
        merged = _merge(merged, overrides, "")
    if env_seed is not None:
        merged["master_seed"] = env_seed
    return from_dict(merged)


def to_dict(cfg):
    return {
        "master_seed": cfg.master_seed,
        "arch": cfg.arch.to_dict(),
        "datasets": {
            key: {
                "n": dc.n,
                "resolution": dc.resolution,
                "seed": dc.seed,
                "params": dc.params.to_dict() if dc.params is not None else None,
            }
            for key, dc in cfg.datasets.items()
        },
        "augment": dict(cfg.augment),
        "stages": {name: sc.to_dict() for name, sc in cfg.stages.items()},
        "pretrain": cfg.pretrain.to_dict(),
        "modes": list(cfg.modes),
        "r_list": list(cfg.r_list),
        "seeds": list(cfg.seeds),
        "threshold": cfg.threshold,
    }


def target_augment_spec(cfg):
    return AugmentSpec(resize_to=None, crop=cfg.augment["crop"],
                       flip_prob=cfg.augment["flip_prob"], pool=True)


def proximity_augment_spec(cfg):
    return AugmentSpec(resize_to=cfg.augment["proximity_resize"], crop=cfg.augment["crop"],
                       flip_prob=cfg.augment["flip_prob"], pool=True)


def source_augment_spec(cfg):
    # Source defaults to crop-sized images: crop is then a no-op, flip + pool remain.
    return AugmentSpec(resize_to=None, crop=cfg.augment["crop"],
                       flip_prob=cfg.augment["flip_prob"], pool=True)

"""Procedural segmentation domains, augmentation, and the mixing stream.

Each sample is a textured scene with a curved "road" band (class 1) over a
background (class 0); the ground-truth mask is exact by construction.
Domain parameters control the band's shape family, texture, noise and
shadow overlays: the proximity domain is a perturbation of the target
domain, the source domain uses a distinct shape family and palette.

The mixing stream draws each sample independently from the target domain
with probability r / (1 + r) and from the proximity domain otherwise;
r = inf degenerates to target-only draws and r = 0 to proximity-only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .serialization import read_tensors, write_tensors
from .tensor import Tensor


@dataclass(frozen=True)
class DomainParams:
    """Knobs of the procedural scene generator for one domain.

    ``color_jitter`` and ``shadow_spread`` control per-image diversity: a
    high-jitter domain (the source) spans many palettes and lighting
    conditions, a low-jitter one (the target) is narrow.
    """

    shape_family: str = "sine"        # 'sine' or 'zigzag' road centerline
    center_lo: float = 0.35           # road center range, fraction of width
    center_hi: float = 0.65
    amplitude_max: float = 0.15       # centerline wiggle, fraction of width
    waves_lo: float = 0.5             # centerline periods over the image height
    waves_hi: float = 1.5
    width_lo: float = 0.15            # road width range, fraction of width
    width_hi: float = 0.40
    texture_freq: float = 6.0         # background grating cycles per image
    texture_amp: float = 0.08
    road_texture_freq: float = 18.0   # road-surface grating, the texture cue
    road_texture_amp: float = 0.10
    noise_std: float = 0.02
    shadow_strength: float = 0.5      # 0 disables shadows
    shadow_freq: float = 1.2
    bg_color: tuple = (0.55, 0.70, 0.45)
    road_color: tuple = (0.45, 0.45, 0.50)
    color_jitter: float = 0.0         # per-image uniform offset on both palettes
    shadow_spread: float = 0.0        # per-image shadow strength half-range

    def __post_init__(self):
        if self.shape_family not in ("sine", "zigzag"):
            raise ValueError(f"unknown shape family '{self.shape_family}'")

    def to_dict(self):
        d = asdict(self)
        d["bg_color"] = list(self.bg_color)
        d["road_color"] = list(self.road_color)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("bg_color", "road_color"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_domain_params(role):
    """Stock parameters: proximity perturbs target, source is distant."""
    target = DomainParams()
    if role == "target":
        return target
    if role == "proximity":
        return replace(
            target,
            texture_freq=7.0,
            texture_amp=0.09,
            noise_std=0.025,
            shadow_strength=0.45,
            shadow_freq=1.4,
            bg_color=(0.52, 0.67, 0.43),
            road_color=(0.43, 0.44, 0.48),
        )
    if role == "source":
        return DomainParams(
            shape_family="zigzag",
            texture_freq=12.0,
            texture_amp=0.12,
            noise_std=0.05,
            shadow_strength=0.15,
            shadow_freq=2.0,
            bg_color=(0.35, 0.40, 0.70),
            road_color=(0.60, 0.55, 0.50),
        )
    raise ValueError(f"unknown domain role '{role}'")


@dataclass
class Sample:
    """One (image, mask) pair tagged with its domain role."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) int64 class ids
    domain: str


@dataclass
class DomainDataset:
    samples: list
    domain: str
    seed: int
    params: DomainParams
    resolution: int

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _sample_rng(seed, index):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))


def _centerline(rng, params, h, w):
    cx = rng.uniform(params.center_lo, params.center_hi)
    amp = rng.uniform(0.0, params.amplitude_max)
    waves = rng.uniform(params.waves_lo, params.waves_hi)
    phase = rng.uniform(0.0, 1.0)
    y = np.arange(h) / h
    if params.shape_family == "sine":
        wiggle = np.sin(2.0 * np.pi * (waves * y + phase))
    else:
        frac = (waves * y + phase) % 1.0
        wiggle = 2.0 * np.abs(2.0 * frac - 1.0) - 1.0  # triangle wave in [-1, 1]
    return (cx + amp * wiggle) * w


def _grating(rng, freq, h, w):
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    coord = (xx * np.cos(theta) + yy * np.sin(theta)) / w
    return np.sin(2.0 * np.pi * freq * coord + phase)


def generate_sample(seed, index, params, resolution, domain):
    rng = _sample_rng(seed, index)
    h = w = resolution
    center = _centerline(rng, params, h, w)
    width = rng.uniform(params.width_lo, params.width_hi) * w
    xx = np.arange(w)
    mask = (np.abs(xx[None, :] - center[:, None]) < width / 2.0).astype(np.int64)

    bg = np.asarray(params.bg_color, dtype=np.float64).reshape(3, 1, 1)
    road = np.asarray(params.road_color, dtype=np.float64).reshape(3, 1, 1)
    if params.color_jitter > 0:
        shift = rng.uniform(-params.color_jitter, params.color_jitter, size=(3, 1, 1))
        bg = bg + shift
        road = road + shift * rng.uniform(0.5, 1.0)
    image = np.where(mask[None, :, :] == 1, road, bg)
    image = image + params.texture_amp * _grating(rng, params.texture_freq, h, w)[None, :, :]
    image = image + 0.5 * params.texture_amp * _grating(rng, 2.3 * params.texture_freq, h, w)[None, :, :]
    if params.road_texture_amp > 0:
        surface = _grating(rng, params.road_texture_freq, h, w)
        image = image + params.road_texture_amp * (surface * mask)[None, :, :]
    strength = params.shadow_strength
    if params.shadow_spread > 0:
        strength = rng.uniform(max(0.0, strength - params.shadow_spread),
                               min(1.0, strength + params.shadow_spread))
    if strength > 0:
        field = _grating(rng, params.shadow_freq, h, w)
        shade = np.clip((field - 0.2) / 0.6, 0.0, 1.0)
        image = image * (1.0 - strength * shade[None, :, :])
    image = image + rng.normal(0.0, params.noise_std, size=(3, h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask, domain=domain)


def generate_domain(seed, params, n, resolution, domain="target"):
    """Generate ``n`` procedural samples; bit-identical for identical arguments."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if resolution < 32 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 32, got {resolution}")
    samples = [generate_sample(seed, i, params, resolution, domain) for i in range(n)]
    return DomainDataset(samples=samples, domain=domain, seed=seed,
                         params=params, resolution=resolution)


# ---------------------------------------------------------------------------
# Augmentation

@dataclass(frozen=True)
class AugmentSpec:
    """Ordered pipeline: resize (optional) -> random crop -> random hflip -> maxpool."""

    resize_to: int | None = None
    crop: int = 64
    flip_prob: float = 0.5
    pool: bool = True


def _resize_matrix(n_in, n_out):
    if n_in == 1 or n_out == 1:
        idx0 = np.zeros(n_out, dtype=np.int64)
        return idx0, idx0, np.zeros(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _resize_image(image, size):
    # Corner-aligned bilinear, separable over rows then columns.
    _, h, w = image.shape
    i0, i1, t = _resize_matrix(h, size)
    tmp = image[:, i0, :] * (1.0 - t)[None, :, None] + image[:, i1, :] * t[None, :, None]
    j0, j1, u = _resize_matrix(w, size)
    out = tmp[:, :, j0] * (1.0 - u)[None, None, :] + tmp[:, :, j1] * u[None, None, :]
    return out.astype(image.dtype)


def _resize_mask(mask, size):
    h, w = mask.shape
    i0, i1, t = _resize_matrix(h, size)
    rows = np.where(t < 0.5, i0, i1)
    j0, j1, u = _resize_matrix(w, size)
    cols = np.where(u < 0.5, j0, j1)
    return mask[np.ix_(rows, cols)]


def _maxpool_image(image, k=2):
    c, h, w = image.shape
    if h % k or w % k:
        raise ValueError(f"maxpool augment needs dims divisible by {k}, got ({h}, {w})")
    return image.reshape(c, h // k, k, w // k, k).max(axis=(2, 4))


def augment(sample, spec, rng):
    """Apply the augmentation pipeline; image and mask stay pixel-aligned."""
    image, mask = sample.image, sample.mask
    if spec.resize_to is not None:
        image = _resize_image(image, spec.resize_to)
        mask = _resize_mask(mask, spec.resize_to)
    h, w = mask.shape
    if spec.crop > h or spec.crop > w:
        raise ValueError(f"crop {spec.crop} larger than image ({h}, {w})")
    oy = int(rng.integers(0, h - spec.crop + 1))
    ox = int(rng.integers(0, w - spec.crop + 1))
    image = image[:, oy : oy + spec.crop, ox : ox + spec.crop]
    mask = mask[oy : oy + spec.crop, ox : ox + spec.crop]
    if spec.flip_prob > 0 and rng.random() < spec.flip_prob:
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
    if spec.pool:
        image = _maxpool_image(image)
        mask = mask[::2, ::2]  # nearest-neighbor downsample, keeps integer ids
    return Sample(image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask),
                  domain=sample.domain)


def augmented_shape(spec, resolution):
    """(C, H, W) of a sample's image after the augmentation pipeline."""
    size = spec.resize_to if spec.resize_to is not None else resolution
    if spec.crop > size:
        raise ValueError(f"crop {spec.crop} larger than image size {size}")
    side = spec.crop // 2 if spec.pool else spec.crop
    return (3, side, side)


def eval_transform(spec):
    """Deterministic counterpart of ``augment`` for evaluation: center crop + pool."""

    def apply(sample):
        image, mask = sample.image, sample.mask
        h, w = mask.shape
        if spec.crop < h or spec.crop < w:
            oy = (h - spec.crop) // 2
            ox = (w - spec.crop) // 2
            image = image[:, oy : oy + spec.crop, ox : ox + spec.crop]
            mask = mask[oy : oy + spec.crop, ox : ox + spec.crop]
        if spec.pool:
            image = _maxpool_image(image)
            mask = mask[::2, ::2]
        return Sample(image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask),
                      domain=sample.domain)

    return apply


# ---------------------------------------------------------------------------
# Sampling streams

class MixStream:
    """Per-draw mixture of target and proximity samples with ratio ``r``.

    Each draw selects the target domain with probability r / (1 + r)
    (probability 1 when r is infinite), then picks uniformly with
    replacement and augments with that domain's spec.  Deterministic under
    the stream seed.
    """

    def __init__(self, target, proximity, r, seed, batch_size,
                 target_augment=None, proximity_augment=None):
        if r < 0:
            raise ValueError(f"mix ratio r must be nonnegative, got {r}")
        if r > 0 and (target is None or len(target) == 0):
            raise ValueError("r > 0 requires a nonempty target dataset")
        if not math.isinf(r) and (proximity is None or len(proximity) == 0):
            raise ValueError("finite r requires a nonempty proximity dataset")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.target = target
        self.proximity = proximity
        self.r = float(r)
        self.batch_size = int(batch_size)
        self.p_target = 1.0 if math.isinf(r) else r / (1.0 + r)
        self.target_augment = target_augment
        self.proximity_augment = proximity_augment
        self.rng = np.random.default_rng(seed)

    def draw(self):
        """One augmented sample from the mixture."""
        if self.rng.random() < self.p_target:
            dataset, spec = self.target, self.target_augment
        else:
            dataset, spec = self.proximity, self.proximity_augment
        sample = dataset[int(self.rng.integers(0, len(dataset)))]
        if spec is not None:
            sample = augment(sample, spec, self.rng)
        return sample

    def next_batch(self):
        return [self.draw() for _ in range(self.batch_size)]


def shuffle_select(stream):
    """Next mixed batch of samples from the stream."""
    return stream.next_batch()


def random_choice(dataset, rng, batch):
    """Uniform with replacement: ``batch`` samples from one dataset."""
    if len(dataset) == 0:
        raise ValueError("random_choice on an empty dataset")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    idx = rng.integers(0, len(dataset), size=batch)
    return [dataset[int(i)] for i in idx]


def batch_tensors(samples, augment_spec=None, rng=None):
    """Stack samples into an image tensor and an integer mask array."""
    if augment_spec is not None:
        samples = [augment(s, augment_spec, rng) for s in samples]
    images = Tensor(np.stack([s.image for s in samples]))
    masks = np.stack([s.mask for s in samples])
    return images, masks


# ---------------------------------------------------------------------------
# Dataset files: tensor container + JSON manifest entry

def save_dataset(dataset, path):
    tensors = []
    for i, s in enumerate(dataset.samples):
        tensors.append((f"image/{i:05d}", s.image))
        tensors.append((f"mask/{i:05d}", s.mask.astype(np.float32)))
    write_tensors(path, tensors)


def manifest_entry(dataset, filename):
    return {
        "file": filename,
        "domain": dataset.domain,
        "seed": dataset.seed,
        "n": len(dataset),
        "resolution": dataset.resolution,
        "params": dataset.params.to_dict(),
    }


def load_dataset(path, entry):
    tensors = dict(read_tensors(path))
    n = entry["n"]
    domain = entry["domain"]
    samples = []
    for i in range(n):
        image = tensors[f"image/{i:05d}"]
        mask = tensors[f"mask/{i:05d}"].astype(np.int64)
        samples.append(Sample(image=image, mask=mask, domain=domain))
    return DomainDataset(samples=samples, domain=domain, seed=entry["seed"],
                         params=DomainParams.from_dict(entry["params"]),
                         resolution=entry["resolution"])


def write_manifest(path, entries):
    with open(path, "w") as f:
        json.dump({"datasets": entries}, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path):
    with open(path) as f:
        return json.load(f)["datasets"]

"""Network construction: teacher, teacher split, compact student parts.

A ``ModuleGraph`` is an ordered list of layers, each pairing a ``LayerSpec``
with its parameter tensors.  The teacher is a small conv encoder with a
dense segmentation head.  The student's feature extractor copies the front
part's layer structure but swaps every convolution for a grouped one
(groups = gcd of the channel counts); the student head is a compact
decoder in the same grouped style.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .serialization import read_tensors, write_tensors


@dataclass(frozen=True)
class LayerSpec:
    """One layer's kind and hyperparameters.

    Fields that do not apply to a kind stay at their defaults: conv uses
    in_ch/out_ch/kernel/stride/padding/groups, batchnorm uses channels,
    maxpool uses kernel/stride, upsample uses scale, relu uses nothing.
    """

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 1
    channels: int = 0
    scale: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "batchnorm", "relu", "maxpool", "upsample"):
            raise ValueError(f"unknown layer kind '{self.kind}'")
        if self.kind == "conv":
            if self.groups < 1 or self.in_ch % self.groups or self.out_ch % self.groups:
                raise ValueError(
                    f"conv groups {self.groups} must divide channels ({self.in_ch}, {self.out_ch})"
                )


def conv_spec(in_ch, out_ch, kernel, stride=1, padding=0, groups=1):
    return LayerSpec("conv", in_ch=in_ch, out_ch=out_ch, kernel=kernel,
                     stride=stride, padding=padding, groups=groups)


class Layer:
    """Runtime layer: a spec plus the parameter tensors it owns."""

    def __init__(self, spec):
        self.spec = spec
        self.params = {}
        self.bn_state = None

    def init_params(self, rng, dtype=np.float32):
        spec = self.spec
        if spec.kind == "conv":
            fan_in = (spec.in_ch // spec.groups) * spec.kernel * spec.kernel
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound,
                            size=(spec.out_ch, spec.in_ch // spec.groups, spec.kernel, spec.kernel))
            self.params["weight"] = T.Tensor(w.astype(dtype), requires_grad=True)
            self.params["bias"] = T.Tensor(np.zeros(spec.out_ch, dtype=dtype), requires_grad=True)
        elif spec.kind == "batchnorm":
            self.params["gamma"] = T.Tensor(np.ones(spec.channels, dtype=dtype), requires_grad=True)
            self.params["beta"] = T.Tensor(np.zeros(spec.channels, dtype=dtype), requires_grad=True)
            self.bn_state = T.BatchNormState(spec.channels, dtype=dtype)
        return self

    @property
    def frozen(self):
        return bool(self.params) and not any(p.requires_grad for p in self.params.values())

    def forward(self, x, training):
        spec = self.spec
        if spec.kind == "conv":
            return T.conv2d(x, self.params["weight"], self.params["bias"],
                            stride=spec.stride, padding=spec.padding, groups=spec.groups)
        if spec.kind == "batchnorm":
            # A frozen batchnorm also freezes its running statistics.
            mode = training and not self.frozen
            return T.batchnorm2d(x, self.params["gamma"], self.params["beta"],
                                 self.bn_state, training=mode)
        if spec.kind == "relu":
            return T.relu(x)
        if spec.kind == "maxpool":
            return T.maxpool2d(x, spec.kernel, spec.stride)
        return T.bilinear_upsample(x, spec.scale)

    def copy(self):
        dup = Layer(self.spec)
        for name, p in self.params.items():
            dup.params[name] = T.Tensor(p.data.copy(), requires_grad=p.requires_grad)
        if self.bn_state is not None:
            st = T.BatchNormState(len(self.bn_state.running_mean),
                                  momentum=self.bn_state.momentum,
                                  dtype=self.bn_state.running_mean.dtype)
            st.running_mean = self.bn_state.running_mean.copy()
            st.running_var = self.bn_state.running_var.copy()
            st.num_batches = self.bn_state.num_batches
            dup.bn_state = st
        return dup


def propagate_shape(spec, shape):
    """Output (C, H, W) of one layer spec, validating the input shape."""
    c, h, w = shape
    if spec.kind == "conv":
        if c != spec.in_ch:
            raise ValueError(f"conv expects {spec.in_ch} input channels, got {c}")
        oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"conv kernel {spec.kernel} too large for input ({h}, {w})")
        return (spec.out_ch, oh, ow)
    if spec.kind == "batchnorm":
        if c != spec.channels:
            raise ValueError(f"batchnorm expects {spec.channels} channels, got {c}")
        return shape
    if spec.kind == "relu":
        return shape
    if spec.kind == "maxpool":
        if h % spec.stride or w % spec.stride or h < spec.kernel or w < spec.kernel:
            raise ValueError(f"maxpool kernel {spec.kernel}/stride {spec.stride} does not tile ({h}, {w})")
        return (c, (h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1)
    return (c, h * spec.scale, w * spec.scale)


class ModuleGraph:
    """Ordered layer sequence with named parameters and per-parameter freezing."""

    def __init__(self, layers, names=None):
        self.layers = list(layers)
        if names is None:
            names = [f"{i:02d}.{layer.spec.kind}" for i, layer in enumerate(self.layers)]
        if len(names) != len(self.layers):
            raise ValueError("layer/name count mismatch")
        self.names = list(names)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def params(self):
        out = []
        for name, layer in zip(self.names, self.layers):
            for pname, p in layer.params.items():
                out.append((f"{name}.{pname}", p))
        return out

    def trainable_params(self):
        return [(n, p) for n, p in self.params() if p.requires_grad]

    def set_frozen(self, prefix, frozen):
        """Freeze/unfreeze every parameter whose name starts with ``prefix``."""
        matched = 0
        for name, p in self.params():
            if name.startswith(prefix):
                p.requires_grad = not frozen
                matched += 1
        if matched == 0:
            raise ValueError(f"no parameter matches prefix '{prefix}'")
        return matched

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = propagate_shape(layer.spec, shape)
            except ValueError as e:
                raise ValueError(f"layer {i} ({self.names[i]}): {e}") from None
        return shape

    def state_tensors(self):
        """All persistent arrays, checkpoint-ready: parameters then BN buffers."""
        out = []
        for name, layer in zip(self.names, self.layers):
            for pname, p in layer.params.items():
                out.append((f"{name}.{pname}", p.data))
            if layer.bn_state is not None:
                st = layer.bn_state
                out.append((f"{name}.running_mean", st.running_mean))
                out.append((f"{name}.running_var", st.running_var))
                out.append((f"{name}.num_batches", np.array([st.num_batches], dtype=np.float32)))
        return out

    def load_state(self, tensors):
        table = dict(tensors)
        for name, layer in zip(self.names, self.layers):
            for pname, p in layer.params.items():
                key = f"{name}.{pname}"
                if key not in table:
                    raise ValueError(f"checkpoint missing tensor '{key}'")
                arr = table[key]
                if arr.shape != p.data.shape:
                    raise ValueError(
                        f"checkpoint tensor '{key}' has shape {arr.shape}, expected {p.data.shape}"
                    )
                p.data = arr.astype(p.data.dtype).copy()
            if layer.bn_state is not None:
                st = layer.bn_state
                st.running_mean = table[f"{name}.running_mean"].astype(st.running_mean.dtype).copy()
                st.running_var = table[f"{name}.running_var"].astype(st.running_var.dtype).copy()
                st.num_batches = int(round(float(table[f"{name}.num_batches"][0])))

    def save(self, path):
        write_tensors(path, self.state_tensors())

    def load(self, path):
        self.load_state(read_tensors(path))

    def copy(self):
        return ModuleGraph([layer.copy() for layer in self.layers], list(self.names))

    def copy_params_from(self, other):
        """Copy parameter values positionally from a graph with the same layer sequence."""
        if len(self.layers) != len(other.layers):
            raise ValueError("graphs have different layer counts")
        for mine, theirs in zip(self.layers, other.layers):
            for pname, p in mine.params.items():
                src = theirs.params[pname].data
                if p.data.shape != src.shape:
                    raise ValueError(f"parameter '{pname}' shape mismatch: {p.data.shape} vs {src.shape}")
                p.data = src.astype(p.data.dtype).copy()
            if mine.bn_state is not None and theirs.bn_state is not None:
                mine.bn_state.running_mean = theirs.bn_state.running_mean.copy()
                mine.bn_state.running_var = theirs.bn_state.running_var.copy()
                mine.bn_state.num_batches = theirs.bn_state.num_batches


def set_frozen(graph, prefix, frozen):
    return graph.set_frozen(prefix, frozen)


def concat_graphs(*named_parts):
    """Stack graphs into one, prefixing each part's parameter names."""
    layers, names = [], []
    for prefix, part in named_parts:
        layers.extend(part.layers)
        names.extend(f"{prefix}.{n}" for n in part.names)
    return ModuleGraph(layers, names)


@dataclass(frozen=True)
class TeacherSplit:
    """Teacher cut in two: the general-feature front and the task tail."""

    front: ModuleGraph
    tail: ModuleGraph
    split_index: int


@dataclass
class ArchConfig:
    """Architecture description shared by the teacher and the student parts."""

    blocks: int = 4
    widths: tuple = (16, 32, 64, 128)
    in_channels: int = 3
    classes: int = 2
    resolution: int = 32
    split_index: int | None = None
    grouping: str = "gcd"

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != self.blocks:
            raise ValueError(f"widths {self.widths} must list one width per block ({self.blocks})")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        down = 2 ** self.blocks
        if self.resolution < down or self.resolution % down:
            raise ValueError(
                f"resolution {self.resolution} must be a positive multiple of 2^blocks = {down}"
            )
        if self.grouping not in ("gcd", "dense"):
            raise ValueError(f"grouping must be 'gcd' or 'dense', got '{self.grouping}'")
        if self.split_index is not None:
            n_layers = 7 * self.blocks + 5
            if not 0 < self.split_index < n_layers:
                raise ValueError(
                    f"split_index {self.split_index} out of range (0, {n_layers})"
                )

    @property
    def default_split_index(self):
        # Cut at the end of the penultimate encoder block (7 layers per block).
        return 7 * (self.blocks - 1)

    @property
    def effective_split_index(self):
        return self.split_index if self.split_index is not None else self.default_split_index

    def to_dict(self):
        return {
            "blocks": self.blocks,
            "widths": list(self.widths),
            "in_channels": self.in_channels,
            "classes": self.classes,
            "resolution": self.resolution,
            "split_index": self.split_index,
            "grouping": self.grouping,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown architecture fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def build_teacher(cfg, rng, dtype=np.float32):
    """Teacher network: ``blocks`` downsampling conv blocks plus a dense head.

    Each block is 2x(Conv3x3 + BN + ReLU) followed by maxpool2; the head is
    two conv layers and a bilinear upsample back to the input resolution.
    """
    specs = []
    in_ch = cfg.in_channels
    for width in cfg.widths:
        specs += _conv_bn_relu(in_ch, width, kernel=3, padding=1)
        specs += _conv_bn_relu(width, width, kernel=3, padding=1)
        specs.append(LayerSpec("maxpool", kernel=2, stride=2))
        in_ch = width
    head_width = max(cfg.widths[-1] // 2, cfg.classes)
    specs += _conv_bn_relu(in_ch, head_width, kernel=3, padding=1)
    specs.append(conv_spec(head_width, cfg.classes, kernel=1))
    specs.append(LayerSpec("upsample", scale=2 ** cfg.blocks))
    graph = ModuleGraph([Layer(s).init_params(rng, dtype) for s in specs])
    graph.output_shape((cfg.in_channels, cfg.resolution, cfg.resolution))
    return graph


def _conv_bn_relu(in_ch, out_ch, kernel, padding, groups=1):
    return [
        conv_spec(in_ch, out_ch, kernel=kernel, padding=padding, groups=groups),
        LayerSpec("batchnorm", channels=out_ch),
        LayerSpec("relu"),
    ]


def split_teacher(teacher, split_index):
    """Cut the teacher at a layer boundary; both halves share the original layers."""
    if not 0 < split_index < len(teacher.layers):
        raise ValueError(
            f"split_index {split_index} out of range (0, {len(teacher.layers)})"
        )
    front = ModuleGraph(teacher.layers[:split_index], teacher.names[:split_index])
    tail = ModuleGraph(teacher.layers[split_index:], teacher.names[split_index:])
    return TeacherSplit(front=front, tail=tail, split_index=split_index)


def gcd_groups(in_ch, out_ch):
    """Group count for a compact conv: gcd of the channel counts."""
    if in_ch < 1 or out_ch < 1:
        raise ValueError(f"channel counts must be positive, got ({in_ch}, {out_ch})")
    return math.gcd(in_ch, out_ch)


def build_extractor_from_front(front, rng, grouping="gcd", dtype=np.float32):
    """Student feature extractor: the front's layer structure with grouped convs.

    Parameters are freshly initialized, never copied from the teacher; every
    conv's group count becomes gcd(in_ch, out_ch) unless ``grouping`` is
    'dense'.  Output shapes match the front's for any input.
    """
    if grouping not in ("gcd", "dense"):
        raise ValueError(f"grouping must be 'gcd' or 'dense', got '{grouping}'")
    specs = []
    for layer in front.layers:
        spec = layer.spec
        if spec.kind == "conv":
            g = gcd_groups(spec.in_ch, spec.out_ch) if grouping == "gcd" else 1
            spec = replace(spec, groups=g)
        specs.append(spec)
    return ModuleGraph([Layer(s).init_params(rng, dtype) for s in specs])


def build_student_head(in_ch, classes, final_scale, rng, grouping="gcd", dtype=np.float32):
    """Compact decoder: two groups of 3x(Conv+BN+ReLU), each followed by a 2x
    bilinear upsample, then a 1x1 classifier conv and a final upsample.

    Channel widths halve per group; all convs use gcd grouping unless
    ``grouping`` is 'dense'.
    """
    if in_ch < 1:
        raise ValueError(f"in_ch must be positive, got {in_ch}")
    if classes < 2:
        raise ValueError(f"classes must be >= 2 (binary segmentation needs 2 logit channels), got {classes}")
    if final_scale < 1:
        raise ValueError(f"final_scale must be >= 1, got {final_scale}")
    if grouping not in ("gcd", "dense"):
        raise ValueError(f"grouping must be 'gcd' or 'dense', got '{grouping}'")

    def groups_for(ci, co):
        return gcd_groups(ci, co) if grouping == "gcd" else 1

    w1 = max(in_ch // 2, classes)
    w2 = max(w1 // 2, classes)
    specs = []
    for ci, co in ((in_ch, w1), (w1, w1), (w1, w1)):
        specs += _conv_bn_relu(ci, co, kernel=3, padding=1, groups=groups_for(ci, co))
    specs.append(LayerSpec("upsample", scale=2))
    for ci, co in ((w1, w2), (w2, w2), (w2, w2)):
        specs += _conv_bn_relu(ci, co, kernel=3, padding=1, groups=groups_for(ci, co))
    specs.append(LayerSpec("upsample", scale=2))
    specs.append(conv_spec(w2, classes, kernel=1, groups=groups_for(w2, classes)))
    if final_scale > 1:
        specs.append(LayerSpec("upsample", scale=final_scale))
    return ModuleGraph([Layer(s).init_params(rng, dtype) for s in specs])


def count_params(graph):
    """Total number of trainable parameter elements in the graph."""
    return sum(p.data.size for _, p in graph.params())


def count_flops(graph, input_shape):
    """Per-image forward FLOPs: one multiply-add counts as 2, elementwise ops as 1.

    Convolutions contribute 2 * out_elems * (in_ch / groups) * k^2; batchnorm,
    relu, pooling and upsampling each contribute their output element count.
    """
    shape = tuple(input_shape)
    total = 0
    for i, layer in enumerate(graph.layers):
        spec = layer.spec
        try:
            out_shape = propagate_shape(spec, shape)
        except ValueError as e:
            raise ValueError(f"layer {i} ({graph.names[i]}): {e}") from None
        out_elems = int(np.prod(out_shape))
        if spec.kind == "conv":
            total += 2 * out_elems * (spec.in_ch // spec.groups) * spec.kernel * spec.kernel
        else:
            total += out_elems
        shape = out_shape
    return total

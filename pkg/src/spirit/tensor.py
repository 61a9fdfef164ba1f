"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous (row-major) numpy array.  Operations on
tensors that require gradients are recorded on a module-level tape in
forward execution order; ``backward`` replays the tape in exact reverse
order, accumulating gradients into every reachable tensor that has
``requires_grad`` set.  The tape is confined to a single thread and is
consumed by ``backward``, so a second backward call without a fresh
forward pass raises.

Training runs in float32 by default; every op preserves its input dtype,
so gradient checks can be run end to end in float64.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """n-dimensional numeric array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Elementwise operators cover what the training loops and tests need;
    # shapes must match exactly (no broadcasting), scalars are allowed.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


class _TapeNode:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


_tape: list[_TapeNode] = []
_grad_enabled: bool = True


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; outputs created inside never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def tape_size():
    return len(_tape)


def _result(data, *inputs):
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.requires_grad = requires
    out._grad = None
    return out


def _record(out, backward_fn):
    if out.requires_grad:
        _tape.append(_TapeNode(out, backward_fn))


def backward(loss):
    """Populate gradients of every recorded tensor reachable from ``loss``.

    Gradients are summed into ``tensor.grad``; tensors with
    ``requires_grad=False`` are left untouched.  The tape is cleared on
    completion, so backward cannot run twice on the same forward pass.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not _tape:
        raise RuntimeError("backward called on an empty tape; run a forward pass first")
    loss._grad = np.ones_like(loss.data)
    try:
        for node in reversed(_tape):
            g = node.out._grad
            if g is None:
                continue
            node.backward_fn(g)
    finally:
        _tape.clear()


def _coerce(other, like):
    if isinstance(other, Tensor):
        return other
    return Tensor(np.full(like.data.shape, other, dtype=like.data.dtype))


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    b = _coerce(b, a)
    _check_same_shape("add", a, b)
    out = _result(a.data + b.data, a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    _record(out, bwd)
    return out


def sub(a, b):
    b = _coerce(b, a)
    _check_same_shape("sub", a, b)
    out = _result(a.data - b.data, a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    _record(out, bwd)
    return out


def mul(a, b):
    b = _coerce(b, a)
    _check_same_shape("mul", a, b)
    out = _result(a.data * b.data, a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    _record(out, bwd)
    return out


def tensor_sum(a):
    out = _result(a.data.sum(), a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g))

    _record(out, bwd)
    return out


def tensor_mean(a):
    n = a.data.size
    out = _result(a.data.mean(), a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g / n))

    _record(out, bwd)
    return out


def relu(x):
    out = _result(np.maximum(x.data, 0), x)
    if out.requires_grad:
        mask = x.data > 0

        def bwd(g):
            x.accumulate_grad(g * mask)

        _record(out, bwd)
    return out


def _check_nchw(op, x):
    if x.data.ndim != 4:
        raise ValueError(f"{op}: expected NCHW input, got {x.data.ndim} dims")


def conv2d(x, weight, bias, stride=1, padding=0, groups=1):
    """2-d cross-correlation over NCHW input with grouped channels.

    ``weight`` has shape (out_ch, in_ch // groups, k, k); output channel c
    only sees the input channels of its own group.  Gradients are defined
    for input, weight and bias.
    """
    _check_nchw("conv2d", x)
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-d, got {weight.data.ndim} dims")
    n, in_ch, h, w = x.data.shape
    out_ch, wc, kh, kw = weight.data.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid kernel/stride/padding ({k}, {stride}, {padding})")
    if groups < 1 or in_ch % groups != 0:
        raise ValueError(f"conv2d: groups={groups} does not divide input channels {in_ch}")
    if out_ch % groups != 0:
        raise ValueError(f"conv2d: groups={groups} does not divide output channels {out_ch}")
    if wc != in_ch // groups:
        raise ValueError(
            f"conv2d: weight in-channel dim {wc} != input channels {in_ch} / groups {groups}"
        )
    if bias.data.shape != (out_ch,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({out_ch},)")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    cig = in_ch // groups
    cog = out_ch // groups
    if padding:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = x.data
    # Group-major layouts so every kernel position becomes one batched GEMM:
    # patches (G, cig, N*OH*OW) against weights (G, cog, cig).
    xg = xpad.reshape(n, groups, cig, *xpad.shape[2:])
    wg = weight.data.reshape(groups, cog, cig, k, k)
    # Contiguous per-position weight matrices keep matmul on the BLAS path.
    wk = np.ascontiguousarray(wg.transpose(3, 4, 0, 1, 2))  # (k, k, G, cog, cig)
    m = n * oh * ow

    def patch_mat(i, j):
        patch = xg[:, :, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
        return np.ascontiguousarray(patch.transpose(1, 2, 0, 3, 4)).reshape(groups, cig, m)

    out = np.zeros((groups, cog, m), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out += np.matmul(wk[i, j], patch_mat(i, j))
    out = out.reshape(groups, cog, n, oh, ow).transpose(2, 0, 1, 3, 4).reshape(n, out_ch, oh, ow)
    out = out + bias.data.reshape(1, out_ch, 1, 1)
    result = _result(out, x, weight, bias)

    if result.requires_grad:

        def bwd(g):
            gg = g.reshape(n, groups, cog, oh, ow)
            gm = np.ascontiguousarray(gg.transpose(1, 2, 0, 3, 4)).reshape(groups, cog, m)
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                dwk = np.empty_like(wk)
                for i in range(k):
                    for j in range(k):
                        dwk[i, j] = np.matmul(gm, patch_mat(i, j).transpose(0, 2, 1))
                weight.accumulate_grad(
                    dwk.transpose(2, 3, 4, 0, 1).reshape(weight.data.shape)
                )
            if x.requires_grad:
                dxp = np.zeros((n, groups, cig, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
                wt = np.ascontiguousarray(wk.transpose(0, 1, 2, 4, 3))  # (k, k, G, cig, cog)
                for i in range(k):
                    for j in range(k):
                        dpatch = np.matmul(wt[i, j], gm)  # (G, cig, m)
                        dpatch = dpatch.reshape(groups, cig, n, oh, ow).transpose(2, 0, 1, 3, 4)
                        dxp[:, :, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dpatch
                dxp = dxp.reshape(n, in_ch, h + 2 * padding, w + 2 * padding)
                if padding:
                    dxp = dxp[:, :, padding : padding + h, padding : padding + w]
                x.accumulate_grad(dxp)

        _record(result, bwd)
    return result


class BatchNormState:
    """Per-channel running statistics for one batchnorm layer."""

    __slots__ = ("running_mean", "running_var", "momentum", "num_batches")

    def __init__(self, channels, momentum=0.1, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = float(momentum)
        self.num_batches = 0

    @property
    def initialized(self):
        return self.num_batches > 0


def batchnorm2d(x, gamma, beta, state, training, eps=1e-5):
    """Channel-wise batch normalization over NCHW input.

    Train mode normalizes with batch statistics and folds them into the
    running averages; eval mode normalizes with the running statistics and
    requires at least one prior train-mode update.
    """
    _check_nchw("batchnorm2d", x)
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batchnorm2d: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} != ({c},)"
        )
    if eps <= 0:
        raise ValueError(f"batchnorm2d: epsilon must be positive, got {eps}")

    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = ((1.0 - mom) * state.running_mean + mom * mu).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1.0 - mom) * state.running_var + mom * var).astype(
            state.running_var.dtype
        )
        state.num_batches += 1
    else:
        if not state.initialized:
            raise RuntimeError(
                "batchnorm2d: eval mode requested before any train-mode update initialized the running statistics"
            )
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = _result(out_data, x, gamma, beta)

    if out.requires_grad:

        def bwd(g):
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(1, c, 1, 1)
                if training:
                    # Batch statistics depend on x, so their gradients flow back too.
                    m = n * h * w
                    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
                else:
                    dx = dxhat * inv.reshape(1, c, 1, 1)
                x.accumulate_grad(dx)

        _record(out, bwd)
    return out


def maxpool2d(x, kernel, stride):
    """Max pooling; the gradient routes to the first max in row-major window order."""
    _check_nchw("maxpool2d", x)
    n, c, h, w = x.data.shape
    if kernel < 1 or stride < 1:
        raise ValueError(f"maxpool2d: kernel/stride must be >= 1, got ({kernel}, {stride})")
    if h % stride != 0 or w % stride != 0:
        raise ValueError(f"maxpool2d: spatial dims ({h}, {w}) not divisible by stride {stride}")
    if h < kernel or w < kernel or (h - kernel) % stride != 0 or (w - kernel) % stride != 0:
        raise ValueError(f"maxpool2d: kernel {kernel} does not tile input ({h}, {w}) at stride {stride}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1

    if kernel == stride:
        # Non-overlapping windows: pure reshape, no strided views.
        flat = np.ascontiguousarray(
            x.data.reshape(n, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(n, c, oh, ow, kernel * kernel)
    else:
        windows = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
        flat = windows[:, :, ::stride, ::stride].reshape(n, c, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=-1)  # argmax returns the first max: row-major tie break
    out = _result(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], x)

    if out.requires_grad:

        def bwd(g):
            if kernel == stride:
                dflat = np.zeros((n, c, oh, ow, kernel * kernel), dtype=x.data.dtype)
                np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
                dx = dflat.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
                x.accumulate_grad(dx.reshape(n, c, h, w))
            else:
                dn, dc, doh, dow = np.indices((n, c, oh, ow), sparse=False)
                hh = doh * stride + idx // kernel
                ww = dow * stride + idx % kernel
                dx = np.zeros_like(x.data)
                np.add.at(dx, (dn, dc, hh, ww), g)
                x.accumulate_grad(dx)

        _record(out, bwd)
    return out


def _interp_matrix(n_in, n_out, dtype):
    # Corner-aligned sampling: output corners map exactly onto input corners.
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.floor(src).astype(np.int64)
        i0 = np.minimum(i0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = src - i0
        np.add.at(m, (np.arange(n_out), i0), 1.0 - t)
        np.add.at(m, (np.arange(n_out), i1), t)
    return m.astype(dtype)


def bilinear_upsample(x, scale):
    """Corner-aligned bilinear upsampling of NCHW input by an integer factor."""
    _check_nchw("bilinear_upsample", x)
    if scale < 1:
        raise ValueError(f"bilinear_upsample: scale must be >= 1, got {scale}")
    n, c, h, w = x.data.shape
    if scale == 1:
        out = _result(x.data.copy(), x)
        if out.requires_grad:
            _record(out, lambda g: x.accumulate_grad(g))
        return out
    my = _interp_matrix(h, h * scale, x.data.dtype)
    mx = _interp_matrix(w, w * scale, x.data.dtype)
    tmp = np.einsum("ph,nchw->ncpw", my, x.data)
    out = _result(np.einsum("qw,ncpw->ncpq", mx, tmp), x)

    if out.requires_grad:

        def bwd(g):
            dtmp = np.einsum("qw,ncpq->ncpw", mx, g)
            x.accumulate_grad(np.einsum("ph,ncpw->nchw", my, dtmp))

        _record(out, bwd)
    return out


def mse_loss(a, b):
    """Mean squared difference over all elements; symmetric in its arguments."""
    if isinstance(b, np.ndarray):
        b = Tensor(b)
    _check_same_shape("mse_loss", a, b)
    diff = a.data - b.data
    n = diff.size
    out = _result(np.asarray((diff * diff).mean(), dtype=a.data.dtype), a, b)

    if out.requires_grad:

        def bwd(g):
            scaled = (2.0 / n) * g * diff
            if a.requires_grad:
                a.accumulate_grad(scaled)
            if b.requires_grad:
                b.accumulate_grad(-scaled)

        _record(out, bwd)
    return out


def pixel_cross_entropy(logits, labels):
    """Softmax cross-entropy averaged over every pixel of an N,K,H,W logit map.

    ``labels`` is an integer N,H,W array of class ids in [0, K).  The
    softmax is stabilized by max subtraction.
    """
    _check_nchw("pixel_cross_entropy", logits)
    if isinstance(labels, Tensor):
        labels = labels.data
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    n, k, h, w = logits.data.shape
    if labels.shape != (n, h, w):
        raise ValueError(
            f"pixel_cross_entropy: labels shape {labels.shape} != {(n, h, w)}"
        )
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        first = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(
            f"pixel_cross_entropy: label {int(labels[first])} out of range [0, {k}) at pixel {first}"
        )

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sez)
    picked = np.take_along_axis(log_probs, labels[:, None, :, :], axis=1)[:, 0]
    m = n * h * w
    out = _result(np.asarray(-picked.mean(), dtype=logits.data.dtype), logits)

    if out.requires_grad:

        def bwd(g):
            p = ez / sez
            nn, hh, ww = np.indices(labels.shape, sparse=False)
            p[nn, labels, hh, ww] -= 1.0
            logits.accumulate_grad(g * p / m)

        _record(out, bwd)
    return out

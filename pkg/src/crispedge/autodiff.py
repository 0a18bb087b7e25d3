"""Dense NCHW layers with hand-written forward and backward passes.

Tensors are plain ``float64`` numpy arrays of rank 4 laid out as
(batch, channels, height, width).  Every backward function returns the
gradient with respect to the layer input and *accumulates* parameter
gradients into :attr:`ParamTensor.grad`; callers zero them explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError

DTYPE = np.float64
SIGMOID_FLOOR = 1e-6
SIGMOID_CEIL = 1.0 - 1e-6

LAYER_KINDS = ("conv", "grouped-deconv", "maxpool2", "relu", "sigmoid", "elementwise-sum")


@dataclass
class LayerSpec:
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    in_channels: int = 0
    out_channels: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"{self.label}: unknown layer kind {self.kind!r}")
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.kind in ("conv", "grouped-deconv"):
            if self.groups < 1 or self.in_channels < 1 or self.out_channels < 1:
                raise ConfigurationError(f"{self.label}: channels and groups must be positive")
            if self.in_channels % self.groups or self.out_channels % self.groups:
                raise ConfigurationError(
                    f"{self.label}: groups={self.groups} must divide in_channels={self.in_channels}"
                    f" and out_channels={self.out_channels}"
                )
            if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
                raise ConfigurationError(f"{self.label}: invalid kernel/stride/padding")

    @property
    def label(self):
        return self.name or self.kind

    def weight_shape(self):
        kh, kw = self.kernel
        if self.kind == "conv":
            return (self.out_channels, self.in_channels // self.groups, kh, kw)
        if self.kind == "grouped-deconv":
            return (self.in_channels, self.out_channels // self.groups, kh, kw)
        return None

    def fan_in(self):
        """Number of inputs feeding one output unit (used for He init)."""
        kh, kw = self.kernel
        if self.kind == "conv":
            return (self.in_channels // self.groups) * kh * kw
        if self.kind == "grouped-deconv":
            # each output pixel only sees kernel taps aligned with the stride
            return max(1, (self.in_channels // self.groups) * kh * kw // (self.stride**2))
        return 0

    def output_hw(self, h, w):
        kh, kw = self.kernel
        s, p = self.stride, self.padding
        if self.kind == "conv":
            oh, ow = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
        elif self.kind == "grouped-deconv":
            oh, ow = (h - 1) * s - 2 * p + kh, (w - 1) * s - 2 * p + kw
        elif self.kind == "maxpool2":
            if h % 2 or w % 2:
                raise ConfigurationError(f"{self.label}: maxpool2 needs even spatial dims, got {h}x{w}")
            oh, ow = h // 2, w // 2
        else:
            oh, ow = h, w
        if oh <= 0 or ow <= 0:
            raise ConfigurationError(f"{self.label}: input {h}x{w} too small for kernel {self.kernel}")
        return oh, ow


@dataclass
class ParamTensor:
    values: np.ndarray
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.m is None:
            self.m = np.zeros_like(self.values)
        if self.v is None:
            self.v = np.zeros_like(self.values)

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def _check_input(x, spec):
    if x.ndim != 4:
        raise ConfigurationError(f"{spec.label}: expected rank-4 input, got shape {x.shape}")
    if spec.in_channels and x.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"{spec.label}: expected {spec.in_channels} input channels, got {x.shape[1]}"
        )


def _check_weight(weight, bias, spec):
    if weight.shape != spec.weight_shape():
        raise ConfigurationError(
            f"{spec.label}: weight shape {weight.shape} != expected {spec.weight_shape()}"
        )
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigurationError(f"{spec.label}: bias shape {bias.shape} != ({spec.out_channels},)")


def _windows(xp, kernel, stride):
    """View of shape (n, c, oh, ow, kh, kw) over a padded input."""
    win = sliding_window_view(xp, kernel, axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _gather(xp, weight, groups, stride):
    """Grouped correlation: xp (n,C,H,W) with weight (O,C/g,kh,kw)."""
    win = _windows(xp, weight.shape[2:], stride)
    n, c, oh, ow = win.shape[:4]
    cg, og = c // groups, weight.shape[0] // groups
    out = np.empty((n, weight.shape[0], oh, ow), dtype=DTYPE)
    for g in range(groups):
        wg = weight[g * og:(g + 1) * og]
        xg = win[:, g * cg:(g + 1) * cg]
        out[:, g * og:(g + 1) * og] = np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out


def _gather_weight_grad(xp, upstream, weight_shape, groups, stride):
    """Gradient of :func:`_gather` with respect to its weight."""
    win = _windows(xp, weight_shape[2:], stride)
    c = xp.shape[1]
    cg, og = c // groups, weight_shape[0] // groups
    gw = np.empty(weight_shape, dtype=DTYPE)
    for g in range(groups):
        xg = win[:, g * cg:(g + 1) * cg]
        ug = upstream[:, g * og:(g + 1) * og]
        gw[g * og:(g + 1) * og] = np.tensordot(ug, xg, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def _tap(arr, i, j, oh, ow, stride):
    return arr[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]


def _scatter(src, weight, groups, stride, padded_hw):
    """Adjoint of :func:`_gather` with respect to its input.

    ``src`` has shape (n, O, oh, ow); the result has shape (n, C, H, W) with
    (H, W) = ``padded_hw``.
    """
    n, o, oh, ow = src.shape
    og, cg = o // groups, weight.shape[1]
    kh, kw = weight.shape[2:]
    if stride == 1 and tuple(padded_hw) == (oh + kh - 1, ow + kw - 1):
        # full correlation with the flipped, group-transposed kernel
        wt = weight.reshape(groups, og, cg, kh, kw).transpose(0, 2, 1, 3, 4).reshape(groups * cg, og, kh, kw)
        srcp = np.pad(src, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        return _gather(srcp, np.ascontiguousarray(wt[:, :, ::-1, ::-1]), groups, 1)
    out = np.zeros((n, cg * groups) + tuple(padded_hw), dtype=DTYPE)
    if cg == 1 and og == 1:
        for i in range(kh):
            for j in range(kw):
                _tap(out, i, j, oh, ow, stride)[...] += src * weight[:, 0, i, j][None, :, None, None]
        return out
    for g in range(groups):
        sg = src[:, g * og:(g + 1) * og]
        wg = weight[g * og:(g + 1) * og]
        cols = np.tensordot(sg, wg, axes=([1], [0]))  # (n, oh, ow, cg, kh, kw)
        dst = out[:, g * cg:(g + 1) * cg]
        for i in range(kh):
            for j in range(kw):
                _tap(dst, i, j, oh, ow, stride)[...] += cols[..., i, j].transpose(0, 3, 1, 2)
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv_forward(x, weight, spec, bias=None):
    """Grouped 2-D convolution (cross-correlation) with zero padding."""
    _check_input(x, spec)
    w = weight.values if isinstance(weight, ParamTensor) else weight
    b = bias.values if isinstance(bias, ParamTensor) else bias
    _check_weight(w, b, spec)
    spec.output_hw(*x.shape[2:])
    out = _gather(_pad(x, spec.padding), w, spec.groups, spec.stride)
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv_backward(x, upstream, weight, spec, bias=None):
    """Return dL/dx; add dL/dweight (and dL/dbias) into the param grads."""
    _check_input(x, spec)
    oh, ow = spec.output_hw(*x.shape[2:])
    if upstream.shape != (x.shape[0], spec.out_channels, oh, ow):
        raise ConfigurationError(
            f"{spec.label}: upstream gradient shape {upstream.shape} does not match output"
            f" {(x.shape[0], spec.out_channels, oh, ow)}"
        )
    p = spec.padding
    xp = _pad(x, p)
    weight.grad += _gather_weight_grad(xp, upstream, weight.shape, spec.groups, spec.stride)
    if bias is not None:
        bias.grad += upstream.sum(axis=(0, 2, 3))
    dxp = _scatter(upstream, weight.values, spec.groups, spec.stride, xp.shape[2:])
    h, w = x.shape[2:]
    return dxp[:, :, p:p + h, p:p + w]


def _deconv_full_hw(h, w, spec):
    kh, kw = spec.kernel
    return ((h - 1) * spec.stride + kh, (w - 1) * spec.stride + kw)


def grouped_deconv_forward(x, weight, spec, bias=None):
    """Grouped transposed convolution (the adjoint of a strided conv)."""
    _check_input(x, spec)
    w = weight.values if isinstance(weight, ParamTensor) else weight
    b = bias.values if isinstance(bias, ParamTensor) else bias
    _check_weight(w, b, spec)
    oh, ow = spec.output_hw(*x.shape[2:])
    # transposed conv == scatter of the input through a conv weight of shape (C, O/g, kh, kw)
    full = _scatter(x, w, spec.groups, spec.stride, _deconv_full_hw(*x.shape[2:], spec))
    p = spec.padding
    out = np.ascontiguousarray(full[:, :, p:p + oh, p:p + ow])
    if b is not None:
        out += b[None, :, None, None]
    return out


def grouped_deconv_backward(x, upstream, weight, spec, bias=None):
    _check_input(x, spec)
    oh, ow = spec.output_hw(*x.shape[2:])
    if upstream.shape != (x.shape[0], spec.out_channels, oh, ow):
        raise ConfigurationError(
            f"{spec.label}: upstream gradient shape {upstream.shape} does not match output"
            f" {(x.shape[0], spec.out_channels, oh, ow)}"
        )
    fh, fw = _deconv_full_hw(*x.shape[2:], spec)
    p = spec.padding
    up_full = np.zeros(upstream.shape[:2] + (fh, fw), dtype=DTYPE)
    up_full[:, :, p:p + oh, p:p + ow] = upstream
    if bias is not None:
        bias.grad += upstream.sum(axis=(0, 2, 3))
    # d/dW of scatter(x, W) is the correlation of x with windows of the upstream
    weight.grad += _gather_weight_grad(up_full, x, weight.shape, spec.groups, spec.stride)
    return _gather(up_full, weight.values, spec.groups, spec.stride)


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; returns (output, argmax index per window)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2: odd spatial dims {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)  # first occurrence in row-major order on ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(upstream, idx):
    n, c, oh, ow = upstream.shape
    blocks = np.zeros((n, c, oh, ow, 4), dtype=DTYPE)
    np.put_along_axis(blocks, idx[..., None], upstream[..., None], axis=-1)
    return blocks.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def sigmoid_forward(x):
    """Logistic function clamped to [1e-6, 1 - 1e-6]."""
    p = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    p[~pos] = e / (1.0 + e)
    return np.clip(p, SIGMOID_FLOOR, SIGMOID_CEIL)


def sigmoid_backward(p, upstream):
    """Gradient through the clamped sigmoid, given its output ``p``.

    Clamped pixels have zero derivative.
    """
    inside = (p > SIGMOID_FLOOR) & (p < SIGMOID_CEIL)
    return upstream * p * (1.0 - p) * inside


def sum_forward(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"elementwise-sum: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def sum_backward(upstream):
    return upstream, upstream


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    kind: str
    max_rel_error: float
    n_checked: int
    n_excluded: int = 0
    worst: str = ""

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def rel_error(analytic, numeric, floor=1e-3):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, arr, step=1e-3, mask=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    todo = range(flat.size) if mask is None else np.flatnonzero(mask.reshape(-1))
    for i in todo:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def _random_layer(kind, rng):
    c = int(rng.integers(1, 4)) * 2
    if kind == "conv":
        groups = int(rng.choice([1, 2]))
        return LayerSpec("conv", kernel=(3, 3), stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, 2)),
                         groups=groups, in_channels=c, out_channels=groups * int(rng.integers(1, 3)))
    if kind == "grouped-deconv":
        return LayerSpec("grouped-deconv", kernel=(4, 4), stride=2, padding=1, groups=c,
                         in_channels=c, out_channels=c)
    return LayerSpec(kind, in_channels=c, out_channels=c)


def _sample_input(kind, shape, rng, step):
    x = rng.uniform(-1.0, 1.0, size=shape)
    if kind == "relu":
        # keep away from the kink by more than the probe step
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * (0.05 + rng.uniform(0, 0.5, size=shape)), x)
    elif kind == "maxpool2":
        # distinct window entries separated by > 2*step so no probe flips the argmax
        n, c, h, w = shape
        k = n * c * h * w
        vals = -1.0 + (np.arange(k) + rng.uniform(0.0, 0.5, size=k)) * (2.0 / k)
        x = rng.permutation(vals).reshape(shape)
        assert 2.0 / k > 4 * step
    return x


def grad_check(spec, tolerance=1e-4, seed=0, step=1e-3, size=(2, 6, 6), x=None):
    """Compare analytic and central-difference gradients for one layer.

    The scalar probe is ``sum(forward(x) * R)`` for a fixed random ``R``.
    Every input and parameter coordinate is checked; for relu the inputs are
    drawn at least 0.05 away from zero so probes never straddle the kink, and
    relu inputs within ``step`` of zero (possible with an explicit ``x``) are
    excluded and counted in ``n_excluded``.
    """
    rng = np.random.default_rng(seed)
    if isinstance(spec, str):
        spec = _random_layer(spec, rng)
    n, h, w = size
    c = spec.in_channels or 2
    if spec.kind == "maxpool2":
        step = min(step, 1.0 / (4 * n * c * h * w))
    if x is None:
        x = _sample_input(spec.kind, (n, c, h, w), rng, step)
    else:
        x = np.array(x, dtype=DTYPE)
    params = []
    if spec.kind in ("conv", "grouped-deconv"):
        weight = ParamTensor(rng.uniform(-1, 1, size=spec.weight_shape()))
        bias = ParamTensor(rng.uniform(-1, 1, size=(spec.out_channels,)))
        params = [("weight", weight), ("bias", bias)]
    other = rng.uniform(-1, 1, size=x.shape) if spec.kind == "elementwise-sum" else None

    def forward():
        if spec.kind == "conv":
            return conv_forward(x, weight, spec, bias)
        if spec.kind == "grouped-deconv":
            return grouped_deconv_forward(x, weight, spec, bias)
        if spec.kind == "maxpool2":
            return maxpool2_forward(x)[0]
        if spec.kind == "relu":
            return relu_forward(x)
        if spec.kind == "sigmoid":
            return sigmoid_forward(x)
        return sum_forward(x, other)

    out = forward()
    r = rng.uniform(-1, 1, size=out.shape)

    def probe():
        return float(np.sum(forward() * r))

    if spec.kind == "conv":
        dx = conv_backward(x, r, weight, spec, bias)
    elif spec.kind == "grouped-deconv":
        dx = grouped_deconv_backward(x, r, weight, spec, bias)
    elif spec.kind == "maxpool2":
        dx = maxpool2_backward(r, maxpool2_forward(x)[1])
    elif spec.kind == "relu":
        dx = relu_backward(x, r)
    elif spec.kind == "sigmoid":
        dx = sigmoid_backward(out, r)
    else:
        dx, dother = sum_backward(r)

    checks = [("input", x, dx)]
    if spec.kind == "elementwise-sum":
        checks.append(("other", other, dother))
    checks += [(name, p.values, p.grad) for name, p in params]

    worst, worst_name, total, excluded = 0.0, "", 0, 0
    for name, arr, analytic in checks:
        mask = np.abs(arr) > step if (spec.kind == "relu" and name == "input") else np.ones(arr.shape, bool)
        excluded += int(mask.size - mask.sum())
        numeric = numeric_grad(probe, arr, step=step, mask=mask)
        err = rel_error(analytic, numeric)[mask]
        total += err.size
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), name
    return GradCheckReport(spec.kind, worst, total, excluded, worst_name)

"""Bottom-up/top-down edge network with top-down refinement modules.

Layout for ``stages = S``::

    encoder   enc{k}:  conv3x3 + relu, conv3x3 + relu   (maxpool2 before stages 1..S-1)
    side      side{k}: f + conv1x1(relu(grouped conv3x3(f)))
    top-down  mask = f_{S-1}
              ref{k}, k = S-1..1:  m <- deconv(conv1x1_halve(relu(m + conv1x1(side_k))))
    head      logits = conv1x1(relu(m + conv1x1(side_0)))

Each refinement module halves the mask-encoding channels and doubles its
resolution with a depthwise (groups == channels) 4x4 stride-2 deconv.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LayerSpec, ParamTensor
from .data import resize_bilinear
from .errors import ConfigurationError, CorruptCheckpointError, NumericError, UsageError
from .loss import CE_TERMS, FusionConfig, dice_loss, fusion_loss


@dataclass
class NetworkConfig:
    stages: int = 3
    channels: tuple = (8, 16, 32)
    cardinality: int = 4
    in_channels: int = 1
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.stages < 2:
            raise ConfigurationError("stages: must be >= 2")
        if len(self.channels) != self.stages:
            raise ConfigurationError(f"channels: expected {self.stages} entries, got {len(self.channels)}")
        if self.cardinality < 1 or any(c % self.cardinality for c in self.channels):
            raise ConfigurationError(
                f"cardinality: {self.cardinality} must divide every stage channel count {self.channels}"
            )
        if self.channels[-1] % self.divisor:
            raise ConfigurationError(
                f"channels: deepest stage width {self.channels[-1]} must be divisible by {self.divisor}"
                f" so every refinement module can halve it"
            )
        if self.in_channels not in (1, 3):
            raise ConfigurationError("in_channels: must be 1 (grayscale) or 3 (RGB)")
        d = self.divisor
        if self.height % d or self.width % d or self.height < d or self.width < d:
            raise ConfigurationError(f"height/width: {self.height}x{self.width} must be divisible by {d}")

    @property
    def divisor(self):
        return 2 ** (self.stages - 1)


def layer_specs(config):
    """Ordered {name: LayerSpec} for every parameterised layer."""
    specs = {}
    c_in = config.in_channels
    for k, c in enumerate(config.channels):
        specs[f"enc{k}.conv1"] = LayerSpec("conv", (3, 3), padding=1, in_channels=c_in, out_channels=c)
        specs[f"enc{k}.conv2"] = LayerSpec("conv", (3, 3), padding=1, in_channels=c, out_channels=c)
        c_in = c
    for k, c in enumerate(config.channels):
        specs[f"side{k}.group"] = LayerSpec("conv", (3, 3), padding=1, groups=config.cardinality,
                                            in_channels=c, out_channels=c)
        specs[f"side{k}.proj"] = LayerSpec("conv", (1, 1), in_channels=c, out_channels=c)
    m = config.channels[-1]
    for k in range(config.stages - 1, 0, -1):
        specs[f"ref{k}.side"] = LayerSpec("conv", (1, 1), in_channels=config.channels[k], out_channels=m)
        specs[f"ref{k}.reduce"] = LayerSpec("conv", (1, 1), in_channels=m, out_channels=m // 2)
        m //= 2
        specs[f"ref{k}.up"] = LayerSpec("grouped-deconv", (4, 4), stride=2, padding=1, groups=m,
                                        in_channels=m, out_channels=m)
    specs["head.side"] = LayerSpec("conv", (1, 1), in_channels=config.channels[0], out_channels=m)
    specs["head.out"] = LayerSpec("conv", (1, 1), in_channels=m, out_channels=1)
    for name, spec in specs.items():
        spec.name = name
    return specs


@dataclass
class Network:
    config: NetworkConfig
    specs: dict
    params: dict = field(default_factory=dict)

    def parameter_count(self):
        return sum(p.values.size for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    # -- layer helpers ---------------------------------------------------

    def _conv(self, name, x):
        spec = self.specs[name]
        fwd = ad.grouped_deconv_forward if spec.kind == "grouped-deconv" else ad.conv_forward
        return fwd(x, self.params[name + ".weight"], spec, self.params[name + ".bias"])

    def _conv_back(self, name, x, g):
        spec = self.specs[name]
        bwd = ad.grouped_deconv_backward if spec.kind == "grouped-deconv" else ad.conv_backward
        return bwd(x, g, self.params[name + ".weight"], spec, self.params[name + ".bias"])

    # -- forward / backward ----------------------------------------------

    def forward(self, x, keep=False):
        """Logits (activation map) of shape (n, 1, h, w).

        With ``keep=True`` the intermediates needed by :meth:`backward` are
        stored on the instance.
        """
        x = np.asarray(x, dtype=np.float64)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise UsageError(f"expected input (n, {cfg.in_channels}, h, w), got {x.shape}")
        h, w = x.shape[2:]
        if h % cfg.divisor or w % cfg.divisor or h == 0 or w == 0:
            raise UsageError(f"input {h}x{w} not divisible by {cfg.divisor}")
        c = {"x": x}
        a = x
        feats = []
        for k in range(cfg.stages):
            if k > 0:
                a, c[f"pool{k}"] = ad.maxpool2_forward(a)
            c[f"in{k}"] = a
            c[f"z1_{k}"] = self._conv(f"enc{k}.conv1", a)
            c[f"r1_{k}"] = ad.relu_forward(c[f"z1_{k}"])
            c[f"z2_{k}"] = self._conv(f"enc{k}.conv2", c[f"r1_{k}"])
            a = ad.relu_forward(c[f"z2_{k}"])
            feats.append(a)
        c["f"] = feats
        sides = []
        for k, f in enumerate(feats):
            t = self._conv(f"side{k}.group", f)
            c[f"st{k}"] = t
            u = ad.relu_forward(t)
            c[f"su{k}"] = u
            sides.append(ad.sum_forward(f, self._conv(f"side{k}.proj", u)))
        c["s"] = sides
        m = feats[-1]
        for k in range(cfg.stages - 1, 0, -1):
            c[f"m{k}"] = m
            z = ad.sum_forward(m, self._conv(f"ref{k}.side", sides[k]))
            c[f"rz{k}"] = z
            r = ad.relu_forward(z)
            c[f"rr{k}"] = r
            d = self._conv(f"ref{k}.reduce", r)
            c[f"rd{k}"] = d
            m = self._conv(f"ref{k}.up", d)
        c["m0"] = m
        z = ad.sum_forward(m, self._conv("head.side", sides[0]))
        c["hz"] = z
        r = ad.relu_forward(z)
        c["hr"] = r
        logits = self._conv("head.out", r)
        if keep:
            self._cache = c
        return logits

    def backward(self, grad_logits):
        """Accumulate parameter gradients for the last ``forward(keep=True)``."""
        c = getattr(self, "_cache", None)
        if c is None:
            raise UsageError("backward called without a preceding forward(keep=True)")
        cfg = self.config
        g = self._conv_back("head.out", c["hr"], grad_logits)
        g = ad.relu_backward(c["hz"], g)
        g_m, g_q = ad.sum_backward(g)
        g_side = [np.zeros_like(s) for s in c["s"]]
        g_side[0] += self._conv_back("head.side", c["s"][0], g_q)
        for k in range(1, cfg.stages):
            g_d = self._conv_back(f"ref{k}.up", c[f"rd{k}"], g_m)
            g_r = self._conv_back(f"ref{k}.reduce", c[f"rr{k}"], g_d)
            g_z = ad.relu_backward(c[f"rz{k}"], g_r)
            g_m, g_q = ad.sum_backward(g_z)
            g_side[k] += self._conv_back(f"ref{k}.side", c["s"][k], g_q)
        g_feat = [np.zeros_like(f) for f in c["f"]]
        g_feat[-1] += g_m
        for k in range(cfg.stages):
            g_f, g_v = ad.sum_backward(g_side[k])
            g_feat[k] += g_f
            g_u = self._conv_back(f"side{k}.proj", c[f"su{k}"], g_v)
            g_t = ad.relu_backward(c[f"st{k}"], g_u)
            g_feat[k] += self._conv_back(f"side{k}.group", c["f"][k], g_t)
        g_a = None
        for k in range(cfg.stages - 1, -1, -1):
            g = g_feat[k] if g_a is None else g_feat[k] + g_a
            g = ad.relu_backward(c[f"z2_{k}"], g)
            g = self._conv_back(f"enc{k}.conv2", c[f"r1_{k}"], g)
            g = ad.relu_backward(c[f"z1_{k}"], g)
            g = self._conv_back(f"enc{k}.conv1", c[f"in{k}"], g)
            if k > 0:
                g_a = ad.maxpool2_backward(g, c[f"pool{k}"])
        self._cache = None
        return g


def build(config):
    """Create a network with He-normal weights and zero biases drawn from ``config.seed``."""
    specs = layer_specs(config)
    rng = np.random.default_rng(config.seed)
    net = Network(config, specs)
    for name, spec in specs.items():
        std = np.sqrt(2.0 / spec.fan_in())
        net.params[name + ".weight"] = ParamTensor(rng.normal(0.0, std, size=spec.weight_shape()))
        net.params[name + ".bias"] = ParamTensor(np.zeros(spec.out_channels))
    return net


# ---------------------------------------------------------------------------
# images <-> tensors


def to_tensor(images):
    """(h, w) / (h, w, 3) image or list of them -> (n, c, h, w)."""
    if isinstance(images, np.ndarray):
        images = [images]
    arrs = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        arrs.append(img[None] if img.ndim == 2 else img.transpose(2, 0, 1))
    return np.stack(arrs)


def predict(net, image):
    """Clamped sigmoid edge map (h, w) for a single image."""
    return ad.sigmoid_forward(net.forward(to_tensor(image)))[0, 0]


def multiscale_predict(net, image, scales=(0.5, 1.0, 1.5)):
    """Average of predictions at several resolutions, resized back bilinearly."""
    h, w = image.shape[:2]
    d = net.config.divisor
    maps = []
    for s in scales:
        sh, sw = int(round(h * s / d)) * d, int(round(w * s / d)) * d
        if sh < d or sw < d:
            raise UsageError(f"image {h}x{w} too small for scale {s} (dims must be multiples of {d})")
        img = image if (sh, sw) == (h, w) else np.clip(resize_bilinear(image, (sh, sw)), 0.0, 1.0)
        p = predict(net, img)
        maps.append(p if (sh, sw) == (h, w) else resize_bilinear(p, (h, w)))
    return np.mean(maps, axis=0)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def step(self, params):
        for p in params:
            g = p.grad + self.weight_decay * p.values if self.weight_decay else p.grad
            p.step += 1
            p.m *= self.beta1
            p.m += (1.0 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1.0 - self.beta2) * g * g
            m_hat = p.m / (1.0 - self.beta1**p.step)
            v_hat = p.v / (1.0 - self.beta2**p.step)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _diagnose(p, g, cfg):
    """Name the loss term that went non-finite."""
    terms = {"dice": lambda: dice_loss(p, g, cfg.epsilon), cfg.ce + "-ce": lambda: CE_TERMS[cfg.ce](p, g)}
    bad = []
    for name, fn in terms.items():
        try:
            r = fn()
            if not (np.isfinite(r.value) and np.all(np.isfinite(r.grad))):
                bad.append(name)
        except (ValueError, ZeroDivisionError):
            bad.append(name)
    if not np.all(np.isfinite(p)):
        bad.append("prediction")
    return ", ".join(bad) or "unknown"


def _group_by_shape(pairs):
    groups = {}
    for i, (img, _) in enumerate(pairs):
        groups.setdefault(np.shape(img), []).append(i)
    return groups.values()


def train_step(net, pairs, cfg=None, lr=1e-3, weight_decay=0.0, loss_fn=None, optimizer=None):
    """One mini-batch update; returns the summed loss before the step.

    ``pairs`` is a list of (image, ground truth).  ``loss_fn`` maps
    (p, g) -> LossResult and defaults to the fusion loss with ``cfg``.
    """
    if not pairs:
        raise UsageError("train_step needs a non-empty batch")
    cfg = cfg or FusionConfig()
    if loss_fn is None:
        loss_fn = lambda p, g: fusion_loss(p, g, cfg)  # noqa: E731
    optimizer = optimizer or Adam(lr=lr, weight_decay=weight_decay)
    net.zero_grads()
    total = 0.0
    for idx in _group_by_shape(pairs):
        x = to_tensor([pairs[i][0] for i in idx])
        p = ad.sigmoid_forward(net.forward(x, keep=True))
        grad_p = np.zeros_like(p)
        for j, i in enumerate(idx):
            g = np.asarray(pairs[i][1], dtype=np.float64)
            try:
                res = loss_fn(p[j, 0], g)
            except (UsageError, ZeroDivisionError, FloatingPointError) as exc:
                raise NumericError(f"loss undefined on pair {i} (term: {_diagnose(p[j, 0], g, cfg)}): {exc}") from exc
            if not (np.isfinite(res.value) and np.all(np.isfinite(res.grad))):
                raise NumericError(f"non-finite loss on pair {i} (term: {_diagnose(p[j, 0], g, cfg)})")
            total += res.value
            grad_p[j, 0] = res.grad
        net.backward(ad.sigmoid_backward(p, grad_p))
    for name, prm in net.params.items():
        if not np.all(np.isfinite(prm.grad)):
            raise NumericError(f"non-finite gradient in {name}")
    optimizer.step(net.params.values())
    return total


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CRSPEDGE"
VERSION = 1


def save_checkpoint(net):
    """Serialise parameters: magic, u32 version, config, named float64 tensors, CRC-32."""
    cfg = json.dumps(asdict(net.config), sort_keys=True).encode()
    body = [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(net.params))]
    for name, p in net.params.items():
        raw = name.encode()
        body.append(struct.pack("<I", len(raw)) + raw)
        body.append(struct.pack("<I", p.values.ndim) + struct.pack(f"<{p.values.ndim}I", *p.values.shape))
        body.append(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    payload = b"".join(body)
    return MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, data, pos):
        self.data, self.pos = data, pos

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"truncated checkpoint: need {n} bytes", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _parse_payload(data, start):
    r = _Reader(data, start)
    cfg_raw = r.take(r.u32())
    try:
        config = NetworkConfig(**json.loads(cfg_raw))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad network config: {exc}", start + 4) from None
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        ndim = r.u32()
        if ndim > 8:
            raise CorruptCheckpointError(f"implausible rank {ndim} for {name}", r.pos - 4)
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return config, params, r.pos


def load_checkpoint(data):
    """Inverse of :func:`save_checkpoint`; raises CorruptCheckpointError on any defect."""
    data = bytes(data)
    if len(data) < 8 or data[:8] != MAGIC:
        raise CorruptCheckpointError("bad magic", 0)
    if len(data) < 12:
        raise CorruptCheckpointError("truncated checkpoint: missing version", len(data))
    version = struct.unpack("<I", data[8:12])[0]
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported version {version}", 8)
    if len(data) < 16:
        raise CorruptCheckpointError("truncated checkpoint: missing checksum", len(data))
    payload = data[12:-4]
    if zlib.crc32(payload) != struct.unpack("<I", data[-4:])[0]:
        # a short file also fails the checksum; report it as truncation when the structure runs out
        _parse_payload(data, 12)
        raise CorruptCheckpointError("checksum mismatch", len(data) - 4)
    config, values, end = _parse_payload(data, 12)
    if end != len(data) - 4:
        raise CorruptCheckpointError("trailing bytes after parameters", end)
    net = Network(config, layer_specs(config))
    for name, spec in net.specs.items():
        for suffix, shape in ((".weight", spec.weight_shape()), (".bias", (spec.out_channels,))):
            key = name + suffix
            if key not in values or values[key].shape != tuple(shape):
                raise CorruptCheckpointError(f"missing or misshapen parameter {key}", end)
            net.params[key] = ParamTensor(values[key].copy())
    return net

"""Flat ``key = value`` run configuration shared by every CLI command.

Defaults (one line each, ``#`` starts a comment)::

    seed = 0
    # data: empty manifests mean "generate a synthetic split"
    train_manifest =
    test_manifest =
    synth_n = 50                 # images generated for a synthetic split
    synth_train = 40             # of which the first N train, the rest test
    synth_height = 64
    synth_width = 64
    synth_noise = 0.03
    synth_blur = 0.0
    synth_annotators = 3         # annotations per synthetic image
    synth_jitter = 2.0           # px; max shift of the extra annotations
    # network
    stages = 3
    channels = 8,16,32
    cardinality = 4
    # loss: fusion | weighted-ce | dice | paper-ce | bce
    loss = fusion
    alpha = 1.0
    beta_fuse = 0.001
    epsilon = 1.0
    ce = bce                     # pixel term inside fusion: paper | bce | weighted
    # optimisation
    lr = 0.001
    weight_decay = 0.0001
    epochs = 25
    batch_size = 8
    # evaluation
    thresholds = 99
    max_dist_fraction = 0.02
    apply_nms = false
    multiscale = false
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .data import SynthSpec
from .errors import ConfigurationError
from .evaluate import EvalConfig
from .loss import LOSS_NAMES, FusionConfig
from .model import NetworkConfig


@dataclass
class RunConfig:
    seed: int = 0
    train_manifest: str = ""
    test_manifest: str = ""
    synth_n: int = 50
    synth_train: int = 40
    synth_height: int = 64
    synth_width: int = 64
    synth_noise: float = 0.03
    synth_blur: float = 0.0
    synth_annotators: int = 3
    synth_jitter: float = 2.0
    stages: int = 3
    channels: tuple = (8, 16, 32)
    cardinality: int = 4
    loss: str = "fusion"
    alpha: float = 1.0
    beta_fuse: float = 0.001
    epsilon: float = 1.0
    ce: str = "bce"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 25
    batch_size: int = 8
    thresholds: int = 99
    max_dist_fraction: float = 0.02
    apply_nms: bool = False
    multiscale: bool = False

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ConfigurationError(f"loss: unknown value {self.loss!r}; expected one of {', '.join(LOSS_NAMES)}")
        for key in ("epochs", "batch_size", "synth_n"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key}: must be >= 1")
        if not 0 < self.synth_train < self.synth_n:
            raise ConfigurationError("synth_train: must leave at least one test image (0 < synth_train < synth_n)")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be non-negative")
        # surface sub-config errors at load time
        self.fusion()
        self.network(1)
        self.eval_config()
        self.synth_spec()

    def fusion(self):
        return FusionConfig(self.alpha, self.beta_fuse, self.epsilon, self.ce)

    def network(self, in_channels=1, height=None, width=None):
        return NetworkConfig(
            stages=self.stages,
            channels=self.channels,
            cardinality=self.cardinality,
            in_channels=in_channels,
            height=height or self.synth_height,
            width=width or self.synth_width,
            seed=self.seed,
        )

    def eval_config(self):
        return EvalConfig(self.thresholds, self.max_dist_fraction, self.apply_nms)

    def synth_spec(self):
        return SynthSpec(
            dims=(self.synth_height, self.synth_width),
            noise_sigma=self.synth_noise,
            blur_sigma=self.synth_blur,
            annotators=self.synth_annotators,
            jitter=self.synth_jitter,
            seed=self.seed,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name, default, raw):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_overrides(items, base=None):
    """Apply ``key=value`` strings on top of ``base`` (default RunConfig())."""
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, known[key], raw)
    return base.replace(**changes)


def parse_config(text, base=None):
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        items.append(line)
    return parse_overrides(items, base)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)

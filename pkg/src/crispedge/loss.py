"""Boundary losses over a single prediction/ground-truth pair.

All losses are *sums* over pixels and return the exact derivative with
respect to the prediction map ``p`` (not the logits).  Predictions are
expected to already be clamped into [1e-6, 1 - 1e-6] by the sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, UsageError


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


@dataclass
class FusionConfig:
    """Weights of the Dice term (``alpha``) and the cross-entropy term (``beta_fuse``).

    ``ce`` picks the pixel-level term: ``"paper"`` is the cross-entropy exactly
    as printed alongside the fusion loss, ``"bce"`` the textbook binary
    cross-entropy, ``"weighted"`` the class-balanced cross-entropy.
    """

    alpha: float = 1.0
    beta_fuse: float = 0.001
    epsilon: float = 1.0
    ce: str = "paper"

    def __post_init__(self):
        if self.alpha < 0 or self.beta_fuse < 0:
            raise ConfigurationError("alpha and beta_fuse must be non-negative")
        if self.alpha + self.beta_fuse <= 0:
            raise ConfigurationError("alpha + beta_fuse must be positive")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be non-negative")
        if self.ce not in CE_TERMS:
            raise ConfigurationError(f"unknown cross-entropy term {self.ce!r}")


def _pair(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise UsageError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    return p, g


def weighted_ce(p, g):
    """Class-balanced cross-entropy with per-image weight beta = |Y-| / |Y|."""
    p, g = _pair(p, g)
    pos = g > 0.5
    beta = 1.0 - pos.sum() / g.size
    value = -beta * np.log(p[pos]).sum() - (1.0 - beta) * np.log1p(-p[~pos]).sum()
    grad = np.where(pos, -beta / p, (1.0 - beta) / (1.0 - p))
    return LossResult(float(value), grad)


def dice_loss(p, g, epsilon=1.0):
    """Reciprocal soft Dice: (sum p^2 + sum g^2 + eps) / (2 sum pg + eps)."""
    p, g = _pair(p, g)
    if epsilon < 0:
        raise UsageError("epsilon must be non-negative")
    num = np.sum(p * p) + np.sum(g * g) + epsilon
    den = 2.0 * np.sum(p * g) + epsilon
    if den == 0:
        raise UsageError("dice_loss with epsilon=0 requires a non-zero overlap sum(p*g)")
    grad = (2.0 * p * den - 2.0 * g * num) / (den * den)
    return LossResult(float(num / den), grad)


def paper_ce(p, g):
    """-sum(g log p + (1 - g)(1 - log p)), the pixel term paired with Dice.

    Not the textbook BCE: the negative-class term is ``1 - log p`` so the
    derivative is ``-(2g - 1) / p``.  The value can be negative.
    """
    p, g = _pair(p, g)
    logp = np.log(p)
    value = -np.sum(g * logp + (1.0 - g) * (1.0 - logp))
    return LossResult(float(value), -(2.0 * g - 1.0) / p)


def bce(p, g):
    """Standard (unweighted) binary cross-entropy."""
    p, g = _pair(p, g)
    value = -np.sum(g * np.log(p) + (1.0 - g) * np.log1p(-p))
    return LossResult(float(value), -g / p + (1.0 - g) / (1.0 - p))


CE_TERMS = {"paper": paper_ce, "bce": bce, "weighted": weighted_ce}


def fusion_loss(p, g, cfg=None):
    """alpha * dice_loss + beta_fuse * cross-entropy term."""
    cfg = cfg or FusionConfig()
    p, g = _pair(p, g)
    value, grad = 0.0, np.zeros_like(p)
    if cfg.alpha:
        d = dice_loss(p, g, cfg.epsilon)
        value += cfg.alpha * d.value
        grad += cfg.alpha * d.grad
    if cfg.beta_fuse:
        c = CE_TERMS[cfg.ce](p, g)
        value += cfg.beta_fuse * c.value
        grad += cfg.beta_fuse * c.grad
    return LossResult(float(value), grad)


@dataclass
class BatchLoss:
    total: float
    per_pair: list


def batch_loss(pairs, cfg=None, loss_fn=None):
    """Sum of per-pair losses over a mini-batch; pairs may differ in size."""
    if not pairs:
        raise UsageError("batch_loss needs at least one (prediction, ground-truth) pair")
    if loss_fn is None:
        loss_fn = lambda p, g: fusion_loss(p, g, cfg)  # noqa: E731
    results = [loss_fn(p, g) for p, g in pairs]
    return BatchLoss(float(sum(r.value for r in results)), results)


LOSS_NAMES = ("fusion", "weighted-ce", "dice", "paper-ce", "bce")


def make_loss(name, cfg=None) -> Callable[[np.ndarray, np.ndarray], LossResult]:
    """Resolve a loss name from a run config to a ``(p, g) -> LossResult`` callable."""
    cfg = cfg or FusionConfig()
    if name == "fusion":
        return lambda p, g: fusion_loss(p, g, cfg)
    if name == "weighted-ce":
        return weighted_ce
    if name == "dice":
        return lambda p, g: dice_loss(p, g, cfg.epsilon)
    if name == "paper-ce":
        return paper_ce
    if name == "bce":
        return bce
    raise ConfigurationError(f"unknown loss {name!r}; expected one of {', '.join(LOSS_NAMES)}")

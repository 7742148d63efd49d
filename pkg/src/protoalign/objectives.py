"""Segmentation, cycle and least-squares adversarial losses, and the total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_SMOOTH = 1e-5


@dataclass
class LossWeights:
    lambda1: float = 0.05
    lambda2: float = 0.02
    seg: float = 1.0
    cycle: float = 10.0
    adv_img: float = 1.0
    adv_seg: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    def base_weight(self, component: str) -> float:
        return getattr(self, component)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels to (N, C, H, W) indicators."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return (np.arange(num_classes)[None, :, None, None] == labels[:, None]).astype(dtype)


def loss_seg(logits: Tensor, labels: np.ndarray, ce: bool = True, dice: bool = True) -> Tensor:
    """Pixel-mean cross-entropy plus soft Dice (averaged over all classes)."""
    if logits.ndim == 3:
        logits = logits.reshape((1,) + logits.shape)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    target = Tensor(one_hot(labels, c, logits.dtype))
    total = Tensor(np.zeros((), dtype=logits.dtype))
    if ce:
        logp = T.log_softmax_channel(logits)
        total = total + (-T.sum(logp * target) / float(n * h * w))
    if dice:
        probs = T.softmax_channel(logits)
        inter = T.sum(probs * target, axis=(0, 2, 3))
        denom = T.sum(probs, axis=(0, 2, 3)) + T.sum(target, axis=(0, 2, 3))
        total = total + (1.0 - T.mean((2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)))
    return total


def loss_cycle(original, reconstructed) -> Tensor:
    """Mean absolute reconstruction error."""
    a = original if isinstance(original, Tensor) else Tensor(original)
    b = reconstructed if isinstance(reconstructed, Tensor) else Tensor(reconstructed)
    if a.shape != b.shape:
        raise ValueError(f"cycle loss shape mismatch {a.shape} vs {b.shape}")
    return T.mean(T.absolute(a - b))


def loss_lsgan(real_scores: Tensor | None, fake_scores: Tensor | None, side: str) -> Tensor:
    """Least-squares GAN objective for either side."""
    if side == "generator":
        if fake_scores is None:
            raise ValueError("generator LSGAN loss needs fake scores")
        return T.mean((fake_scores - 1.0) * (fake_scores - 1.0))
    if side == "discriminator":
        if real_scores is None or fake_scores is None:
            raise ValueError("discriminator LSGAN loss needs real and fake scores")
        return T.mean((real_scores - 1.0) * (real_scores - 1.0)) + T.mean(fake_scores * fake_scores)
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def _check_finite(name: str, t: Tensor) -> None:
    if t.size != 1:
        raise ValueError(f"loss component {name} is not scalar (shape {t.shape})")
    if not math.isfinite(t.item()):
        raise FloatingPointError(f"loss component {name} is not finite ({t.item()})")


def loss_base(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    total = None
    for name, value in components.items():
        _check_finite(name, value)
        term = value * weights.base_weight(name)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=T.get_default_dtype()))
    return total


def loss_all(
    base_components: Mapping[str, Tensor] | Tensor,
    l_sim: Tensor,
    l_cl: Tensor,
    weights: LossWeights,
) -> Tensor:
    """L_base + lambda1 * L_sim + lambda2 * L_cl.

    ``base_components`` is either the already combined base loss or a
    mapping of named components weighted by ``weights``. Zero lambdas drop
    their term from the graph, so the result is then L_base itself.
    """
    if isinstance(base_components, Tensor):
        _check_finite("base", base_components)
        total = base_components
    else:
        total = loss_base(base_components, weights)
    _check_finite("sim", l_sim)
    _check_finite("cl", l_cl)
    if weights.lambda1:
        total = total + weights.lambda1 * l_sim
    if weights.lambda2:
        total = total + weights.lambda2 * l_cl
    return total

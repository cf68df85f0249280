"""Training objectives: pixel-wise cross-entropy and smooth Dice loss.

Cross-entropy is evaluated in fused log-sum-exp form directly on logits,
so saturated predictions never produce NaN or infinity. The smooth Dice
loss follows DL = 1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps); the
epsilon default of 1.0 makes the empty-prediction/empty-target case a
well-defined zero loss. Dice sums run over the whole batch by default; a
per-image mode averages one loss per sample instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, log_softmax_channels, softplus, tmean, tsum


@dataclass
class LossValue:
    """Differentiable 0-d loss plus optional per-pixel diagnostics."""

    value: Tensor
    per_pixel: np.ndarray | None = None

    @property
    def scalar(self) -> float:
        return float(self.value.data)


def _require_binary(arr: np.ndarray, what: str):
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what} must be binary (0/1)")


def binary_cross_entropy(logits, targets, with_per_pixel: bool = False) -> LossValue:
    """Mean binary cross-entropy between logits and 0/1 targets.

    Per pixel: softplus(z) - z*y, the stable form of
    -y*log(sigmoid(z)) - (1-y)*log(1-sigmoid(z)).
    """
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} does not match logits shape {logits.shape}")
    _require_binary(y, "targets")
    y = y.astype(logits.dtype)
    per_pixel = softplus(logits) - logits * Tensor(y)
    value = tmean(per_pixel)
    return LossValue(value, per_pixel.data if with_per_pixel else None)


def multiclass_cross_entropy(logits, targets, with_per_pixel: bool = False) -> LossValue:
    """Mean softmax cross-entropy for (N, J, H, W) logits and one-hot targets."""
    logits = as_tensor(logits)
    if logits.data.ndim != 4:
        raise ValueError(f"expected (N,J,H,W) logits, got shape {logits.shape}")
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} does not match logits shape {logits.shape}")
    _require_binary(y, "targets")
    if not np.all(y.sum(axis=1) == 1):
        raise ValueError("targets must be one-hot over the channel axis")
    y = y.astype(logits.dtype)
    per_pixel = -tsum(log_softmax_channels(logits) * Tensor(y), axis=1)
    value = tmean(per_pixel)
    return LossValue(value, per_pixel.data if with_per_pixel else None)


def dice_loss(probs, targets, epsilon: float = 1.0, per_image: bool = False) -> LossValue:
    """Smooth Dice loss on probabilities in [0, 1] against binary targets.

    Sums over all pixels of the batch; with ``per_image`` the loss is
    computed per sample along axis 0 and averaged.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    probs = as_tensor(probs)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != probs.shape:
        raise ValueError(f"target shape {y.shape} does not match probs shape {probs.shape}")
    _require_binary(y, "targets")
    y_t = Tensor(y.astype(probs.dtype))
    if per_image:
        if probs.data.ndim < 2:
            raise ValueError("per_image dice needs a leading sample axis")
        axes = tuple(range(1, probs.data.ndim))
        overlap = tsum(probs * y_t, axis=axes)
        total = tsum(probs, axis=axes) + tsum(y_t, axis=axes)
        value = tmean(1.0 - (2.0 * overlap + epsilon) / (total + epsilon))
    else:
        overlap = tsum(probs * y_t)
        total = tsum(probs) + tsum(y_t)
        value = 1.0 - (2.0 * overlap + epsilon) / (total + epsilon)
    return LossValue(value)

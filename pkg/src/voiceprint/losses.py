"""Classification heads: softmax cross-entropy, CosFace, and ArcFace.

The margin families operate on cosine logits between unit-norm embeddings
and unit-norm class weight rows; the softmax baseline is a plain bias-free
dense head on the embeddings. All gradients are closed form, including the
acos/cos chain of the angular margin and the clamp (zero gradient where
clamped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FAMILIES = ("softmax", "cosface", "arcface")

# keeps acos away from its infinite-derivative endpoints
ACOS_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    family: str
    num_classes: int
    s: float = 22.0
    m: float = 0.2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.s <= 0:
            raise ValueError("scale s must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.family == "cosface" and not 0 <= self.m < 1:
            raise ValueError("cosface margin must be in [0, 1) cosine units")
        if self.family == "arcface" and not 0 <= self.m < math.pi / 2:
            raise ValueError("arcface margin must be in [0, pi/2) radians")


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-d integer vector")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels


def softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy under softmax, with max-subtracted log-sum-exp.

    Returns (loss, grad_logits); grad is (softmax - one_hot) / n.
    """
    n, k = logits.shape
    labels = _check_labels(labels, k)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -float(log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def cosface_logits(cos_theta: np.ndarray, labels: np.ndarray,
                   s: float = 22.0, m: float = 0.2) -> np.ndarray:
    """Additive cosine margin: subtract m from the target cosine, scale by s."""
    n, k = cos_theta.shape
    labels = _check_labels(labels, k)
    logits = cos_theta.copy()
    logits[np.arange(n), labels] -= m
    return s * logits


def arcface_logits(cos_theta: np.ndarray, labels: np.ndarray,
                   s: float = 22.0, m: float = 0.2) -> np.ndarray:
    """Additive angular margin: target logit becomes s*cos(acos(cos) + m)."""
    n, k = cos_theta.shape
    labels = _check_labels(labels, k)
    logits = cos_theta.copy()
    rows = np.arange(n)
    target = np.clip(cos_theta[rows, labels], -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)
    logits[rows, labels] = np.cos(np.arccos(target) + m)
    return s * logits


def loss_forward_backward(cfg: LossConfig, embeddings: np.ndarray,
                          weights: np.ndarray, labels: np.ndarray):
    """Loss plus exact gradients w.r.t. embeddings and class weights.

    embeddings: [N, D] (unit rows for the cosine families), weights:
    [K, D] class rows. Returns (loss, grad_embeddings, grad_weights).
    """
    if embeddings.ndim != 2 or weights.ndim != 2 or embeddings.shape[1] != weights.shape[1]:
        raise ValueError(
            f"embeddings {embeddings.shape} and weights {weights.shape} do not conform")
    if weights.shape[0] != cfg.num_classes:
        raise ValueError(f"expected {cfg.num_classes} weight rows, got {weights.shape[0]}")
    n = embeddings.shape[0]
    labels = _check_labels(labels, cfg.num_classes)
    raw = embeddings @ weights.T

    if cfg.family == "softmax":
        loss, grad_logits = softmax_ce(raw, labels)
        return loss, grad_logits @ weights, grad_logits.T @ embeddings

    rows = np.arange(n)
    cos = np.clip(raw, -1.0, 1.0)
    pass_through = ((raw > -1.0) & (raw < 1.0)).astype(raw.dtype)
    if cfg.family == "cosface":
        logits = cfg.s * cos
        logits[rows, labels] -= cfg.s * cfg.m
        loss, grad_logits = softmax_ce(logits, labels)
        grad_cos = cfg.s * grad_logits
    else:  # arcface
        lo, hi = -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP
        target_raw = cos[rows, labels]
        target = np.clip(target_raw, lo, hi)
        pass_through[rows, labels] *= (target_raw > lo) & (target_raw < hi)
        logits = cfg.s * cos
        logits[rows, labels] = cfg.s * np.cos(np.arccos(target) + cfg.m)
        loss, grad_logits = softmax_ce(logits, labels)
        grad_cos = cfg.s * grad_logits
        # d/dc cos(acos(c) + m) = cos(m) + c sin(m) / sqrt(1 - c^2)
        dtarget = math.cos(cfg.m) + target * math.sin(cfg.m) / np.sqrt(1.0 - target * target)
        grad_cos[rows, labels] = cfg.s * grad_logits[rows, labels] * dtarget
    grad_cos *= pass_through
    return loss, grad_cos @ weights, grad_cos.T @ embeddings


def inference_scores(cfg: LossConfig, embeddings: np.ndarray,
                     weights: np.ndarray) -> np.ndarray:
    """Margin-free class scores for prediction (argmax-equivalent per family)."""
    raw = embeddings @ weights.T
    if cfg.family == "softmax":
        return raw
    return np.clip(raw, -1.0, 1.0)

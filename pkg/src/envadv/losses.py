"""Training objectives.

All functions take batched tensors whose last dimension is the embedding
dimension and reduce over the batch with a mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LN2 = math.log(2.0)


@dataclass
class LossConfig:
    margin_m: float = 0.3
    alpha: float = 0.0
    contrastive_margin: float = 1.0

    def __post_init__(self):
        for name in ("margin_m", "alpha", "contrastive_margin"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.contrastive_margin == 0:
            raise ValueError("contrastive_margin must be positive")


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite value in loss input")


def triplet_distances(e_a, e_p, e_n):
    """Squared Euclidean anchor-positive and anchor-negative distances."""
    if not (e_a.shape == e_p.shape == e_n.shape):
        raise ValueError(f"shape mismatch: {tuple(e_a.shape)}, {tuple(e_p.shape)}, {tuple(e_n.shape)}")
    _check_finite(e_a, e_p, e_n)
    d_ap = (e_a - e_p).pow(2).sum(-1)
    d_an = (e_a - e_n).pow(2).sum(-1)
    return d_ap, d_an


def env_triplet_loss(e_a, e_p, e_n, margin=0.3, reduction="mean"):
    """``max(0, |e_a - e_p|^2 - |e_a - e_n|^2 + m)``."""
    d_ap, d_an = triplet_distances(e_a, e_p, e_n)
    loss = F.relu(d_ap - d_an + margin)
    return loss.mean() if reduction == "mean" else loss


def confusion_from_distances(d_ap, d_an):
    logp = torch.log_softmax(torch.stack([d_ap, d_an], dim=-1), dim=-1)
    return (logp.exp() * (logp + LN2)).sum(-1)


def confusion_loss(e_a, e_p, e_n, reduction="mean"):
    """KL divergence from a uniform pair to the softmax of the two triplet distances.

    Zero when the anchor is equidistant from positive and negative; tends
    to ln 2 as the gap grows.
    """
    kl = confusion_from_distances(*triplet_distances(e_a, e_p, e_n))
    return kl.mean() if reduction == "mean" else kl


def speaker_phase_loss(logits, labels, e_a, e_p, e_n, alpha):
    """Cross-entropy over every segment plus ``alpha`` times the confusion loss.

    Returns ``(total, ce, kl)``.
    """
    _check_finite(logits)
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"speaker label out of range [0, {n_classes})")
    ce = F.cross_entropy(logits, labels)
    kl = confusion_loss(e_a, e_p, e_n)
    return ce + alpha * kl, ce, kl


def contrastive_loss(x1, x2, same, margin=1.0, reduction="mean"):
    """``d^2`` for matching pairs, ``max(0, margin - d)^2`` otherwise."""
    same = torch.as_tensor(same, dtype=x1.dtype, device=x1.device)
    d2 = (x1 - x2).pow(2).sum(-1)
    d = torch.sqrt(d2.clamp_min(1e-24))
    loss = same * d2 + (1.0 - same) * F.relu(margin - d).pow(2)
    return loss.mean() if reduction == "mean" else loss

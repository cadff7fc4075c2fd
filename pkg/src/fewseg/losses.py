"""The three task objectives and their weighted combination.

All losses sum over pixels and average over samples, in natural log, with
predictions clamped to [EPS_P, 1-EPS_P].  The entropy term uses only the
foreground component -p*log(p) (full binary entropy is available as an
opt-in); the distillation term averages the unnormalized squared Euclidean
distance over all cross pairs of bottleneck latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from fewseg.data import TaskBatch, foreground_weight
from fewseg.models import EPS_P, set_parameters


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01  # weight of the entropy regularizer
    beta: float = 0.01  # weight of the distillation term

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    bce: float
    er: float
    dist: float
    total: float


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return torch.clamp(p, EPS_P, 1.0 - EPS_P)


def weighted_bce(predictions, masks, weights, pixel_mean: bool = False) -> torch.Tensor:
    """Foreground-weighted binary cross entropy.

    Per sample: -sum_pixels [w*y*log(p) + (1-y)*log(1-p)], then the mean over
    samples; ``w`` is the per-mask background/foreground ratio passed in
    ``weights``.
    """
    if not (len(predictions) == len(masks) == len(weights)):
        raise ValueError("predictions, masks and weights must have equal lengths")
    terms = []
    for pred, mask, w in zip(predictions, masks, weights):
        if pred.shape != mask.shape:
            raise ValueError(f"prediction shape {tuple(pred.shape)} != mask shape {tuple(mask.shape)}")
        p = _clamp(pred)
        y = mask.to(p.dtype)
        pixel_terms = w * y * torch.log(p) + (1.0 - y) * torch.log1p(-p)
        terms.append(-pixel_terms.mean() if pixel_mean else -pixel_terms.sum())
    return torch.stack(terms).mean()


def entropy_regularizer(predictions, full_binary: bool = False, pixel_mean: bool = False) -> torch.Tensor:
    """Shannon-entropy push toward confident predictions on an unlabeled task.

    The default keeps only the foreground term -p*log(p); ``full_binary``
    adds -(1-p)*log(1-p).
    """
    terms = []
    for pred in predictions:
        p = _clamp(pred)
        h = -p * torch.log(p)
        if full_binary:
            h = h - (1.0 - p) * torch.log1p(-p)
        terms.append(h.mean() if pixel_mean else h.sum())
    return torch.stack(terms).mean()


def distillation(latents_m, latents_p) -> torch.Tensor:
    """Mean squared Euclidean distance over all cross pairs of latents."""
    shape = latents_m[0].shape
    for lat in list(latents_m) + list(latents_p):
        if lat.shape != shape:
            raise ValueError("all latents must share one shape")
    total = None
    for a in latents_m:
        for b in latents_p:
            d = ((a - b) ** 2).sum()
            total = d if total is None else total + d
    return total / (len(latents_m) * len(latents_p))


def _stack_images(batch: TaskBatch) -> torch.Tensor:
    shapes = {s.image.shape for s in batch.samples}
    if len(shapes) != 1:
        raise ValueError(f"batch from {batch.domain_id} mixes image shapes {shapes}")
    arr = np.stack([s.image for s in batch.samples]).astype(np.float64)
    return torch.from_numpy(arr)[:, None]


def compute_composite(model, batch_m: TaskBatch, batch_n: TaskBatch, batch_p: TaskBatch,
                      weights: LossWeights, train: bool = True):
    """Forward all three task batches and assemble the combined loss.

    Returns (total tensor with gradient, LossBreakdown of floats).  All three
    terms are always computed; the weights only scale them, so ablations with
    zero weights follow identical parameter trajectories.
    """
    if not batch_m.labeled:
        raise ValueError("batch_m must be labeled")
    preds_m, latents_m = model.predict_with_latent_batch(_stack_images(batch_m), train=train)
    preds_n = model.predict_batch(_stack_images(batch_n), train=train)
    _, latents_p = model.predict_with_latent_batch(_stack_images(batch_p), train=train)

    masks = [torch.from_numpy(s.mask.astype(np.float64)) for s in batch_m.samples]
    ws = [foreground_weight(s.mask) for s in batch_m.samples]
    bce = weighted_bce(list(preds_m), masks, ws)
    er = entropy_regularizer(list(preds_n))
    dist = distillation(list(latents_m), list(latents_p))
    total = bce + weights.alpha * er + weights.beta * dist
    breakdown = LossBreakdown(
        bce=bce.detach().item(),
        er=er.detach().item(),
        dist=dist.detach().item(),
        total=total.detach().item(),
    )
    return total, breakdown


def composite_loss(theta, batch_m, batch_n, batch_p, weights: LossWeights, model) -> LossBreakdown:
    """Evaluate the combined objective at parameters ``theta``."""
    set_parameters(model, theta)
    _, breakdown = compute_composite(model, batch_m, batch_n, batch_p, weights)
    return breakdown

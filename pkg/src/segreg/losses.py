"""Segmentation and regularisation losses.

Class 0 is background everywhere. The combined objective is

    total = L_seg + lam * L_sliced + (1 - lam) * L_inv

with L_seg a fixed-weight mix of soft Dice and pixel cross-entropy. The
invariance term pulls each foreground pixel embedding toward its per-batch
class mean; the means are ordinary tracked ops, so gradients flow through
them (no stop-gradient).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gaussianity
from .tensor import (
    Tensor,
    concat_channels,
    gather_rows,
    matmul,
    reshape,
    scale,
    softmax_channels,
    tmean,
    tsum,
)

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


@dataclass
class LatentBatch:
    """N pixel embeddings with their ground-truth classes.

    num_classes counts background too, so labels live in
    {0, ..., num_classes - 1} and foreground is {1, ...}.
    """

    embeddings: Tensor  # (N, d)
    labels: np.ndarray  # (N,) ints
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.data.ndim != 2 or self.labels.shape != (self.embeddings.data.shape[0],):
            raise ValueError(
                f"LatentBatch: embeddings {self.embeddings.data.shape} vs labels {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("LatentBatch: label outside [0, num_classes)")

    def rows_of(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass
class PrototypeSet:
    """Per-batch class means; absent classes simply have no entry."""

    means: dict[int, Tensor]  # class -> (d,)
    num_classes: int

    def present(self, c: int) -> bool:
        return c in self.means


@dataclass(frozen=True)
class SegRegWeights:
    """Weights of the combined objective.

    lam splits regularisation between the sliced term (lam) and the
    invariance term (1 - lam). inv_weight, when set, overrides (1 - lam);
    it exists only for ablations such as switching the regulariser off
    entirely while keeping the same code path.
    """

    lam: float = 0.05
    seg_weight: float = 1.0
    dice_ce_mix: float = 0.5
    inv_weight: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"SegRegWeights: lam must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.dice_ce_mix <= 1.0:
            raise ValueError(f"SegRegWeights: dice_ce_mix must be in [0, 1], got {self.dice_ce_mix}")
        if self.inv_weight is not None and self.inv_weight < 0.0:
            raise ValueError("SegRegWeights: inv_weight must be >= 0")

    @property
    def effective_inv_weight(self) -> float:
        return (1.0 - self.lam) if self.inv_weight is None else self.inv_weight


def _check_probs_labels(name: str, probs: Tensor, labels: np.ndarray):
    if probs.data.ndim != 4:
        raise ValueError(f"{name}: expected (B, C+1, H, W), got {probs.data.shape}")
    b, k, h, w = probs.data.shape
    if labels.shape != (b, h, w):
        raise ValueError(f"{name}: labels {labels.shape} do not match images {(b, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"{name}: label out of range [0, {k})")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(B, H, W) int labels -> (B, C+1, H, W) indicator array."""
    b, h, w = labels.shape
    out = np.zeros((b, num_classes, h, w), dtype=dtype)
    bb, hh, ww = np.ogrid[:b, :h, :w]
    out[bb, labels, hh, ww] = 1.0
    return out


def dice_loss(probs: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice over foreground classes, pixels summed across the batch.

    Classes absent from the labels are skipped (not smoothed toward a
    perfect score); if no foreground is present at all the loss is 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    _check_probs_labels("dice_loss", probs, labels)
    k = probs.data.shape[1]
    g = one_hot(labels, k, dtype=probs.data.dtype)
    inter = tsum(probs * Tensor(g), axis=(0, 2, 3))  # (C+1,)
    psum = tsum(probs, axis=(0, 2, 3))
    gsum = g.sum(axis=(0, 2, 3))
    present = np.flatnonzero(gsum[1:] > 0) + 1
    if present.size == 0:
        return Tensor(np.asarray(0.0, dtype=probs.data.dtype))
    num = scale(inter, 2.0) + float(eps)
    den = psum + Tensor(gsum + eps)
    per_class = num / den  # (C+1,), only foreground-present rows used
    picked = gather_rows(reshape(per_class, (k, 1)), present)
    return scale(tmean(picked), -1.0) + 1.0


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixelwise negative log-softmax at the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_probs_labels("cross_entropy_loss", logits, labels)
    b, k, h, w = logits.data.shape
    # constant max shift keeps exp in range without touching gradients
    m = np.broadcast_to(logits.data.max(axis=1, keepdims=True), logits.data.shape)
    shifted = logits - Tensor(np.ascontiguousarray(m))
    z = tsum(shifted.exp(), axis=1, keepdims=True).log()  # (B, 1, H, W)
    logz = concat_channels([z] * k)
    logp = shifted - logz
    hot = one_hot(labels, k, dtype=logits.data.dtype)
    return scale(tsum(logp * Tensor(hot)), -1.0 / (b * h * w))


def prototypes(latents: LatentBatch) -> PrototypeSet:
    """Per-batch mean embedding of every class present (background too)."""
    means: dict[int, Tensor] = {}
    for c in range(latents.num_classes):
        rows = latents.rows_of(c)
        if rows.size == 0:
            continue
        means[c] = tmean(gather_rows(latents.embeddings, rows), axis=0)  # (d,)
    return PrototypeSet(means=means, num_classes=latents.num_classes)


def invariance_loss(latents: LatentBatch, protos: PrototypeSet) -> Tensor:
    """Mean squared distance of foreground embeddings to their class mean.

    Averaged per class over its pixels, then over the foreground classes
    present in the batch. No foreground at all yields 0 and a warning.
    """
    if protos.num_classes != latents.num_classes:
        raise ValueError("invariance_loss: prototype set and batch disagree on classes")
    dtype = latents.embeddings.data.dtype
    d = latents.embeddings.data.shape[1]
    terms = []
    for c in range(1, latents.num_classes):
        rows = latents.rows_of(c)
        if rows.size == 0:
            continue
        if not protos.present(c):
            raise ValueError(f"invariance_loss: class {c} present in batch but has no prototype")
        picked = gather_rows(latents.embeddings, rows)  # (n_c, d)
        mu = matmul(Tensor(np.ones((rows.size, 1), dtype=dtype)), reshape(protos.means[c], (1, d)))
        terms.append(scale(tsum((picked - mu).square()), 1.0 / rows.size))
    if not terms:
        log.warning("invariance_loss: batch has no foreground pixels")
        return Tensor(np.asarray(0.0, dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return scale(total, 1.0 / len(terms))


def segreg_total(
    logits: Tensor,
    latents: LatentBatch,
    labels: np.ndarray,
    weights: SegRegWeights,
    proj: gaussianity.ProjectionSet | None,
    *,
    sigreg_mode: str = "quadrature",
    quad_points: int = gaussianity.DEFAULT_QUAD_POINTS,
    normalize_by_n: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Combined objective and its per-term breakdown.

    Zero-weighted terms are skipped entirely (their breakdown entry is
    0.0), so a run with both regulariser weights at zero builds exactly
    the plain segmentation graph.
    """
    probs = softmax_channels(logits)
    dice = dice_loss(probs, labels)
    ce = cross_entropy_loss(logits, labels)
    mix = weights.dice_ce_mix
    seg = scale(dice, mix) + scale(ce, 1.0 - mix)

    inv_w = weights.effective_inv_weight
    total = scale(seg, weights.seg_weight)
    breakdown = {
        "dice": dice.item(),
        "ce": ce.item(),
        "seg": seg.item(),
        "sigreg": 0.0,
        "inv": 0.0,
        "n_foreground_classes": float(np.unique(latents.labels[latents.labels > 0]).size),
    }
    if weights.lam > 0.0:
        if proj is None:
            raise ValueError("segreg_total: lam > 0 needs a projection set")
        sig = gaussianity.sigreg_loss(
            latents, proj, mode=sigreg_mode, n_points=quad_points, normalize_by_n=normalize_by_n
        )
        breakdown["sigreg"] = sig.item()
        total = total + scale(sig, weights.lam)
    if inv_w > 0.0:
        inv = invariance_loss(latents, prototypes(latents))
        breakdown["inv"] = inv.item()
        total = total + scale(inv, inv_w)
    breakdown["total"] = total.item()
    return total, breakdown

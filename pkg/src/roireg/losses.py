"""Salient region matching loss terms and evaluation metrics.

Training losses are torch functions and differentiate through intensities,
soft masks and displacement fields.  DSC and TRE are plain numpy metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .errors import LossError, MetricError
from .volumes import forward_gradient


@dataclass
class LossWeights:
    """Weights of the composite training loss.

    ``class_weights`` overrides the gland/landmark defaults per class id.
    """

    gland_weight: float = 0.1
    landmark_weight: float = 0.3
    lam: float = 0.4
    mi_bins: int = 32
    mi_sigma: float = 0.05
    class_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.gland_weight, self.landmark_weight, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")
        if any(w < 0 for w in self.class_weights.values()):
            raise ValueError("class weights must be non-negative")
        if self.mi_bins < 2:
            raise ValueError("mi_bins must be >= 2")
        if self.mi_sigma <= 0:
            raise ValueError("mi_sigma must be > 0")

    def weight(self, class_id):
        if class_id in self.class_weights:
            return float(self.class_weights[class_id])
        return self.gland_weight if class_id == 1 else self.landmark_weight

    def weight_vector(self, class_ids):
        return torch.tensor([self.weight(k) for k in class_ids], dtype=torch.float64)


class LossTerms(NamedTuple):
    mi: torch.Tensor
    dice: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: float(v.detach()) for k, v in self._asdict().items()}


def _soft_assign(x, bins, sigma):
    centers = torch.linspace(0.0, 1.0, bins, dtype=x.dtype, device=x.device)
    d = (x[:, None] - centers[None, :]) * (bins - 1) / sigma
    return torch.softmax(-0.5 * d * d, dim=1)


def _entropy_term(p):
    tiny = torch.finfo(p.dtype).tiny
    return (p * torch.log(p.clamp_min(tiny))).sum()


def mutual_information(x, y, bins=32, sigma=0.05):
    """Parzen soft-histogram MI (nats) of two 1D samples.

    Both samples are min-max normalised to [0, 1] first; a constant sample
    has no information and yields 0.
    """
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1D tensors of equal length")
    if x.numel() == 0:
        raise LossError("empty ROI sample")
    xr = x.max() - x.min()
    yr = y.max() - y.min()
    if xr.item() <= 1e-12 or yr.item() <= 1e-12:
        return (x.sum() + y.sum()) * 0.0
    xn = (x - x.min()) / xr
    yn = (y - y.min()) / yr
    wx = _soft_assign(xn, bins, sigma)
    wy = _soft_assign(yn, bins, sigma)
    joint = wx.T @ wy / x.numel()
    px = joint.sum(dim=1)
    py = joint.sum(dim=0)
    return _entropy_term(joint) - _entropy_term(px) - _entropy_term(py)


def roi_mi_loss(fixed, moving, mask, bins=32, sigma=0.05):
    """Negative MI between ``fixed`` and ``moving`` restricted to ``mask``.

    Accepts matching (D, H, W) tensors or batches (N, 1, D, H, W); batch
    losses are averaged.
    """
    if fixed.shape != moving.shape or fixed.shape != mask.shape:
        raise ValueError(f"shape mismatch: {fixed.shape}, {moving.shape}, {mask.shape}")
    mask = mask.bool()
    if fixed.ndim == 5:
        terms = [roi_mi_loss(f[0], m[0], k[0], bins, sigma) for f, m, k in zip(fixed, moving, mask)]
        return torch.stack(terms).mean()
    if not mask.any():
        raise LossError("ROI mask is empty")
    return -mutual_information(fixed[mask], moving[mask], bins, sigma)


def roi_dice_loss(pred, target, weights, eps=1e-5, present=None):
    """Weighted multi-class soft Dice: ``1 - (1/K) sum_k w_k dice_k``.

    ``pred`` and ``target`` are (N, K, ...) soft masks; ``weights`` has K
    entries.  Classes not present in both images (``present`` (N, K), by
    default derived from the mask sums) are dropped and K shrinks with them.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    weights = torch.as_tensor(weights, dtype=pred.dtype, device=pred.device)
    if weights.shape != (pred.shape[1],):
        raise ValueError("one weight per class is required")
    dims = tuple(range(2, pred.ndim))
    inter = (pred * target).sum(dim=dims)
    sp = pred.sum(dim=dims)
    sg = target.sum(dim=dims)
    if present is None:
        present = (sp > 0) & (sg > 0)
    present = torch.as_tensor(present, device=pred.device).bool()
    counts = present.sum(dim=1)
    if (counts == 0).any():
        raise LossError("no class is present in both images")
    dice = (2 * inter + eps) / (sp + sg + eps)
    weighted = (weights[None] * dice * present.to(pred.dtype)).sum(dim=1)
    return (1 - weighted / counts.to(pred.dtype)).mean()


def reg_loss(u):
    """Voxel-mean of the squared forward-difference Jacobian of ``u``."""
    if u.ndim == 4:
        u = u[None]
    g = forward_gradient(u)
    n_vox = u.shape[2] * u.shape[3] * u.shape[4]
    return (g * g).sum(dim=(1, 2, 3, 4, 5)).mean() / n_vox


def total_loss(fixed, warped, roi_mask, fixed_onehot, warped_onehot, u, weights,
               class_ids, present=None, use_mi=True):
    """Composite objective ``MI + Dice + lam * Reg``; returns all terms."""
    if use_mi:
        mi = roi_mi_loss(fixed, warped, roi_mask, weights.mi_bins, weights.mi_sigma)
    else:
        mi = torch.zeros((), dtype=u.dtype, device=u.device)
    dice = roi_dice_loss(warped_onehot, fixed_onehot, weights.weight_vector(class_ids), present=present)
    reg = reg_loss(u)
    return LossTerms(mi, dice, reg, mi + dice + weights.lam * reg)


# --------------------------------------------------------------------------
# evaluation metrics


def dsc_metric(mask_a, mask_b):
    """Dice overlap in percent; two empty masks count as 100."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(a, b).sum()) / denom


def _centroid(mask, spacing):
    idx = np.argwhere(mask)
    return idx.mean(axis=0) * np.asarray(spacing, dtype=float)


def landmark_errors(labels_fixed, labels_warped, spacing=(1.0, 1.0, 1.0)):
    """Centroid distance (mm) for every landmark class present on both sides.

    Returns ``(errors, excluded)``: a dict class id -> distance and the sorted
    list of landmark classes present on only one side.
    """
    a = getattr(labels_fixed, "labels", labels_fixed)
    b = getattr(labels_warped, "labels", labels_warped)
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ids_a = {int(c) for c in np.unique(a) if c >= 2}
    ids_b = {int(c) for c in np.unique(b) if c >= 2}
    errors = {}
    for k in sorted(ids_a & ids_b):
        d = _centroid(a == k, spacing) - _centroid(b == k, spacing)
        errors[k] = float(np.linalg.norm(d))
    return errors, sorted(ids_a ^ ids_b)


def tre_metric(labels_fixed, labels_warped, spacing=(1.0, 1.0, 1.0)):
    """Root mean square of landmark centroid distances, in mm."""
    errors, _ = landmark_errors(labels_fixed, labels_warped, spacing)
    if not errors:
        raise MetricError("no landmark class is present in both label sets")
    return float(np.sqrt(np.mean(np.square(list(errors.values())))))

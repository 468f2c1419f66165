"""Classification and box losses with exact analytic gradients.

Everything here is pure numpy on plain values; the model's autodiff layer
injects these gradients at the probability/box nodes so the same formulas
serve both standalone evaluation (loss-curve CSVs, unit oracles) and
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatch, DomainError
from .geometry import Box, to_center_form

PROB_EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass(frozen=True)
class DwclParams:
    beta1: float = 1.0
    beta2: float = 2.0
    focal_neg: FocalParams = field(default_factory=FocalParams)


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0


@dataclass
class DwclBatch:
    """One classification batch for the difficulty-weighted loss.

    ``initial_ious`` holds the frozen generation-time IoU for positive
    entries; values at negative positions are ignored.
    """

    probs: np.ndarray
    labels: np.ndarray
    initial_ious: np.ndarray

    def validate(self) -> None:
        if not (len(self.probs) == len(self.labels) == len(self.initial_ious)):
            raise DomainError("DwclBatch fields must have equal length")
        if not np.all((self.probs > 0.0) & (self.probs < 1.0)):
            raise DomainError("probabilities must lie strictly inside (0,1)")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise DomainError("labels must be 0 or 1")
        pos = self.labels == 1
        if np.any(pos) and not np.all(
            (self.initial_ious[pos] >= 0.0) & (self.initial_ious[pos] <= 1.0)
        ):
            raise DomainError("positive entries need initial_iou in [0,1]")


def clamp_prob(p):
    """Clamp probabilities into [PROB_EPS, 1 - PROB_EPS] before any log."""
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def positive_term(p, alpha, gamma):
    """-alpha * (1-p)^gamma * log(p) and its derivative in p. Vectorized."""
    p = np.asarray(p, dtype=np.float64)
    one_m = 1.0 - p
    logp = np.log(p)
    loss = -alpha * one_m**gamma * logp
    grad = alpha * gamma * one_m ** (gamma - 1.0) * logp - alpha * one_m**gamma / p
    return loss, grad


def negative_term(p, alpha, gamma):
    """-(1-alpha) * p^gamma * log(1-p) and its derivative in p. Vectorized."""
    p = np.asarray(p, dtype=np.float64)
    log1m = np.log(1.0 - p)
    loss = -(1.0 - alpha) * p**gamma * log1m
    grad = -(1.0 - alpha) * gamma * p ** (gamma - 1.0) * log1m + (1.0 - alpha) * p**gamma / (
        1.0 - p
    )
    return loss, grad


def focal_loss(p: float, y: int, params: FocalParams = FocalParams()) -> tuple[float, float]:
    """Focal loss for one (probability, binary label) pair.

    Returns (loss, dloss/dp). The caller is responsible for clamping p into
    [PROB_EPS, 1 - PROB_EPS]; anything outside the open interval raises.
    """
    if not (0.0 < p < 1.0):
        raise DomainError(f"p={p!r} outside (0,1)")
    if y == 1:
        loss, grad = positive_term(p, params.alpha, params.gamma)
    elif y == 0:
        loss, grad = negative_term(p, params.alpha, params.gamma)
    else:
        raise DomainError(f"label must be 0 or 1, got {y!r}")
    return float(loss), float(grad)


def dwcl_factors(initial_ious, params: DwclParams = DwclParams()) -> np.ndarray:
    """Per-sample (alpha, gamma) pairs from the frozen difficulty priors.

    alpha_l = (1 - IoU_l) / mean(1 - IoU); gamma_l = beta1*(1 - IoU_l) + beta2.
    The normalizer is the mean over exactly the IoUs passed in, so callers
    decide the batch boundary. Raises DegenerateBatch when every IoU is 1.
    """
    ious = np.asarray(initial_ious, dtype=np.float64)
    if ious.size == 0:
        raise DomainError("dwcl_factors needs at least one IoU")
    if not np.all((ious >= 0.0) & (ious <= 1.0)):
        raise DomainError("IoU values must lie in [0,1]")
    difficulty = 1.0 - ious
    mean_diff = difficulty.mean()
    if mean_diff == 0.0:
        raise DegenerateBatch("all initial IoUs equal 1; difficulty mean is zero")
    alphas = difficulty / mean_diff
    gammas = params.beta1 * difficulty + params.beta2
    return np.stack([alphas, gammas], axis=1)


def dwcl_loss(
    batch: DwclBatch, params: DwclParams = DwclParams()
) -> tuple[float, np.ndarray, np.ndarray]:
    """Difficulty-weighted classification loss over one batch.

    Positives get the difficulty-adjusted positive branch with factors
    normalized over this batch's positives; negatives are bit-identical to
    the plain focal negative branch. The difficulty priors are constants:
    no gradient flows through the factors. Returns (total, per_sample,
    dloss_dp).
    """
    batch.validate()
    p = np.asarray(batch.probs, dtype=np.float64)
    labels = np.asarray(batch.labels)
    per_sample = np.zeros_like(p)
    grads = np.zeros_like(p)
    pos = labels == 1
    neg = ~pos
    if np.any(pos):
        factors = dwcl_factors(np.asarray(batch.initial_ious, dtype=np.float64)[pos], params)
        per_sample[pos], grads[pos] = positive_term(p[pos], factors[:, 0], factors[:, 1])
    if np.any(neg):
        per_sample[neg], grads[neg] = negative_term(
            p[neg], params.focal_neg.alpha, params.focal_neg.gamma
        )
    return float(per_sample.sum()), per_sample, grads


# center-form rows (cx, cy, w, h) as linear functions of corner columns
CF_FROM_CORNERS = np.array(
    [
        [0.5, 0.0, 0.5, 0.0],
        [0.0, 0.5, 0.0, 0.5],
        [-1.0, 0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0, 1.0],
    ]
)
# corner rows (x1, y1, x2, y2) as linear functions of center-form columns
CORNERS_FROM_CF = np.array(
    [
        [1.0, 0.0, -0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, 0.5],
    ]
)


def giou_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise GIoU of corner boxes and d(giou)/da; b is constant.

    Shapes (K,4), (K,4) -> ((K,), (K,4)). Min/max kinks take the flat-side
    subgradient; exact ties are measure-zero for the random inputs the
    finite-difference suite draws.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1, ax2, ay2 = a.T
    bx1, by1, bx2, by2 = b.T
    wa, ha = ax2 - ax1, ay2 - ay1
    area_a = wa * ha
    area_b = (bx2 - bx1) * (by2 - by1)
    d_area = np.stack([-ha, -wa, ha, wa], axis=1)

    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    zero = np.zeros_like(iw)
    d_iw = np.stack([np.where(ax1 > bx1, -1.0, 0.0), zero, np.where(ax2 < bx2, 1.0, 0.0), zero], axis=1)
    d_ih = np.stack([zero, np.where(ay1 > by1, -1.0, 0.0), zero, np.where(ay2 < by2, 1.0, 0.0)], axis=1)
    d_inter = np.where(overlap[:, None], d_iw * ih[:, None] + d_ih * iw[:, None], 0.0)

    union = area_a + area_b - inter
    d_union = d_area - d_inter

    ew = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    eh = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    enclose = ew * eh
    d_ew = np.stack([np.where(ax1 < bx1, -1.0, 0.0), zero, np.where(ax2 > bx2, 1.0, 0.0), zero], axis=1)
    d_eh = np.stack([zero, np.where(ay1 < by1, -1.0, 0.0), zero, np.where(ay2 > by2, 1.0, 0.0)], axis=1)
    d_enclose = d_ew * eh[:, None] + d_eh * ew[:, None]

    ok = union > 0.0
    safe_union = np.where(ok, union, 1.0)
    val = np.where(ok, inter / safe_union - (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0)
    grad = (d_inter * union[:, None] - inter[:, None] * d_union) / safe_union[:, None] ** 2
    grad += (d_union * enclose[:, None] - union[:, None] * d_enclose) / np.where(
        enclose > 0, enclose, 1.0
    )[:, None] ** 2
    grad = np.where(ok[:, None], grad, 0.0)
    return val, grad


def box_losses(pred: Box, target: Box) -> tuple[float, float, np.ndarray, np.ndarray]:
    """L1 (over center-form coordinates) and GIoU loss for one box pair.

    Returns (l1, giou_loss, dl1/dpred, dgiou_loss/dpred) with gradients
    taken in the predicted box's corner coordinates.
    """
    pa = pred.as_array().reshape(1, 4)
    ta = target.as_array().reshape(1, 4)
    diff_cf = np.array(to_center_form(pred)) - np.array(to_center_form(target))
    l1 = float(np.abs(diff_cf).sum())
    dl1 = CF_FROM_CORNERS.T @ np.sign(diff_cf)
    g, dg = giou_with_grad(pa, ta)
    return l1, float(1.0 - g[0]), dl1, -dg[0]


def box_losses_cf(
    pred_cf: np.ndarray, target_corners: np.ndarray, target_cf: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched box losses with gradients in center-form coordinates.

    Shapes: (K,4) each -> (l1 (K,), giou_loss (K,), dl1/dcf, dgiou_loss/dcf).
    Used on the training path where predictions live in center form.
    """
    pred_cf = np.asarray(pred_cf, dtype=np.float64).reshape(-1, 4)
    diff = pred_cf - np.asarray(target_cf, dtype=np.float64).reshape(-1, 4)
    l1 = np.abs(diff).sum(axis=1)
    dl1 = np.sign(diff)
    pred_corners = pred_cf @ CORNERS_FROM_CF.T
    g, dg_corners = giou_with_grad(pred_corners, target_corners)
    dgl_cf = -(dg_corners @ CORNERS_FROM_CF)
    return l1, 1.0 - g, dl1, dgl_cf


def total_objective(obj_terms, aux_terms, weights: LossWeights = LossWeights()) -> float:
    """Weighted sum of per-level (cls, l1, giou) triples for both query families."""
    total = 0.0
    for cls, l1, gi in list(obj_terms) + list(aux_terms):
        total += weights.w_cls * cls + weights.w_l1 * l1 + weights.w_giou * gi
    return total

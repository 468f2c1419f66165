"""Boxes, IoU/GIoU, and the noisy positive-sample generator.

All boxes are axis-aligned rectangles in normalized corner form
(x1, y1, x2, y2) with x1 <= x2 and y1 <= y2. Coordinates are expected to
live in [0, 1] for rendered data; loss code may pass slightly
out-of-range boxes and the overlap math stays valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, RejectionExhausted

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"corner order violated: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clamped(self) -> "Box":
        """Clamp all corners to [0, 1]."""
        return Box(
            min(max(self.x1, 0.0), 1.0),
            min(max(self.y1, 0.0), 1.0),
            min(max(self.x2, 0.0), 1.0),
            min(max(self.y2, 0.0), 1.0),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Box":
        return Box(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


class NoiseKind(Enum):
    PERTURBED = "perturbed"
    EXPANDED = "expanded"


@dataclass(frozen=True)
class NoisySample:
    """A perturbed or expanded copy of a ground-truth box.

    ``initial_iou`` is the overlap with the generating ground truth at
    creation time; it is the frozen difficulty prior consumed by the
    difficulty-weighted loss and never updated afterwards.
    """

    box: Box
    gt_index: int
    category_id: int
    initial_iou: float
    kind: NoiseKind


@dataclass(frozen=True)
class NoiseConfig:
    lam: float = 0.4
    m_perturbed: int = 6
    m_expanded: int = 2
    expansion_low: float = 1.0
    expansion_high: float = 1.4
    max_rejection_resamples: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("noise.lam must be >= 0")
        if self.m_perturbed < 1:
            raise ConfigError("noise.m_perturbed must be >= 1")
        if self.m_expanded < 0:
            raise ConfigError("noise.m_expanded must be >= 0")
        if not (1.0 <= self.expansion_low <= self.expansion_high):
            raise ConfigError("noise expansion range must satisfy 1 <= low <= high")
        # upper bound < sqrt(2) keeps the concentric IoU 1/s^2 above 0.5
        if self.expansion_high >= SQRT2:
            raise ConfigError("noise.expansion_high must be < sqrt(2)")
        if self.max_rejection_resamples < 1:
            raise ConfigError("noise.max_rejection_resamples must be >= 1")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: iou minus the relative dead area of the enclosing box."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    i = inter / union if union > 0.0 else 0.0
    if enclose <= 0.0:
        return i
    return i - (enclose - union) / enclose


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form box arrays, shapes (N,4) x (T,4) -> (N,T)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU of corner-form box arrays, shapes (N,4) x (T,4) -> (N,T)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ious = iou_matrix(a, b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    ew = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    eh = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    enclose = ew * eh
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(enclose > 0.0, ious - (enclose - union) / enclose, ious)
    return out


def to_center_form(b: Box) -> tuple[float, float, float, float]:
    """Corner box -> (cx, cy, w, h)."""
    return (0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1)


def from_center_form(cx: float, cy: float, w: float, h: float) -> Box:
    """(cx, cy, w, h) -> corner box."""
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def _perturbed_sample(gt: Box, lam: float, cap: int, rng: np.random.Generator) -> tuple[Box, float]:
    """One corner-jittered copy of ``gt`` with clamped-box IoU > 0.5.

    Each corner coordinate moves by half the matching side length times
    lam times a signed standard-normal draw. The draw's sign carries the
    perturbation direction. Resamples until the quality rule holds.
    """
    w, h = gt.width, gt.height
    for _ in range(cap):
        d = rng.standard_normal(4)
        x1 = gt.x1 + 0.5 * w * lam * d[0]
        y1 = gt.y1 + 0.5 * h * lam * d[1]
        x2 = gt.x2 + 0.5 * w * lam * d[2]
        y2 = gt.y2 + 0.5 * h * lam * d[3]
        if x2 < x1 or y2 < y1:
            continue
        cand = Box(x1, y1, x2, y2).clamped()
        q = iou(cand, gt)
        if q > 0.5:
            return cand, q
    raise RejectionExhausted(
        f"no perturbed sample with IoU > 0.5 after {cap} attempts for gt {gt}"
    )


def _expanded_sample(gt: Box, cfg: NoiseConfig, rng: np.random.Generator) -> tuple[Box, float]:
    """One concentric scale-up of ``gt`` that stays inside [0,1]^2.

    Both sides scale by s drawn uniformly from the expansion range, so the
    sample contains its generator and IoU is exactly 1/s^2. Samples that
    would spill over the image border are rejected rather than clamped,
    which keeps the shared-center property exact.
    """
    cx, cy = gt.center
    w, h = gt.width, gt.height
    for _ in range(cfg.max_rejection_resamples):
        s = rng.uniform(cfg.expansion_low, cfg.expansion_high)
        hw, hh = 0.5 * s * w, 0.5 * s * h
        x1, y1, x2, y2 = cx - hw, cy - hh, cx + hw, cy + hh
        if x1 < 0.0 or y1 < 0.0 or x2 > 1.0 or y2 > 1.0:
            continue
        return Box(x1, y1, x2, y2), 1.0 / (s * s)
    raise RejectionExhausted(
        f"no in-bounds expanded sample after {cfg.max_rejection_resamples} attempts for gt {gt}"
    )


def generate_noisy_samples(
    gt_boxes: list[tuple[Box, int]],
    cfg: NoiseConfig,
    rng: np.random.Generator,
) -> list[NoisySample]:
    """Generate noisy positive samples for every ground-truth box.

    For ground truth i the output contains cfg.m_perturbed corner-jittered
    samples followed by cfg.m_expanded concentric expansions, in ground
    truth order. Every sample keeps its generator's category, records its
    IoU with the generator at creation time, and satisfies IoU > 0.5.
    Ordering is deterministic for a given rng state.
    """
    cfg.validate()
    out: list[NoisySample] = []
    for gi, (gt, cat) in enumerate(gt_boxes):
        if gt.area <= 0.0:
            raise ConfigError(f"gt box {gi} has non-positive area")
        for _ in range(cfg.m_perturbed):
            box, q = _perturbed_sample(gt, cfg.lam, cfg.max_rejection_resamples, rng)
            out.append(NoisySample(box, gi, cat, q, NoiseKind.PERTURBED))
        for _ in range(cfg.m_expanded):
            box, q = _expanded_sample(gt, cfg, rng)
            out.append(NoisySample(box, gi, cat, q, NoiseKind.EXPANDED))
    return out

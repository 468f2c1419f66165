"""Detection metrics: greedy matching, 101-point AP, and the zero-shot protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import CheckpointData, load_checkpoint
from .errors import SplitContamination
from .geometry import Box, iou_matrix
from .scenes import Dataset
from .textspace import Category, prompt_set_for

IOU_THRESHOLDS = np.arange(0.50, 0.96, 0.05).round(2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS_PER_IMAGE = 100


@dataclass
class EvalResult:
    per_category_ap: dict[str, float]
    map_50_95: float
    map_50: float
    map_75: float
    num_images: int
    num_gt: int

    def report(self) -> str:
        lines = [
            f"images: {self.num_images}",
            f"ground truths: {self.num_gt}",
            f"mAP@[0.50:0.95]: {self.map_50_95:.4f}",
            f"mAP@0.50: {self.map_50:.4f}",
            f"mAP@0.75: {self.map_75:.4f}",
        ]
        for cat in sorted(self.per_category_ap):
            lines.append(f"AP[{cat}]: {self.per_category_ap[cat]:.4f}")
        return "\n".join(lines)

    def csv_row(self) -> str:
        return ",".join(
            repr(v) for v in (self.map_50_95, self.map_50, self.map_75, self.num_images, self.num_gt)
        )


def match_detections(dets: list[tuple[Box, float]], gts: list[Box], iou_threshold: float) -> list[bool]:
    """Greedy TP/FP flags for score-sorted detections of one category.

    Each detection claims the unmatched ground truth of highest IoU,
    provided that IoU reaches the threshold; every ground truth can be
    claimed at most once.
    """
    if not dets:
        return []
    flags = [False] * len(dets)
    if not gts:
        return flags
    det_arr = np.array([b.as_array() for b, _ in dets]).reshape(-1, 4)
    gt_arr = np.array([b.as_array() for b in gts]).reshape(-1, 4)
    ious = iou_matrix(det_arr, gt_arr)
    taken = np.zeros(len(gts), dtype=bool)
    for di in range(len(dets)):
        row = np.where(taken, -1.0, ious[di])
        gi = int(row.argmax())
        if row[gi] >= iou_threshold:
            flags[di] = True
            taken[gi] = True
    return flags


def average_precision(flags: list[bool], num_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if num_gt == 0:
        return 0.0 if flags else float("nan")  # nan = skip category
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # max precision at recall >= r for each of the 101 recall points
    best = np.zeros(len(RECALL_POINTS))
    for i, r in enumerate(RECALL_POINTS):
        ok = recall >= r - 1e-12
        best[i] = precision[ok].max() if ok.any() else 0.0
    return float(best.mean())


@dataclass
class DetRecord:
    score: float
    image: int
    box: Box


@dataclass
class MetricAccumulator:
    """Collects per-image detections/ground truths and computes the metric set."""

    categories: list[Category]
    dets: dict[Category, list[DetRecord]] = field(default_factory=dict)
    gts: dict[Category, dict[int, list[Box]]] = field(default_factory=dict)
    num_images: int = 0
    num_gt: int = 0

    def __post_init__(self):
        for cat in self.categories:
            self.dets[cat] = []
            self.gts[cat] = {}

    def add_image(
        self,
        detections: list[tuple[Box, Category, float]],
        ground_truths: list[tuple[Box, Category]],
    ) -> None:
        img = self.num_images
        self.num_images += 1
        ordered = sorted(detections, key=lambda d: -d[2])[:MAX_DETS_PER_IMAGE]
        for box, cat, score in ordered:
            if cat in self.dets:
                self.dets[cat].append(DetRecord(score=score, image=img, box=box))
        for box, cat in ground_truths:
            if cat in self.gts:
                self.gts[cat].setdefault(img, []).append(box)
                self.num_gt += 1

    def compute(self) -> EvalResult:
        per_cat_threshold_ap: dict[Category, list[float]] = {}
        threshold_means: list[float] = []
        ap_at = {}
        for thr in IOU_THRESHOLDS:
            aps = []
            for cat in self.categories:
                ap = self._category_ap(cat, float(thr))
                if not np.isnan(ap):
                    aps.append(ap)
                    per_cat_threshold_ap.setdefault(cat, []).append(ap)
            threshold_means.append(float(np.mean(aps)) if aps else 0.0)
            ap_at[round(float(thr), 2)] = threshold_means[-1]
        per_category = {
            f"{s}/{c}": float(np.mean(v)) for (s, c), v in per_cat_threshold_ap.items()
        }
        return EvalResult(
            per_category_ap=per_category,
            map_50_95=float(np.mean(threshold_means)) if threshold_means else 0.0,
            map_50=ap_at.get(0.5, 0.0),
            map_75=ap_at.get(0.75, 0.0),
            num_images=self.num_images,
            num_gt=self.num_gt,
        )

    def _category_ap(self, cat: Category, thr: float) -> float:
        records = sorted(
            self.dets[cat], key=lambda r: (-r.score, r.image)
        )  # stable: ties resolved by insertion order within an image
        gt_by_image = self.gts[cat]
        total_gt = sum(len(v) for v in gt_by_image.values())
        per_image: dict[int, list[tuple[Box, float]]] = {}
        for r in records:
            per_image.setdefault(r.image, []).append((r.box, r.score))
        flag_by_record: dict[int, list[bool]] = {}
        for img, dets in per_image.items():
            flag_by_record[img] = match_detections(dets, gt_by_image.get(img, []), thr)
        cursors = {img: 0 for img in per_image}
        flags = []
        for r in records:
            flags.append(flag_by_record[r.image][cursors[r.image]])
            cursors[r.image] += 1
        return average_precision(flags, total_gt)


def evaluate_detections(
    per_image: list[tuple[list[tuple[Box, Category, float]], list[tuple[Box, Category]]]],
    categories: list[Category],
) -> EvalResult:
    """Metric over explicit (detections, ground truths) pairs; oracle-friendly."""
    acc = MetricAccumulator(categories=list(categories))
    for dets, gts in per_image:
        acc.add_image(dets, gts)
    return acc.compute()


def check_no_contamination(ck: CheckpointData, eval_categories: list[Category]) -> None:
    train = set(ck.split.train_combos)
    bad = train & set(eval_categories)
    if bad:
        raise SplitContamination(
            f"held-out categories {sorted(bad)} appear in the checkpoint's training split"
        )


def zero_shot_eval(checkpoint, dataset: Dataset, max_scenes: int | None = None) -> EvalResult:
    """Zero-shot protocol: prompt with every benchmark category, no aux queries.

    ``checkpoint`` is a path or loaded CheckpointData. The guard refuses to
    score a model whose training split contains any benchmark category.
    """
    ck = checkpoint if isinstance(checkpoint, CheckpointData) else load_checkpoint(checkpoint)
    if dataset.role == "heldout":
        categories = list(dataset.split.heldout_combos)
    else:
        categories = list(dataset.categories)
    check_no_contamination(ck,categories)
    model = ck.build_model()
    prompts = prompt_set_for(ck.space, categories)
    acc = MetricAccumulator(categories=categories)
    scenes = dataset.scenes if max_scenes is None else dataset.scenes[:max_scenes]
    for scene in scenes:
        dets = model.inference(scene.image, prompts.embeddings)
        expanded = [
            (d.box, categories[pi], float(d.scores[pi]))
            for d in dets
            for pi in range(len(categories))
        ]
        gts = [(b, (s, c)) for b, s, c in scene.annotations]
        acc.add_image(expanded, gts)
    return acc.compute()

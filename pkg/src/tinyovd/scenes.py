"""Procedural scenes of colored shapes with exact annotations.

Scenes are rendered by supersampled coverage masks composited over a
seeded noise background, then quantized to 8-bit levels so that disk
round-trips are bit-exact. Annotation boxes come from the shape parameters
analytically, not from the raster.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, PlacementFailure, SchemaVersionMismatch
from .geometry import Box, iou
from .textspace import Category

SCHEMA_VERSION = 1

SHAPE_NAMES = ("circle", "square", "triangle", "cross")
COLOR_VALUES: dict[str, tuple[float, float, float]] = {
    "red": (0.80, 0.12, 0.12),
    "green": (0.10, 0.68, 0.16),
    "blue": (0.15, 0.22, 0.85),
    "yellow": (0.86, 0.80, 0.10),
}


@dataclass(frozen=True)
class SplitSpec:
    shapes: tuple[str, ...]
    colors: tuple[str, ...]
    train_combos: tuple[Category, ...]
    heldout_combos: tuple[Category, ...]

    def validate(self) -> None:
        all_combos = {(s, c) for s in self.shapes for c in self.colors}
        train, held = set(self.train_combos), set(self.heldout_combos)
        if train & held:
            raise ConfigError("train and held-out combos overlap")
        if not train <= all_combos or not held <= all_combos:
            raise ConfigError("combo outside the shape/color vocabulary")
        # compositional zero-shot needs every shape and color seen in training
        for s in self.shapes:
            if not any(cs == s for cs, _ in self.train_combos):
                raise ConfigError(f"shape {s!r} never appears in a train combo")
        for c in self.colors:
            if not any(cc == c for _, cc in self.train_combos):
                raise ConfigError(f"color {c!r} never appears in a train combo")

    @staticmethod
    def default() -> "SplitSpec":
        shapes, colors = SHAPE_NAMES, tuple(COLOR_VALUES)
        held = tuple((shapes[i], colors[i]) for i in range(4))
        train = tuple(
            (s, c) for s in shapes for c in colors if (s, c) not in set(held)
        )
        return SplitSpec(shapes=shapes, colors=colors, train_combos=train, heldout_combos=held)

    def to_dict(self) -> dict:
        return {
            "shapes": list(self.shapes),
            "colors": list(self.colors),
            "train_combos": [list(c) for c in self.train_combos],
            "heldout_combos": [list(c) for c in self.heldout_combos],
        }

    @staticmethod
    def from_dict(d: dict) -> "SplitSpec":
        return SplitSpec(
            shapes=tuple(d["shapes"]),
            colors=tuple(d["colors"]),
            train_combos=tuple((s, c) for s, c in d["train_combos"]),
            heldout_combos=tuple((s, c) for s, c in d["heldout_combos"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    combos: tuple[Category, ...]
    min_objects: int = 1
    max_objects: int = 5
    image_size: int = 64
    half_size_range: tuple[float, float] = (0.08, 0.16)
    max_pairwise_iou: float = 0.3
    placement_attempts: int = 200
    supersample: int = 4
    # leave room so concentric box expansions up to ~1.4x stay on-canvas
    margin_scale: float = 1.45


@dataclass
class Scene:
    image: np.ndarray  # (S, S, 3) float in [0,1], quantized to 1/255 steps
    annotations: list[tuple[Box, str, str]]
    scene_id: int
    seed: int

    @property
    def categories(self) -> list[Category]:
        return [(s, c) for _, s, c in self.annotations]

    @property
    def gt_boxes(self) -> list[Box]:
        return [b for b, _, _ in self.annotations]


def _shape_mask(shape: str, cx: float, cy: float, a: float, xs, ys) -> np.ndarray:
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= a * a
    if shape == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= a
    if shape == "triangle":
        # vertices (cx, cy-a), (cx-a, cy+a), (cx+a, cy+a)
        inside = ys <= cy + a
        inside &= (ys - (cy - a)) >= (xs - cx) * 2.0  # right edge
        inside &= (ys - (cy - a)) >= -(xs - cx) * 2.0  # left edge
        return inside
    if shape == "cross":
        t = 0.4 * a
        horiz = (np.abs(xs - cx) <= a) & (np.abs(ys - cy) <= t)
        vert = (np.abs(xs - cx) <= t) & (np.abs(ys - cy) <= a)
        return horiz | vert
    raise ConfigError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec, rng: np.random.Generator, scene_id: int = 0, seed: int = 0) -> Scene:
    """Render one scene; deterministic for a given rng state."""
    size = spec.image_size
    ss = spec.supersample
    hi = size * ss
    img = 0.5 + 0.08 * (rng.random((size, size, 3)) - 0.5)

    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[float, float, float, str, str]] = []
    boxes: list[Box] = []
    for _ in range(n):
        shape, color = spec.combos[int(rng.integers(len(spec.combos)))]
        ok = False
        for _ in range(spec.placement_attempts):
            a = float(rng.uniform(*spec.half_size_range))
            lim = spec.margin_scale * a
            cx = float(rng.uniform(lim, 1.0 - lim))
            cy = float(rng.uniform(lim, 1.0 - lim))
            box = Box(cx - a, cy - a, cx + a, cy + a)
            if all(iou(box, b) < spec.max_pairwise_iou for b in boxes):
                ok = True
                break
        if not ok:
            raise PlacementFailure(
                f"could not place object {len(placed)} within {spec.placement_attempts} attempts"
            )
        placed.append((cx, cy, a, shape, color))
        boxes.append(box)

    # supersampled coverage, averaged down to per-pixel alpha
    coords = (np.arange(hi) + 0.5) / hi
    xs, ys = np.meshgrid(coords, coords, indexing="xy")
    for cx, cy, a, shape, color in placed:
        mask = _shape_mask(shape, cx, cy, a, xs, ys)
        cov = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))
        img = img * (1.0 - cov[:, :, None]) + np.asarray(COLOR_VALUES[color]) * cov[:, :, None]

    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    anns = [(b, s, c) for b, (_, _, _, s, c) in zip(boxes, placed)]
    return Scene(image=img, annotations=anns, scene_id=scene_id, seed=seed)


def generate_dataset(
    combos: tuple[Category, ...], num_scenes: int, master_seed: int, spec: SceneSpec | None = None
) -> list[Scene]:
    """Scenes drawn from ``combos``; scene i uses the (master_seed, i) stream."""
    spec = spec or SceneSpec(combos=tuple(combos))
    if spec.combos != tuple(combos):
        spec = replace(spec, combos=tuple(combos))
    out = []
    for i in range(num_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([int(master_seed), i]))
        out.append(render_scene(spec, rng, scene_id=i, seed=int(master_seed)))
    return out


@dataclass
class Dataset:
    scenes: list[Scene]
    split: SplitSpec
    role: str  # "train" or "heldout"
    categories: list[Category] = field(default_factory=list)

    def __post_init__(self):
        if not self.categories:
            seen: list[Category] = []
            for sc in self.scenes:
                for cat in sc.categories:
                    if cat not in seen:
                        seen.append(cat)
            self.categories = seen


def write_dataset(dataset: Dataset, path: str) -> None:
    """Line-delimited records: a header line, then one scene per line."""
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "schema_version": SCHEMA_VERSION,
            "kind": "tinyovd-scenes",
            "role": dataset.role,
            "num_scenes": len(dataset.scenes),
            "split": dataset.split.to_dict(),
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for sc in dataset.scenes:
            raw = np.round(sc.image * 255.0).astype(np.uint8).tobytes()
            rec = {
                "scene_id": sc.scene_id,
                "seed": sc.seed,
                "image_size": sc.image.shape[0],
                "image_b64": base64.b64encode(raw).decode("ascii"),
                "annotations": [
                    [b.x1, b.y1, b.x2, b.y2, s, c] for b, s, c in sc.annotations
                ],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise SchemaVersionMismatch(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SchemaVersionMismatch(f"{path}: unreadable header: {e}") from e
    if header.get("kind") != "tinyovd-scenes":
        raise SchemaVersionMismatch(f"{path}: not a scene dataset")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: schema version {header.get('schema_version')} unsupported"
        )
    expected = header["num_scenes"]
    scenes = []
    try:
        for line in lines[1:]:
            if not line:
                continue
            rec = json.loads(line)
            size = rec["image_size"]
            raw = base64.b64decode(rec["image_b64"], validate=True)
            img = np.frombuffer(raw, dtype=np.uint8).reshape(size, size, 3) / 255.0
            anns = [
                (Box(x1, y1, x2, y2), s, c) for x1, y1, x2, y2, s, c in rec["annotations"]
            ]
            scenes.append(
                Scene(image=img, annotations=anns, scene_id=rec["scene_id"], seed=rec["seed"])
            )
    except (json.JSONDecodeError, ValueError, KeyError) as e:
        raise SchemaVersionMismatch(f"{path}: corrupt scene record: {e}") from e
    if len(scenes) != expected:
        raise SchemaVersionMismatch(
            f"{path}: header promises {expected} scenes, found {len(scenes)}"
        )
    return Dataset(scenes=scenes, split=SplitSpec.from_dict(header["split"]), role=header["role"])

"""Frozen compositional category-embedding space and per-image prompt sampling.

Stands in for a pretrained text encoder: every category is a (shape, color)
pair embedded as the normalized sum of two fixed random unit prototypes.
Because held-out combinations share prototypes with training ones,
zero-shot transfer to unseen pairs is well-posed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientLabelSpace, UnknownCategory

Category = tuple[str, str]  # (shape, color)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class CategorySpace:
    shapes: tuple[str, ...]
    colors: tuple[str, ...]
    d_text: int
    seed: int
    shape_prototypes: dict[str, np.ndarray] = field(repr=False)
    color_prototypes: dict[str, np.ndarray] = field(repr=False)

    @staticmethod
    def create(shapes, colors, d_text: int = 32, seed: int = 0) -> "CategorySpace":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E57]))
        shape_protos = {s: _unit(rng.standard_normal(d_text)) for s in shapes}
        color_protos = {c: _unit(rng.standard_normal(d_text)) for c in colors}
        for v in list(shape_protos.values()) + list(color_protos.values()):
            v.setflags(write=False)
        return CategorySpace(
            shapes=tuple(shapes),
            colors=tuple(colors),
            d_text=d_text,
            seed=int(seed),
            shape_prototypes=shape_protos,
            color_prototypes=color_protos,
        )

    @property
    def all_categories(self) -> list[Category]:
        return [(s, c) for s in self.shapes for c in self.colors]


@dataclass(frozen=True)
class PromptSet:
    categories: tuple[Category, ...]
    embeddings: np.ndarray  # (num_prompts, d_text)
    positive_mask: np.ndarray  # bool per prompt

    def __len__(self) -> int:
        return len(self.categories)

    def index_of(self, category: Category) -> int:
        return self.categories.index(category)


def embed_category(space: CategorySpace, shape: str, color: str) -> np.ndarray:
    """Unit-norm embedding of one (shape, color) pair; deterministic."""
    if shape not in space.shape_prototypes:
        raise UnknownCategory(f"unknown shape {shape!r}")
    if color not in space.color_prototypes:
        raise UnknownCategory(f"unknown color {color!r}")
    return _unit(space.shape_prototypes[shape] + space.color_prototypes[color])


def sample_prompts(
    space: CategorySpace,
    gt_categories: list[Category],
    num_negatives: int,
    rng: np.random.Generator,
    label_space: list[Category] | None = None,
) -> PromptSet:
    """Positive prompts from the image's categories plus sampled negatives.

    Positives are the deduplicated ground-truth categories (first-seen
    order); negatives are drawn uniformly without replacement from
    ``label_space`` minus the positives (defaults to the whole space).
    The final prompt order is shuffled so position carries no label signal.
    """
    positives: list[Category] = []
    for cat in gt_categories:
        if cat not in positives:
            positives.append(cat)
    pool = label_space if label_space is not None else space.all_categories
    candidates = [c for c in pool if c not in positives]
    if num_negatives > len(candidates):
        raise InsufficientLabelSpace(
            f"need {num_negatives} negatives but only {len(candidates)} categories remain"
        )
    neg_idx = rng.choice(len(candidates), size=num_negatives, replace=False)
    cats = positives + [candidates[i] for i in neg_idx]
    mask = np.array([True] * len(positives) + [False] * num_negatives)
    order = rng.permutation(len(cats))
    cats = [cats[i] for i in order]
    mask = mask[order]
    emb = np.stack([embed_category(space, s, c) for s, c in cats])
    return PromptSet(categories=tuple(cats), embeddings=emb, positive_mask=mask)


def prompt_set_for(space: CategorySpace, categories: list[Category]) -> PromptSet:
    """Fixed-order prompt set over explicit categories (inference/eval use)."""
    emb = np.stack([embed_category(space, s, c) for s, c in categories])
    return PromptSet(
        categories=tuple(categories),
        embeddings=emb,
        positive_mask=np.ones(len(categories), dtype=bool),
    )

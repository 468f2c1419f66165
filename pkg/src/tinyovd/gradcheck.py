"""Finite-difference validation of every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .detector import Detector, ModelConfig
from .fusion import FusionModule
from .geometry import Box, NoiseConfig, generate_noisy_samples
from .losses import DwclBatch, DwclParams, FocalParams, LossWeights, box_losses, dwcl_loss, focal_loss
from .nn import ParamStore
from .scenes import SceneSpec, SplitSpec, render_scene
from .textspace import CategorySpace, sample_prompts
from .trainer import ImageExample, compute_image_loss

TOL_LOSSES = 1e-4
TOL_FUSION = 1e-4
TOL_MODEL = 1e-3
STEP_LOSSES = 1e-6
STEP_MODEL = 1e-5


@dataclass
class GroupReport:
    name: str
    worst_rel_err: float
    tolerance: float
    checks: int
    worst_at: str = ""

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance


@dataclass
class GradcheckReport:
    groups: list[GroupReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def text(self) -> str:
        lines = []
        for g in self.groups:
            status = "pass" if g.passed else "FAIL"
            where = f" at {g.worst_at}" if g.worst_at else ""
            lines.append(
                f"{status} {g.name}: worst rel err {g.worst_rel_err:.3e}"
                f" (tol {g.tolerance:.0e}, {g.checks} checks){where}"
            )
        lines.append("OVERALL " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def check_losses(seed: int = 0, samples: int = 1000) -> GroupReport:
    """Focal, difficulty-weighted, and box losses against central differences."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    worst, worst_at, checks = 0.0, "", 0
    h = STEP_LOSSES

    for k in range(samples // 2):
        p = float(rng.uniform(0.01, 0.99))
        y = int(rng.integers(0, 2))
        params = FocalParams(alpha=float(rng.uniform(0.1, 0.9)), gamma=float(rng.uniform(0.0, 3.0)))
        _, grad = focal_loss(p, y, params)
        fd = (focal_loss(p + h, y, params)[0] - focal_loss(p - h, y, params)[0]) / (2 * h)
        e = _rel_err(grad, fd)
        checks += 1
        if e > worst:
            worst, worst_at = e, f"focal sample {k}"

    for k in range(samples // 4):
        n = int(rng.integers(1, 9))
        probs = rng.uniform(0.02, 0.98, n)
        labels = rng.integers(0, 2, n)
        if labels.sum() == 0:
            labels[0] = 1
        ious = rng.uniform(0.0, 0.999, n)
        params = DwclParams(beta1=float(rng.uniform(0.5, 2.0)), beta2=float(rng.uniform(1.0, 3.0)))
        batch = DwclBatch(probs=probs.copy(), labels=labels, initial_ious=ious)
        _, _, grads = dwcl_loss(batch, params)
        i = int(rng.integers(0, n))
        up, dn = probs.copy(), probs.copy()
        up[i] += h
        dn[i] -= h
        tu, _, _ = dwcl_loss(DwclBatch(up, labels, ious), params)
        td, _, _ = dwcl_loss(DwclBatch(dn, labels, ious), params)
        e = _rel_err(grads[i], (tu - td) / (2 * h))
        checks += 1
        if e > worst:
            worst, worst_at = e, f"dwcl batch {k}"

    for k in range(samples // 4):
        def rand_box():
            x1, y1 = rng.uniform(0, 0.7, 2)
            w, hgt = rng.uniform(0.1, 0.3, 2)
            return Box(x1, y1, x1 + w, y1 + hgt)

        pred, tgt = rand_box(), rand_box()
        l1, gl, dl1, dgl = box_losses(pred, tgt)
        for ci in range(4):
            pa = pred.as_array()
            up, dn = pa.copy(), pa.copy()
            up[ci] += h
            dn[ci] -= h
            lu = box_losses(Box.from_array(up), tgt)
            ld = box_losses(Box.from_array(dn), tgt)
            e1 = _rel_err(dl1[ci], (lu[0] - ld[0]) / (2 * h))
            e2 = _rel_err(dgl[ci], (lu[1] - ld[1]) / (2 * h))
            checks += 2
            if max(e1, e2) > worst:
                worst, worst_at = max(e1, e2), f"box pair {k} coord {ci}"

    return GroupReport("losses", worst, TOL_LOSSES, checks, worst_at)


def _fd_over_params(
    store: ParamStore,
    loss_fn,
    entries: list[tuple[str, int]],
    step: float,
    corrupt: str | None = None,
) -> tuple[float, str]:
    """Worst relative error of analytic vs central-difference gradients.

    ``corrupt`` names a tensor whose analytic gradient gets +1 at entry 0
    before comparison; it is the negative control proving the checker can
    fail.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in store.items()
    }
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"no tensor named {corrupt!r} to corrupt")
        analytic[corrupt].flat[0] += 1.0
        if (corrupt, 0) not in entries:
            entries = list(entries) + [(corrupt, 0)]
    worst, worst_at = 0.0, ""
    for name, flat_idx in entries:
        p = store[name]
        orig = p.data.flat[flat_idx]
        p.data.flat[flat_idx] = orig + step
        up = float(loss_fn().data)
        p.data.flat[flat_idx] = orig - step
        dn = float(loss_fn().data)
        p.data.flat[flat_idx] = orig
        fd = (up - dn) / (2 * step)
        e = _rel_err(float(analytic[name].flat[flat_idx]), fd)
        if e > worst:
            worst, worst_at = e, f"{name}[{flat_idx}]"
    return worst, worst_at


def _sample_entries(store: ParamStore, rng, per_tensor: int | None, total: int | None) -> list:
    all_entries = []
    for name, p in store.items():
        if per_tensor is not None:
            take = min(per_tensor, p.data.size)
            idxs = rng.choice(p.data.size, size=take, replace=False)
            all_entries += [(name, int(i)) for i in idxs]
        else:
            all_entries += [(name, int(i)) for i in range(p.data.size)]
    if total is not None and len(all_entries) > total:
        pick = rng.choice(len(all_entries), size=total, replace=False)
        all_entries = [all_entries[int(i)] for i in sorted(pick)]
    return all_entries


def check_fusion(seed: int = 0, per_tensor: int = 40, corrupt: str | None = None) -> GroupReport:
    """Gradients of a scalar readout through the fusion block."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 22]))
    d_text, d_model, tokens, prompts = 16, 32, 12, 5
    store = ParamStore()
    module = FusionModule.create(store, d_text, d_model, num_heads=4, rng=rng)
    # the output projection initializes to zero; randomize it so its input path is exercised
    module.attn.wo.w.data = rng.normal(0.0, 0.3, module.attn.wo.w.data.shape)
    f_i = store.add("image_tokens", rng.normal(0.0, 1.0, (tokens, d_model)))
    f_t = rng.normal(0.0, 1.0, (prompts, d_text))
    readout = rng.normal(0.0, 1.0, (tokens, d_model))

    def loss_fn():
        return (module(f_i, f_t) * readout).sum()

    entries = _sample_entries(store, rng, per_tensor=per_tensor, total=None)
    worst, worst_at = _fd_over_params(store, loss_fn, entries, STEP_LOSSES, corrupt=corrupt)
    return GroupReport("fusion", worst, TOL_FUSION, len(entries), worst_at)


def make_mini_example(seed: int, space: CategorySpace, with_aux: bool = True) -> ImageExample:
    """One random scene with prompts, noisy samples, and difficulty factors."""
    from .losses import dwcl_factors

    split = SplitSpec.default()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 33]))
    scene = render_scene(SceneSpec(combos=split.train_combos), rng, scene_id=0, seed=seed)
    prompts = sample_prompts(space, scene.categories, 4, rng, list(split.train_combos))
    aux = []
    factors = None
    if with_aux:
        gts = [(b, i) for i, (b, _, _) in enumerate(scene.annotations)]
        aux = generate_noisy_samples(gts, NoiseConfig(seed=seed), rng)
        factors = dwcl_factors([s.initial_iou for s in aux], DwclParams())
    return ImageExample(
        image=scene.image,
        prompts=prompts,
        gt_boxes=scene.gt_boxes,
        gt_prompt_idx=np.array([prompts.index_of(c) for c in scene.categories], dtype=np.int64),
        aux_samples=aux,
        aux_factors=factors,
    )


def check_model(
    seed: int = 0,
    num_params: int = 200,
    with_fusion: bool = True,
    corrupt: str | None = None,
) -> GroupReport:
    """Full-objective gradients on a mini scene, discrete choices frozen."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 44]))
    config = replace(ModelConfig(), seed=seed)
    model = Detector(config, with_fusion=with_fusion)
    if with_fusion:
        model.fusion.attn.wo.w.data = rng.normal(0.0, 0.1, model.fusion.attn.wo.w.data.shape)
    space = CategorySpace.create(SplitSpec.default().shapes, SplitSpec.default().colors, config.d_text, seed)
    ex = make_mini_example(seed, space)
    weights, dwcl_params = LossWeights(), DwclParams()
    _, _, frozen = compute_image_loss(model, ex, weights, dwcl_params)

    def loss_fn():
        t, _, _ = compute_image_loss(model, ex, weights, dwcl_params, frozen=frozen)
        return t

    entries = _sample_entries(model.store, rng, per_tensor=None, total=num_params)
    worst, worst_at = _fd_over_params(model.store, loss_fn, entries, STEP_MODEL, corrupt=corrupt)
    return GroupReport("model", worst, TOL_MODEL, len(entries), worst_at)


def run_gradcheck(scope: str = "all", seed: int = 0, corrupt: str | None = None) -> GradcheckReport:
    report = GradcheckReport()
    if scope in ("losses", "all"):
        report.groups.append(check_losses(seed))
    if scope in ("fusion", "all"):
        report.groups.append(check_fusion(seed, corrupt=corrupt if scope == "fusion" else None))
    if scope in ("model", "all"):
        report.groups.append(check_model(seed, corrupt=corrupt if scope == "model" else None))
    if not report.groups:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return report

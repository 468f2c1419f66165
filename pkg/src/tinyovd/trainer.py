"""Two-stage training: alignment with auxiliary queries, then fusion fine-tuning.

Stage 1 trains a fusion-free model; stage 2 rebuilds the model with the
fusion module (zero output projection), loads the stage-1 weights, and
fine-tunes everything. Per-iteration randomness comes from stateless
streams keyed by (seed, iteration, stream), so an interrupted run resumes
bit-exactly from its checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tensor, scalar_with_grad
from .checkpoint import load_checkpoint, load_params, load_stage1_into_stage2, save_checkpoint
from .detector import Detector, ForwardOutput, ModelConfig
from .errors import CheckpointMismatch, ConfigError, DegenerateBatch, NonFiniteLoss
from .geometry import Box, NoiseConfig, NoisySample, generate_noisy_samples, to_center_form
from .losses import (
    CORNERS_FROM_CF,
    DwclParams,
    FocalParams,
    LossWeights,
    PROB_EPS,
    box_losses_cf,
    dwcl_factors,
    negative_term,
    positive_term,
)
from .matching import Assignment, cost_matrix_from_arrays, hungarian
from .scenes import Dataset, Scene, read_dataset
from .textspace import CategorySpace, PromptSet, sample_prompts

STREAM_DATA, STREAM_NOISE, STREAM_PROMPTS = 0, 1, 2


@dataclass
class TrainConfig:
    stage: int = 1
    iterations: int = 6000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 0.75
    grad_clip_norm: float = 0.1
    num_negative_prompts: int = 8
    seed: int = 0
    use_o2m: bool = True
    aux_loss: str = "dwcl"  # "dwcl" | "focal"
    train_data: str = ""
    init_from: str | None = None
    out_checkpoint: str = ""
    metrics_csv: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    dwcl: DwclParams = field(default_factory=DwclParams)
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.stage == 2 and not self.init_from:
            raise ConfigError("stage 2 requires init_from (a stage-1 checkpoint)")
        if not (0.0 < self.lr_drop_fraction < 1.0):
            raise ConfigError("lr_drop_fraction must lie in (0,1)")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.aux_loss not in ("dwcl", "focal"):
            raise ConfigError("aux_loss must be 'dwcl' or 'focal'")
        if not self.train_data:
            raise ConfigError("train_data path is required")
        self.model.validate()
        self.noise.validate()


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Base rate until the drop point, then a tenth of it."""
    drop = math.floor(cfg.lr_drop_fraction * cfg.iterations)
    return cfg.lr if iteration < drop else cfg.lr * 0.1


def _iter_rng(seed: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration), stream]))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, store, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def clip_gradients(self, max_norm: float) -> float:
        sq = 0.0
        for _, p in self.store.items():
            if p.grad is not None:
                sq += float((p.grad**2).sum())
        norm = math.sqrt(sq)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for _, p in self.store.items():
                if p.grad is not None:
                    p.grad = p.grad * scale  # grads may be borrowed views; never mutate in place
        return norm

    def step(self, lr: float, weight_decay: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g**2
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p.data = p.data - lr * (update + weight_decay * p.data)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([float(self.t)])}
        for n in self.m:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        if "opt.t" not in tensors:
            raise CheckpointMismatch("checkpoint has no optimizer state to resume from")
        self.t = int(tensors["opt.t"][0])
        for n in self.m:
            self.m[n] = tensors[f"opt.m.{n}"].copy()
            self.v[n] = tensors[f"opt.v.{n}"].copy()


# ---------------------------------------------------------------------------
# per-image loss assembly


@dataclass
class ImageExample:
    image: np.ndarray
    prompts: PromptSet
    gt_boxes: list[Box]
    gt_prompt_idx: np.ndarray
    aux_samples: list[NoisySample]
    aux_factors: np.ndarray | None  # (A, 2) alpha/gamma rows, or None for plain focal


@dataclass
class FrozenDecisions:
    """Discrete choices pinned during finite-difference checks."""

    selection: np.ndarray
    assignments: list[Assignment]


def _cf_to_corners(cf: np.ndarray) -> np.ndarray:
    return cf @ CORNERS_FROM_CF.T


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _classification_term(
    logits: Tensor,
    y: np.ndarray,
    norm: float,
    pos_alpha,
    pos_gamma,
    neg_params: FocalParams,
    term_name: str,
) -> tuple[Tensor, float]:
    """Focal-family loss over a (queries x prompts) logit block.

    ``pos_alpha``/``pos_gamma`` broadcast against the positive entries;
    passing per-row arrays gives the difficulty-weighted variant and
    scalars give plain focal. Gradients are injected analytically at the
    logit node.
    """
    raw = _sigmoid(logits.data)
    p = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    inside = (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)
    pos = y == 1
    loss = np.empty_like(p)
    dldp = np.empty_like(p)
    alpha = np.broadcast_to(np.asarray(pos_alpha, dtype=np.float64).reshape(-1, 1), p.shape)
    gamma = np.broadcast_to(np.asarray(pos_gamma, dtype=np.float64).reshape(-1, 1), p.shape)
    lp, gp = positive_term(p[pos], alpha[pos], gamma[pos])
    loss[pos], dldp[pos] = lp, gp
    ln, gn = negative_term(p[~pos], neg_params.alpha, neg_params.gamma)
    loss[~pos], dldp[~pos] = ln, gn
    total = float(loss.sum()) / norm
    if not np.isfinite(total):
        raise NonFiniteLoss(f"{term_name} produced a non-finite value")
    dldz = dldp * raw * (1.0 - raw) * inside / norm
    return scalar_with_grad(total, [(logits, dldz)], name=term_name), total


def _box_terms(
    boxes_cf: Tensor,
    rows: np.ndarray,
    target_corners: np.ndarray,
    target_cf: np.ndarray,
    norm: float,
    term_name: str,
) -> tuple[Tensor, Tensor, float, float]:
    """L1 + GIoU losses for the selected prediction rows."""
    pred_cf = boxes_cf.data[rows]
    l1, gl, dl1, dgl = box_losses_cf(pred_cf, target_corners, target_cf)
    l1_total = float(l1.sum()) / norm
    gl_total = float(gl.sum()) / norm
    if not (np.isfinite(l1_total) and np.isfinite(gl_total)):
        raise NonFiniteLoss(f"{term_name} produced a non-finite value")
    grad_l1 = np.zeros_like(boxes_cf.data)
    grad_gl = np.zeros_like(boxes_cf.data)
    np.add.at(grad_l1, rows, dl1 / norm)
    np.add.at(grad_gl, rows, dgl / norm)
    l1_t = scalar_with_grad(l1_total, [(boxes_cf, grad_l1)], name=f"{term_name}.l1")
    gl_t = scalar_with_grad(gl_total, [(boxes_cf, grad_gl)], name=f"{term_name}.giou")
    return l1_t, gl_t, l1_total, gl_total


def _match_level(
    logits: Tensor, boxes_cf: Tensor, ex: ImageExample, weights: LossWeights
) -> Assignment:
    p = np.clip(_sigmoid(logits.data), PROB_EPS, 1.0 - PROB_EPS)
    scores = p[:, ex.gt_prompt_idx]
    q_cf = boxes_cf.data
    t_cf = np.array([to_center_form(b) for b in ex.gt_boxes]).reshape(-1, 4)
    t_corners = np.array([b.as_array() for b in ex.gt_boxes]).reshape(-1, 4)
    cost = cost_matrix_from_arrays(scores, _cf_to_corners(q_cf), q_cf, t_corners, t_cf, weights)
    return hungarian(cost)


def compute_image_loss(
    model: Detector,
    ex: ImageExample,
    weights: LossWeights,
    dwcl_params: DwclParams,
    frozen: FrozenDecisions | None = None,
) -> tuple[Tensor, dict[str, float], FrozenDecisions]:
    """Forward one image and assemble the weighted multi-level objective.

    Object queries (encoder level plus every decoder layer) are matched by
    the bipartite matcher and trained with focal loss; auxiliary queries
    keep their fixed binding and are trained with the difficulty-weighted
    loss (or focal when ``ex.aux_factors`` is None). ``frozen`` pins the
    selection and matchings so finite differences see a smooth function.
    """
    aux_cf = (
        np.array([to_center_form(s.box) for s in ex.aux_samples]).reshape(-1, 4)
        if ex.aux_samples
        else None
    )
    out: ForwardOutput = model.forward(
        ex.image,
        ex.prompts.embeddings,
        aux_boxes_cf=aux_cf,
        forced_selection=frozen.selection if frozen else None,
    )
    num_gt = len(ex.gt_boxes)
    gt_corners = np.array([b.as_array() for b in ex.gt_boxes]).reshape(-1, 4)
    gt_cf = np.array([to_center_form(b) for b in ex.gt_boxes]).reshape(-1, 4)
    num_prompts = len(ex.prompts)
    weights_w = weights

    obj_levels = [(out.enc_logits, out.enc_boxes_cf)] + [
        (lv.obj_logits, lv.obj_boxes_cf) for lv in out.levels
    ]
    assignments: list[Assignment] = []
    breakdown = {k: 0.0 for k in ("obj_cls", "obj_l1", "obj_giou", "aux_cls", "aux_l1", "aux_giou")}
    total_t: Tensor | None = None

    def add(t: Tensor | None, piece: Tensor) -> Tensor:
        return piece if t is None else t + piece

    for li, (logits, boxes_cf) in enumerate(obj_levels):
        if frozen is not None:
            assign = frozen.assignments[li]
        else:
            assign = _match_level(logits, boxes_cf, ex, weights_w)
        assignments.append(assign)
        y = np.zeros((logits.shape[0], num_prompts))
        rows = np.array([q for q, _ in assign.pairs], dtype=np.int64)
        tgts = np.array([t for _, t in assign.pairs], dtype=np.int64)
        if len(rows):
            y[rows, ex.gt_prompt_idx[tgts]] = 1.0
        norm = float(max(num_gt, 1))
        cls_t, cls_v = _classification_term(
            logits, y, norm, FocalParams().alpha, FocalParams().gamma, FocalParams(),
            f"obj_cls.level{li}",
        )
        l1_t, gl_t, l1_v, gl_v = _box_terms(
            boxes_cf, rows, gt_corners[tgts], gt_cf[tgts], norm, f"obj_box.level{li}"
        )
        total_t = add(total_t, weights_w.w_cls * cls_t + weights_w.w_l1 * l1_t + weights_w.w_giou * gl_t)
        breakdown["obj_cls"] += weights_w.w_cls * cls_v
        breakdown["obj_l1"] += weights_w.w_l1 * l1_v
        breakdown["obj_giou"] += weights_w.w_giou * gl_v

    if ex.aux_samples:
        n_aux = len(ex.aux_samples)
        aux_gt = np.array([s.gt_index for s in ex.aux_samples], dtype=np.int64)
        y_aux = np.zeros((n_aux, num_prompts))
        y_aux[np.arange(n_aux), ex.gt_prompt_idx[aux_gt]] = 1.0
        if ex.aux_factors is not None:
            pos_alpha, pos_gamma = ex.aux_factors[:, 0], ex.aux_factors[:, 1]
            neg = dwcl_params.focal_neg
        else:
            pos_alpha, pos_gamma = FocalParams().alpha, FocalParams().gamma
            neg = FocalParams()
        norm = float(n_aux)
        for li, lv in enumerate(out.levels):
            cls_t, cls_v = _classification_term(
                lv.aux_logits, y_aux, norm, pos_alpha, pos_gamma, neg, f"aux_cls.level{li}"
            )
            l1_t, gl_t, l1_v, gl_v = _box_terms(
                lv.aux_boxes_cf,
                np.arange(n_aux),
                gt_corners[aux_gt],
                gt_cf[aux_gt],
                norm,
                f"aux_box.level{li}",
            )
            total_t = add(
                total_t, weights_w.w_cls * cls_t + weights_w.w_l1 * l1_t + weights_w.w_giou * gl_t
            )
            breakdown["aux_cls"] += weights_w.w_cls * cls_v
            breakdown["aux_l1"] += weights_w.w_l1 * l1_v
            breakdown["aux_giou"] += weights_w.w_giou * gl_v

    breakdown["total"] = float(total_t.data)
    return total_t, breakdown, FrozenDecisions(selection=out.selected_tokens, assignments=assignments)


# ---------------------------------------------------------------------------
# batch preparation and the optimization loop


def prepare_batch(
    scenes: list[Scene],
    space: CategorySpace,
    label_space,
    cfg: TrainConfig,
    iteration: int,
) -> list[ImageExample]:
    """Prompts, noisy samples, and batch-wide difficulty factors for one step."""
    rng_noise = _iter_rng(cfg.seed, iteration, STREAM_NOISE)
    rng_prompts = _iter_rng(cfg.seed, iteration, STREAM_PROMPTS)
    label_list = list(label_space)
    raw: list[tuple[Scene, PromptSet, list[NoisySample]]] = []
    for scene in scenes:
        # small label space: an image with many distinct categories may not
        # leave enough negatives, so clamp per image
        available = len(set(label_list) - set(scene.categories))
        prompts = sample_prompts(
            space, scene.categories, min(cfg.num_negative_prompts, available), rng_prompts, label_list
        )
        aux = (
            generate_noisy_samples(
                [(b, label_list.index((s, c))) for b, s, c in scene.annotations],
                cfg.noise,
                rng_noise,
            )
            if cfg.use_o2m
            else []
        )
        raw.append((scene, prompts, aux))

    factors_per_image: list[np.ndarray | None] = [None] * len(raw)
    if cfg.use_o2m and cfg.aux_loss == "dwcl":
        all_ious = np.array([s.initial_iou for _, _, aux in raw for s in aux])
        if all_ious.size:
            try:
                # normalizer spans the whole batch, not one image
                factors = dwcl_factors(all_ious, cfg.dwcl)
                offset = 0
                for i, (_, _, aux) in enumerate(raw):
                    factors_per_image[i] = factors[offset : offset + len(aux)]
                    offset += len(aux)
            except DegenerateBatch:
                pass  # every sample at IoU 1: fall back to plain focal weighting

    examples = []
    for (scene, prompts, aux), fac in zip(raw, factors_per_image):
        gt_prompt_idx = np.array(
            [prompts.index_of(cat) for cat in scene.categories], dtype=np.int64
        )
        examples.append(
            ImageExample(
                image=scene.image,
                prompts=prompts,
                gt_boxes=scene.gt_boxes,
                gt_prompt_idx=gt_prompt_idx,
                aux_samples=aux,
                aux_factors=fac,
            )
        )
    return examples


@dataclass
class TrainState:
    model: Detector
    optimizer: AdamW
    iteration: int
    space: CategorySpace
    dataset: Dataset
    cfg: TrainConfig
    metrics_rows: list[dict] = field(default_factory=list)


def train_step(state: TrainState) -> dict[str, float]:
    """One optimizer step over a freshly sampled scene batch."""
    cfg = state.cfg
    rng_data = _iter_rng(cfg.seed, state.iteration, STREAM_DATA)
    idx = rng_data.integers(0, len(state.dataset.scenes), size=cfg.batch_size)
    scenes = [state.dataset.scenes[i] for i in idx]
    examples = prepare_batch(scenes, state.space, state.dataset.split.train_combos, cfg, state.iteration)

    state.model.store.zero_grad()
    agg = {k: 0.0 for k in ("total", "obj_cls", "obj_l1", "obj_giou", "aux_cls", "aux_l1", "aux_giou")}
    scale = 1.0 / cfg.batch_size
    for ex in examples:
        loss_t, breakdown, _ = compute_image_loss(state.model, ex, cfg.weights, cfg.dwcl)
        (loss_t * scale).backward()
        for k in agg:
            agg[k] += breakdown[k] * scale
    state.optimizer.clip_gradients(cfg.grad_clip_norm)
    lr = lr_at(cfg, state.iteration)
    state.optimizer.step(lr, cfg.weight_decay)
    state.iteration += 1
    agg["lr"] = lr
    return agg


def _metrics_csv_text(rows: list[dict], provenance: str | None) -> str:
    cols = ["iteration", "lr", "total", "obj_cls", "obj_l1", "obj_giou", "aux_cls", "aux_l1", "aux_giou"]
    lines = []
    if provenance:
        lines.append(f"# {provenance}")
    lines.append(",".join(cols))
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def run_stage(cfg: TrainConfig, resume_from: str | None = None, provenance: str | None = None) -> str:
    """Execute one training stage end to end; returns the checkpoint path."""
    cfg.validate()
    dataset = read_dataset(cfg.train_data)
    held = set(dataset.split.heldout_combos)
    for sc in dataset.scenes:
        bad = held & set(sc.categories)
        if bad:
            raise ConfigError(f"training scene {sc.scene_id} contains held-out combos {bad}")

    model_cfg = replace(cfg.model, seed=cfg.seed)
    model = Detector(model_cfg, with_fusion=(cfg.stage == 2))
    if cfg.stage == 2:
        src = load_checkpoint(cfg.init_from)
        if asdict(src.config) != asdict(model_cfg):
            raise CheckpointMismatch("stage-1 checkpoint was built with a different model config")
        load_stage1_into_stage2(model, src)
        space = src.space
        if src.split.to_dict() != dataset.split.to_dict():
            raise ConfigError("stage-2 dataset split differs from the stage-1 checkpoint split")
    else:
        space = CategorySpace.create(
            dataset.split.shapes, dataset.split.colors, cfg.model.d_text, seed=cfg.seed
        )

    optimizer = AdamW(model.store)
    state = TrainState(
        model=model, optimizer=optimizer, iteration=0, space=space, dataset=dataset, cfg=cfg
    )
    if resume_from:
        ck = load_checkpoint(resume_from)
        if ck.train_state is None:
            raise CheckpointMismatch(f"{resume_from} has no training state to resume")
        load_params(model, ck.model_tensors())
        optimizer.load_state_tensors(ck.tensors)
        state.iteration = int(ck.train_state["iteration"])
        state.space = ck.space

    while state.iteration < cfg.iterations:
        row = train_step(state)
        row["iteration"] = state.iteration - 1
        state.metrics_rows.append(row)

    train_state = {"iteration": state.iteration, "train_config": _config_to_dict(cfg)}
    save_checkpoint(
        cfg.out_checkpoint,
        model,
        state.space,
        dataset.split,
        train_state=train_state,
        extra_tensors=optimizer.state_tensors(),
    )
    if cfg.metrics_csv:
        with open(cfg.metrics_csv, "w", encoding="utf-8") as f:
            f.write(_metrics_csv_text(state.metrics_rows, provenance))
    return cfg.out_checkpoint


def _config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    """Rebuild a TrainConfig from plain nested dicts (config files, checkpoints)."""
    d = dict(d)
    for key, typ in (("model", ModelConfig), ("noise", NoiseConfig), ("weights", LossWeights)):
        if key in d and isinstance(d[key], dict):
            d[key] = typ(**d[key])
    if "dwcl" in d and isinstance(d["dwcl"], dict):
        dw = dict(d["dwcl"])
        if "focal_neg" in dw and isinstance(dw["focal_neg"], dict):
            dw["focal_neg"] = FocalParams(**dw["focal_neg"])
        d["dwcl"] = DwclParams(**dw)
    unknown = set(d) - {f.name for f in TrainConfig.__dataclass_fields__.values()}
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return TrainConfig(**d)

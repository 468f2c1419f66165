"""Miniature DETR-style open-vocabulary detector.

Patch-embedding backbone, pre-norm transformer encoder, language-guided
selection of decoder anchors, and a decoder that carries two query
families: learnable object queries and per-image auxiliary queries bound
to noisy positive boxes. Auxiliary queries may read from object queries in
self-attention but never the reverse; the two families are kept as
separate arrays end to end, so object-query outputs are bit-identical
whether or not the auxiliary block exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, gather_rows
from .errors import ConfigError, ShapeError
from .fusion import FusionModule
from .geometry import Box
from .nn import (
    FeedForward,
    LayerNorm,
    Linear,
    Mlp,
    MultiHeadAttention,
    ParamStore,
    box_pos_encoding,
    grid_pos_encoding,
    inverse_sigmoid,
)

# sigmoid(CLS_BIAS_INIT) ~ 0.05: keeps the untrained negative-pair loss small
CLS_BIAS_INIT = -math.log(0.95 / 0.05)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    hidden_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_object_queries: int = 20
    max_aux_queries: int = 64
    d_text: int = 32
    ffn_dim: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError("model.image_size must be a multiple of patch_size")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError("model.hidden_dim must be divisible by num_heads")
        if self.hidden_dim % 4 != 0:
            raise ConfigError("model.hidden_dim must be divisible by 4 (box encodings)")
        if self.num_object_queries < 1:
            raise ConfigError("model.num_object_queries must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid


def attention_mask(n_obj: int, n_aux: int) -> np.ndarray:
    """Allowed-attention matrix over the concatenated [object; aux] block.

    Entry [i, j] says whether query row i may attend to key column j.
    Object rows never read auxiliary columns; auxiliary rows read everything.
    """
    n = n_obj + n_aux
    mask = np.ones((n, n), dtype=bool)
    mask[:n_obj, n_obj:] = False
    return mask


@dataclass(frozen=True)
class Detection:
    box: Box
    scores: np.ndarray  # per-prompt probabilities


@dataclass
class LevelOutput:
    obj_logits: Tensor  # (N_q, P)
    obj_boxes_cf: Tensor  # (N_q, 4), sigmoid-normalized center form
    aux_logits: Tensor | None = None
    aux_boxes_cf: Tensor | None = None


@dataclass
class ForwardOutput:
    enc_logits: Tensor
    enc_boxes_cf: Tensor
    levels: list[LevelOutput] = field(default_factory=list)
    selected_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class EncoderLayer:
    attn: MultiHeadAttention
    ffn: FeedForward
    ln1: LayerNorm
    ln2: LayerNorm

    def __call__(self, x: Tensor) -> Tensor:
        t = self.ln1(x)
        x = x + self.attn(t, t, t)
        return x + self.ffn(self.ln2(x))


@dataclass
class DecoderLayer:
    self_attn: MultiHeadAttention
    cross_attn: MultiHeadAttention
    ffn: FeedForward
    ln1: LayerNorm
    ln2: LayerNorm
    ln3: LayerNorm


class Detector:
    """Model parameters plus the forward passes. Single-writer on params."""

    def __init__(self, config: ModelConfig, with_fusion: bool = False):
        config.validate()
        self.config = config
        self.with_fusion = with_fusion
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD0D]))
        d = config.hidden_dim
        patch_dim = config.patch_size * config.patch_size * config.channels

        self.patch_embed = Linear.create(self.store, "backbone.patch", patch_dim, d, rng)
        self.token_pos = grid_pos_encoding(config.grid, d)

        self.fusion: FusionModule | None = None
        if with_fusion:
            self.fusion = FusionModule.create(self.store, config.d_text, d, config.num_heads, rng)

        self.encoder = [
            EncoderLayer(
                attn=MultiHeadAttention.create(self.store, f"enc.{i}.attn", d, config.num_heads, rng),
                ffn=FeedForward.create(self.store, f"enc.{i}.ffn", d, config.ffn_dim, rng),
                ln1=LayerNorm.create(self.store, f"enc.{i}.ln1", d),
                ln2=LayerNorm.create(self.store, f"enc.{i}.ln2", d),
            )
            for i in range(config.encoder_layers)
        ]
        self.enc_norm = LayerNorm.create(self.store, "enc.norm", d)

        self.text_proj = Linear.create(self.store, "text_proj", config.d_text, d, rng)
        self.cls_bias = self.store.add("cls_bias", np.array([CLS_BIAS_INIT]))
        self.enc_box_head = Mlp.create(self.store, "enc_box_head", [d, d, 4], rng)

        self.obj_content = self.store.add(
            "obj_queries", rng.normal(0.0, 0.02, (config.num_object_queries, d))
        )
        self.aux_content = self.store.add("aux_query", rng.normal(0.0, 0.02, (1, d)))

        self.decoder = [
            DecoderLayer(
                self_attn=MultiHeadAttention.create(self.store, f"dec.{i}.self_attn", d, config.num_heads, rng),
                cross_attn=MultiHeadAttention.create(self.store, f"dec.{i}.cross_attn", d, config.num_heads, rng),
                ffn=FeedForward.create(self.store, f"dec.{i}.ffn", d, config.ffn_dim, rng),
                ln1=LayerNorm.create(self.store, f"dec.{i}.ln1", d),
                ln2=LayerNorm.create(self.store, f"dec.{i}.ln2", d),
                ln3=LayerNorm.create(self.store, f"dec.{i}.ln3", d),
            )
            for i in range(config.decoder_layers)
        ]
        self.dec_norm = LayerNorm.create(self.store, "dec.norm", d)
        self.box_head = Mlp.create(self.store, "box_head", [d, d, 4], rng)

        # grid-cell anchors behind the encoder-level box head
        grid = config.grid
        ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
        centers = np.stack(
            [(xs.ravel() + 0.5) / grid, (ys.ravel() + 0.5) / grid], axis=1
        )
        base = np.full((config.num_tokens, 2), 2.0 / grid)
        self.token_anchors_cf = np.concatenate([centers, base], axis=1)

    # -- pieces --------------------------------------------------------------

    def backbone_forward(self, image: np.ndarray) -> Tensor:
        """Non-overlapping patch embedding plus 2D sinusoidal positions."""
        cfg = self.config
        img = np.asarray(image, dtype=np.float64)
        expect = (cfg.image_size, cfg.image_size, cfg.channels)
        if img.shape != expect:
            raise ShapeError(f"image shape {img.shape}, expected {expect}")
        g, p = cfg.grid, cfg.patch_size
        patches = (
            img.reshape(g, p, g, p, cfg.channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(cfg.num_tokens, p * p * cfg.channels)
        )
        return self.patch_embed(Tensor(patches)) + self.token_pos

    def encoder_forward(self, tokens: Tensor) -> Tensor:
        if tokens.shape != (self.config.num_tokens, self.config.hidden_dim):
            raise ShapeError(f"token shape {tokens.shape} does not match config")
        x = tokens
        for layer in self.encoder:
            x = layer(x)
        return self.enc_norm(x)

    def project_text(self, prompt_embeddings: np.ndarray) -> Tensor:
        text = np.asarray(prompt_embeddings, dtype=np.float64)
        if text.ndim != 2 or text.shape[1] != self.config.d_text:
            raise ShapeError(f"prompt embeddings shape {text.shape}")
        return self.text_proj(Tensor(text))

    def select_queries(
        self, memory: Tensor, projected_text: Tensor, forced: np.ndarray | None = None
    ) -> tuple[np.ndarray, Tensor, Tensor]:
        """Language-guided anchor selection.

        Tokens are ranked by their best dot product against any prompt;
        the top num_object_queries tokens (ties broken by token index)
        provide encoder-level logits and sigmoid center-form boxes.
        Returns (token_indices, enc_logits, enc_boxes_cf).
        """
        cfg = self.config
        if forced is not None:
            idx = np.asarray(forced, dtype=np.int64)
        else:
            scores = (memory.data @ projected_text.data.T).max(axis=1)
            k = min(cfg.num_object_queries, cfg.num_tokens)
            order = np.lexsort((np.arange(len(scores)), -scores))
            idx = np.sort(order[:k])
        toks = gather_rows(memory, idx)
        enc_logits = self._classify(toks, projected_text)
        anchor_logit = inverse_sigmoid(self.token_anchors_cf[idx])
        enc_boxes = (self.enc_box_head(toks) + anchor_logit).sigmoid()
        return idx, enc_logits, enc_boxes

    def _classify(self, queries: Tensor, projected_text: Tensor) -> Tensor:
        scale = 1.0 / math.sqrt(self.config.hidden_dim)
        return (queries @ projected_text.T) * scale + self.cls_bias

    def _self_attention(
        self,
        layer: DecoderLayer,
        x_obj: Tensor,
        pos_obj: np.ndarray,
        x_aux: Tensor | None,
        pos_aux: np.ndarray | None,
    ) -> tuple[Tensor, Tensor | None]:
        """Two-family masked self-attention.

        The object family attends only over itself; the auxiliary family
        attends over both. Keeping the two streams as separate arrays makes
        the blocked aux->obj path exact: no masked value ever enters an
        object-row reduction.
        """
        t_obj = layer.ln1(x_obj)
        q_obj = t_obj + pos_obj
        x_obj = x_obj + layer.self_attn(q_obj, q_obj, t_obj)
        if x_aux is not None:
            t_aux = layer.ln1(x_aux)
            q_aux = t_aux + pos_aux
            keys = concat([q_obj, q_aux], axis=0)
            vals = concat([t_obj, t_aux], axis=0)
            x_aux = x_aux + layer.self_attn(q_aux, keys, vals)
        return x_obj, x_aux

    def _decode_family(
        self, layer: DecoderLayer, x: Tensor, pos: np.ndarray, memory: Tensor
    ) -> Tensor:
        t = layer.ln2(x)
        x = x + layer.cross_attn(t + pos, memory, memory)
        return x + layer.ffn(layer.ln3(x))

    def _head_outputs(
        self, x: Tensor, ref_cf: np.ndarray, projected_text: Tensor
    ) -> tuple[Tensor, Tensor, np.ndarray]:
        h = self.dec_norm(x)
        logits = self._classify(h, projected_text)
        boxes = (self.box_head(h) + inverse_sigmoid(ref_cf)).sigmoid()
        return logits, boxes, boxes.data.copy()

    # -- full passes -----------------------------------------------------------

    def forward(
        self,
        image: np.ndarray,
        prompt_embeddings: np.ndarray,
        aux_boxes_cf: np.ndarray | None = None,
        forced_selection: np.ndarray | None = None,
    ) -> ForwardOutput:
        """Training-style forward pass.

        ``aux_boxes_cf`` holds the noisy reference boxes in center form
        (None or empty disables the auxiliary family, which is also the
        inference configuration). Decoder references are detached between
        layers; gradients reach earlier layers through content features.
        """
        cfg = self.config
        tokens = self.backbone_forward(image)
        if self.fusion is not None:
            tokens = self.fusion(tokens, prompt_embeddings)
        memory = self.encoder_forward(tokens)
        projected_text = self.project_text(prompt_embeddings)

        idx, enc_logits, enc_boxes = self.select_queries(memory, projected_text, forced_selection)
        out = ForwardOutput(enc_logits=enc_logits, enc_boxes_cf=enc_boxes, selected_tokens=idx)

        n_obj = len(idx)
        ref_obj = enc_boxes.data.copy()  # detached proposals
        x_obj = self.obj_content[np.arange(n_obj)]

        have_aux = aux_boxes_cf is not None and len(aux_boxes_cf) > 0
        if have_aux:
            aux_ref = np.asarray(aux_boxes_cf, dtype=np.float64).reshape(-1, 4)
            n_aux = len(aux_ref)
            if n_aux > cfg.max_aux_queries:
                raise ShapeError(f"{n_aux} auxiliary queries exceed cap {cfg.max_aux_queries}")
            x_aux = self.aux_content * np.ones((n_aux, 1))
            ref_aux = aux_ref.copy()
        else:
            x_aux, ref_aux = None, None

        for layer in self.decoder:
            pos_obj = box_pos_encoding(ref_obj, cfg.hidden_dim)
            pos_aux = box_pos_encoding(ref_aux, cfg.hidden_dim) if have_aux else None
            x_obj, x_aux = self._self_attention(layer, x_obj, pos_obj, x_aux, pos_aux)
            x_obj = self._decode_family(layer, x_obj, pos_obj, memory)
            obj_logits, obj_boxes, ref_obj = self._head_outputs(x_obj, ref_obj, projected_text)
            level = LevelOutput(obj_logits=obj_logits, obj_boxes_cf=obj_boxes)
            if have_aux:
                x_aux = self._decode_family(layer, x_aux, pos_aux, memory)
                level.aux_logits, level.aux_boxes_cf, ref_aux = self._head_outputs(
                    x_aux, ref_aux, projected_text
                )
            out.levels.append(level)
        return out

    def inference(
        self, image: np.ndarray, prompt_embeddings: np.ndarray, top_k: int | None = None
    ) -> list[Detection]:
        """Deploy-time pass: no auxiliary queries, detections sorted by best score."""
        out = self.forward(image, prompt_embeddings, aux_boxes_cf=None)
        last = out.levels[-1]
        probs = 1.0 / (1.0 + np.exp(-last.obj_logits.data))
        boxes_cf = last.obj_boxes_cf.data
        order = np.argsort(-probs.max(axis=1), kind="stable")
        if top_k is not None:
            order = order[:top_k]
        dets = []
        for q in order:
            cx, cy, w, h = boxes_cf[q]
            box = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clamped()
            dets.append(Detection(box=box, scores=probs[q].copy()))
        return dets

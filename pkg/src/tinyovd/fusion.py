"""Text-to-image feature fusion, added in the second training stage.

A linear map lifts text embeddings into the visual hidden dimension, one
cross-attention layer lets every image token read from the projected
prompts, and the result is added residually to the image tokens. The
attention output projection starts at zero, so a freshly upgraded model
reproduces its first-stage behavior exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError
from .nn import Linear, MultiHeadAttention, ParamStore

PARAM_PREFIX = "fusion."


@dataclass
class FusionModule:
    feat_map: Linear
    attn: MultiHeadAttention
    d_text: int
    d_model: int

    @staticmethod
    def create(store: ParamStore, d_text: int, d_model: int, num_heads: int, rng) -> "FusionModule":
        return FusionModule(
            feat_map=Linear.create(store, f"{PARAM_PREFIX}feat_map", d_text, d_model, rng),
            attn=MultiHeadAttention.create(
                store, f"{PARAM_PREFIX}attn", d_model, num_heads, rng, zero_out=True
            ),
            d_text=d_text,
            d_model=d_model,
        )

    def __call__(self, image_tokens: Tensor, text_embeddings: np.ndarray) -> Tensor:
        return fuse(image_tokens, text_embeddings, self)


def fuse(image_tokens: Tensor, text_embeddings: np.ndarray, module: FusionModule) -> Tensor:
    """image_tokens + CrossAttn(q=image tokens, kv=projected text).

    Image tokens act as attention queries so the output keeps their shape;
    the text side only provides keys and values.
    """
    if image_tokens.shape[-1] != module.d_model:
        raise ShapeError(
            f"image tokens have dim {image_tokens.shape[-1]}, expected {module.d_model}"
        )
    text = np.asarray(text_embeddings, dtype=np.float64)
    if text.ndim != 2 or text.shape[-1] != module.d_text:
        raise ShapeError(f"text embeddings have shape {text.shape}, expected (P, {module.d_text})")
    projected = module.feat_map(Tensor(text))
    t2i = module.attn(image_tokens, projected, projected)
    return image_tokens + t2i

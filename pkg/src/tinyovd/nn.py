"""Layers and positional encodings built on the autodiff Tensor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, layer_norm, linear, softmax
from .errors import ShapeError


class ParamStore:
    """Ordered, named collection of trainable tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def items(self):
        return self.params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)


def xavier(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @staticmethod
    def create(store: ParamStore, name: str, d_in: int, d_out: int, rng, zero: bool = False) -> "Linear":
        w = np.zeros((d_in, d_out)) if zero else xavier(rng, d_in, d_out)
        return Linear(store.add(f"{name}.w", w), store.add(f"{name}.b", np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


@dataclass
class LayerNorm:
    g: Tensor
    b: Tensor
    eps: float = 1e-5

    @staticmethod
    def create(store: ParamStore, name: str, d: int) -> "LayerNorm":
        return LayerNorm(store.add(f"{name}.g", np.ones(d)), store.add(f"{name}.b", np.zeros(d)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b, self.eps)


@dataclass
class MultiHeadAttention:
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    num_heads: int

    @staticmethod
    def create(store: ParamStore, name: str, d: int, num_heads: int, rng, zero_out: bool = False) -> "MultiHeadAttention":
        if d % num_heads != 0:
            raise ShapeError(f"hidden dim {d} not divisible by {num_heads} heads")
        return MultiHeadAttention(
            wq=Linear.create(store, f"{name}.wq", d, d, rng),
            wk=Linear.create(store, f"{name}.wk", d, d, rng),
            wv=Linear.create(store, f"{name}.wv", d, d, rng),
            wo=Linear.create(store, f"{name}.wo", d, d, rng, zero=zero_out),
            num_heads=num_heads,
        )

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        """Scaled dot-product attention; rows of q_in attend over rows of k_in."""
        q, k, v = self.wq(q_in), self.wk(k_in), self.wv(v_in)
        nq, nk = q.shape[0], k.shape[0]
        d = q.shape[-1]
        h, hd = self.num_heads, d // self.num_heads
        scale = 1.0 / math.sqrt(hd)
        qh = q.reshape(nq, h, hd).permute(1, 0, 2)  # (h, nq, hd)
        kh = k.reshape(nk, h, hd).permute(1, 2, 0)  # (h, hd, nk)
        vh = v.reshape(nk, h, hd).permute(1, 0, 2)  # (h, nk, hd)
        att = softmax((qh @ kh) * scale, axis=-1)
        out = (att @ vh).permute(1, 0, 2).reshape(nq, d)
        return self.wo(out)


@dataclass
class FeedForward:
    fc1: Linear
    fc2: Linear

    @staticmethod
    def create(store: ParamStore, name: str, d: int, d_hidden: int, rng) -> "FeedForward":
        return FeedForward(
            fc1=Linear.create(store, f"{name}.fc1", d, d_hidden, rng),
            fc2=Linear.create(store, f"{name}.fc2", d_hidden, d, rng),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


@dataclass
class Mlp:
    """Small ReLU MLP; used for box heads."""

    layers: list[Linear]

    @staticmethod
    def create(store: ParamStore, name: str, dims: list[int], rng) -> "Mlp":
        layers = [
            Linear.create(store, f"{name}.{i}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)
        ]
        return Mlp(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


def sinusoid_1d(positions: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features of scalar positions; dim must be even."""
    if dim % 2 != 0:
        raise ShapeError("sinusoid dim must be even")
    i = np.arange(dim // 2)
    freqs = temperature ** (2.0 * i / dim)
    ang = positions[:, None] / freqs[None, :]
    out = np.empty((len(positions), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def grid_pos_encoding(grid: int, d: int) -> np.ndarray:
    """2D sinusoidal encoding for a grid x grid token map, flattened row-major."""
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    half = d // 2
    # scale to [0, 2*pi] like DETR's normalized variant
    y_enc = sinusoid_1d(ys.ravel() / grid * 2 * math.pi, half)
    x_enc = sinusoid_1d(xs.ravel() / grid * 2 * math.pi, half)
    return np.concatenate([y_enc, x_enc], axis=1)


def box_pos_encoding(boxes_cf: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encoding of (cx, cy, w, h) boxes; d/4 dims per coordinate."""
    if d % 4 != 0:
        raise ShapeError("box encoding needs d divisible by 4")
    part = d // 4
    boxes_cf = np.atleast_2d(boxes_cf)
    cols = [sinusoid_1d(boxes_cf[:, k] * 2 * math.pi, part) for k in range(4)]
    return np.concatenate(cols, axis=1)


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.clip(x, eps, 1.0 - eps)
    return np.log(x / (1.0 - x))

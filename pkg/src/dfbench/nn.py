"""Layer building blocks on top of the tensor engine.

Concrete models (generator, encoders, CNN detector) are assembled from
these layers elsewhere; each layer exposes ``params()`` as (name, Tensor)
pairs in a stable order so checkpoints and checksums are deterministic.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, conv2d, conv2d_transpose, matmul


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, pad: int, rng: np.random.Generator):
        self.stride = stride
        self.pad = pad
        self.w = Tensor(he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w, self.stride, self.pad)
        return y + self.b.reshape(1, -1, 1, 1)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class ConvTranspose2d:
    """Transposed convolution; kernel layout is (in_ch, out_ch, K, K)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, pad: int, rng: np.random.Generator):
        self.stride = stride
        self.pad = pad
        self.w = Tensor(he_normal(rng, (in_ch, out_ch, k, k), in_ch * k * k), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d_transpose(x, self.w, self.stride, self.pad)
        return y + self.b.reshape(1, -1, 1, 1)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = Tensor(he_normal(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b.reshape(1, -1)

    def params(self):
        return [("w", self.w), ("b", self.b)]


def collect_params(named_layers: list[tuple[str, object]]) -> list[tuple[str, Tensor]]:
    out = []
    for prefix, layer in named_layers:
        for name, t in layer.params():
            out.append((f"{prefix}.{name}", t))
    return out


def params_checksum(named_params: list[tuple[str, Tensor]]) -> str:
    """SHA-256 over parameter names and raw float64 bytes, order-sensitive."""
    h = hashlib.sha256()
    for name, t in named_params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def set_requires_grad(named_params: list[tuple[str, Tensor]], flag: bool) -> None:
    for _, t in named_params:
        t.requires_grad = flag
        t.grad = None

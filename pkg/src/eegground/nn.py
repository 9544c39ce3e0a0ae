"""Small layer library: parameters are plain ``Tensor`` attributes."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + "/")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{name}/{i}/")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing tensor {name!r} in checkpoint")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()

    def requires_grad_(self, flag: bool) -> Module:
        for p in self.parameters():
            p.requires_grad = flag
        return self


def param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        self.weight = param(rng, (d_in, d_out), 1.0 / math.sqrt(d_in) if std is None else std)
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = ones((dim,))
        self.beta = zeros((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self._heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return T.transpose(T.reshape(x, (b, n, self._heads, d // self._heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        ctx = x if context is None else context
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // self._heads))
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        return self.o(merged)


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, dim * mlp_ratio, dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class CrossBlock(Module):
    """Self-attention over queries, then cross-attention into a context sequence."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(dim)
        self.self_attn = Attention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = Attention(rng, dim, heads)
        self.ln3 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, dim * mlp_ratio, dim)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        x = x + self.self_attn(self.ln1(x))
        x = x + self.cross_attn(self.ln2(x), context)
        return x + self.mlp(self.ln3(x))

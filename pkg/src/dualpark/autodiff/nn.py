"""Parameter containers and the handful of layers the parking model uses."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialised leaf tensor."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Base class: parameters are discovered from instance attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter((n_in, n_out), n_in, rng)
        self.bias = parameter((n_out,), n_in, rng) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.weight = parameter((count, dim), 1, rng)

    def __call__(self, index) -> Tensor:
        return T.embedding(self.weight, index)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = parameter((c_out, c_in, kernel, kernel), fan_in, rng)
        self.bias = parameter((c_out,), fan_in, rng)
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(Module):
    """Multi-head attention over (B, T, d) inputs."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query, memory=None, mask=None) -> Tensor:
        memory = query if memory is None else memory
        b, tq, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        ctx = T.attention(q, k, v, mask)
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, tq, d))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


def causal_mask(length: int) -> np.ndarray:
    """Boolean (length, length) mask, True where position i may attend to j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))

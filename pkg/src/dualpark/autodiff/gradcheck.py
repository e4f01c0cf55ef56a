from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the scalar ``fn()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn().data)
        flat[i] = old - h
        down = float(fn().data)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``."""
    for x in inputs:
        x.grad = None
    fn().backward()
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]
    return max(relative_error(a, numeric_grad(fn, x, h)) for a, x in zip(analytic, inputs))


# -- catalogue of differentiable operations ----------------------------------------

def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape):
    mag = rng.uniform(0.1, 1.0, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _case(out_fn, inputs, rng):
    """Scalar objective sum(w * out) with fixed random weights."""
    probe = out_fn()
    w = rng.normal(size=probe.shape)
    return (lambda: (out_fn() * w).sum()), inputs


def gradient_cases() -> dict[str, Callable[[np.random.Generator], tuple]]:
    """Builders ``rng -> (scalar_fn, inputs)``, one per differentiable operation."""
    import scipy.sparse as sp

    from . import tensor as T
    from ..maps import GridSpec, gaussian_map_tensor

    def binary(op, pos_b=False):
        def build(rng):
            a = _leaf(rng, 3, 4)
            b = _leaf(rng, 4, low=0.5, high=1.5) if pos_b else _leaf(rng, 4)
            return _case(lambda: op(a, b), [a, b], rng)
        return build

    def unary(op, low=-1.0, high=1.0):
        def build(rng):
            a = _leaf(rng, 3, 4, low=low, high=high)
            return _case(lambda: op(a), [a], rng)
        return build

    def relu(rng):
        a = _away_from_zero(rng, 3, 4)
        return _case(lambda: T.relu(a), [a], rng)

    def getitem_basic(rng):
        a = _leaf(rng, 4, 5)
        return _case(lambda: a[1:3, ::2], [a], rng)

    def getitem_advanced(rng):
        a = _leaf(rng, 5, 3)
        idx = rng.integers(0, 5, size=7)
        return _case(lambda: a[idx], [a], rng)

    def concat(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 4, 3)
        return _case(lambda: T.concat([a, b], axis=0), [a, b], rng)

    def stack(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
        return _case(lambda: T.stack([a, b], axis=1), [a, b], rng)

    def split(rng):
        a = _leaf(rng, 5, 3)
        return _case(lambda: T.split(a, [2, 3], axis=0)[1] * 2.0 + T.split(a, [2, 3], axis=0)[0].sum(), [a], rng)

    def matmul_batched(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        return _case(lambda: T.matmul(a, b), [a, b], rng)

    def matmul_vector(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
        return _case(lambda: T.matmul(a, b), [a, b], rng)

    def sparse(rng):
        m = sp.random(6, 5, density=0.4, random_state=int(rng.integers(1 << 31)), format="csr")
        a = _leaf(rng, 3, 5)
        return _case(lambda: T.sparse_matmul(m, a), [a], rng)

    def layer_norm(rng):
        a, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
        return _case(lambda: T.layer_norm(a, g, b), [a, g, b], rng)

    def cross_entropy(rng):
        logits = _leaf(rng, 2, 4, 6, low=-2, high=2)
        target = rng.integers(0, 6, size=(2, 4))
        target[0, 1] = 5
        return (lambda: T.cross_entropy(logits, target, ignore_index=5)), [logits]

    def embedding(rng):
        w = _leaf(rng, 5, 3)
        idx = rng.integers(0, 5, size=(2, 4))
        return _case(lambda: T.embedding(w, idx), [w], rng)

    def attention(rng):
        q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4)
        mask = rng.random((3, 5)) < 0.6
        mask[:, 0] = True
        return _case(lambda: T.attention(q, k, v, mask), [q, k, v], rng)

    def conv(rng):
        x, w, b = _leaf(rng, 1, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        return _case(lambda: T.conv2d(x, w, b, stride=2, padding=1), [x, w, b], rng)

    def gaussian_map(rng):
        grid = GridSpec.square(8, 4.0)
        c = Tensor(rng.uniform(0, 7, size=(2, 2)), requires_grad=True)
        return _case(lambda: gaussian_map_tensor(c, 1.5, grid)[0], [c], rng)

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, pos_b=True),
        "neg": unary(T.neg),
        "power": unary(lambda a: T.power(a, 2.5), 0.5, 1.5),
        "exp": unary(T.exp),
        "log": unary(T.log, 0.5, 2.0),
        "sqrt": unary(T.sqrt, 0.5, 2.0),
        "tanh": unary(T.tanh),
        "sigmoid": unary(T.sigmoid, -4, 4),
        "relu": relu,
        "sum": unary(lambda a: T.tsum(a, axis=1)),
        "mean": unary(lambda a: T.mean(a, axis=0, keepdims=True)),
        "reshape": unary(lambda a: T.reshape(a, (6, 2))),
        "transpose": unary(lambda a: T.transpose(a, (1, 0))),
        "swapaxes": unary(lambda a: T.swapaxes(a, 0, 1)),
        "getitem": getitem_basic,
        "getitem_advanced": getitem_advanced,
        "concat": concat,
        "stack": stack,
        "split": split,
        "matmul": matmul_batched,
        "matmul_vector": matmul_vector,
        "sparse_matmul": sparse,
        "softmax": unary(lambda a: T.softmax(a, axis=-1), -2, 2),
        "log_softmax": unary(lambda a: T.log_softmax(a, axis=0), -2, 2),
        "layer_norm": layer_norm,
        "cross_entropy": cross_entropy,
        "embedding": embedding,
        "attention": attention,
        "conv2d": conv,
        "gaussian_map": gaussian_map,
    }

"""Metric trajectory coordinates <-> discrete token sequences.

Vocabulary layout for ``n_tokens`` coordinate bins::

    0 .. n_tokens-1   coordinate bins
    n_tokens          BOS
    n_tokens + 1      EOS
    n_tokens + 2      PAD (batching only, ignored by the loss)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TokenizerConfig:
    range_x: float = 10.0
    range_y: float = 10.0
    n_tokens: int = 1200
    horizon: int = 30

    def __post_init__(self):
        if self.range_x <= 0 or self.range_y <= 0:
            raise ValueError("half-ranges must be positive")
        if self.n_tokens < 2:
            raise ValueError("need at least two coordinate tokens")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    @property
    def bos(self) -> int:
        return self.n_tokens

    @property
    def eos(self) -> int:
        return self.n_tokens + 1

    @property
    def pad(self) -> int:
        return self.n_tokens + 2

    @property
    def vocab_size(self) -> int:
        return self.n_tokens + 3

    def bin_width(self, axis: str) -> float:
        half = self.range_x if axis == "x" else self.range_y
        return 2.0 * half / self.n_tokens


@dataclass(frozen=True)
class TokenSequence:
    axis: str
    tokens: tuple[int, ...]


def serialize(p, half_range: float, n_tokens: int):
    """Bin index floor((p + R) / 2R * N), clamped to [0, N-1]. Works on scalars and arrays."""
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot serialize non-finite coordinate")
    tok = np.floor((arr + half_range) / (2.0 * half_range) * n_tokens)
    tok = np.clip(tok, 0, n_tokens - 1).astype(np.int64)
    return int(tok) if tok.ndim == 0 else tok


def deserialize(t, half_range: float, n_tokens: int):
    """Bin-centre coordinate of token ``t``; BOS/EOS/PAD are rejected."""
    arr = np.asarray(t)
    if np.any(arr < 0) or np.any(arr >= n_tokens):
        raise ValueError(f"token outside coordinate range [0, {n_tokens - 1}]: {t}")
    val = (arr + 0.5) * (2.0 * half_range / n_tokens) - half_range
    return float(val) if np.ndim(val) == 0 else val


def build_sequences(traj_x, traj_y, cfg: TokenizerConfig) -> tuple[TokenSequence, TokenSequence]:
    xs, ys = list(traj_x), list(traj_y)
    if len(xs) != len(ys):
        raise ValueError(f"x has {len(xs)} points but y has {len(ys)}")
    if not xs:
        raise ValueError("empty trajectory")
    tx = serialize(np.asarray(xs), cfg.range_x, cfg.n_tokens)
    ty = serialize(np.asarray(ys), cfg.range_y, cfg.n_tokens)
    seq_x = (cfg.bos, *map(int, tx), cfg.eos)
    seq_y = (cfg.bos, *map(int, ty), cfg.eos)
    return TokenSequence("x", seq_x), TokenSequence("y", seq_y)


def interleave_tokens(seq_x: TokenSequence, seq_y: TokenSequence, cfg: TokenizerConfig) -> tuple[int, ...]:
    """[BOS, x1, y1, x2, y2, ..., EOS] stream for the single-decoder baseline."""
    xs = [t for t in seq_x.tokens if t < cfg.n_tokens]
    ys = [t for t in seq_y.tokens if t < cfg.n_tokens]
    body = [tok for pair in zip(xs, ys) for tok in pair]
    return (cfg.bos, *body, cfg.eos)


def decode_tokens(tx, ty, cfg: TokenizerConfig) -> np.ndarray:
    """Pairs of coordinate tokens -> (N, 2) metric points."""
    tx = np.asarray(tx, dtype=np.int64)
    ty = np.asarray(ty, dtype=np.int64)
    return np.stack([deserialize(tx, cfg.range_x, cfg.n_tokens),
                     deserialize(ty, cfg.range_y, cfg.n_tokens)], axis=-1).reshape(-1, 2)


def roundtrip_bound(half_range: float, n_tokens: int) -> float:
    return 2.0 * half_range / n_tokens


__all__ = [
    "TokenSequence",
    "TokenizerConfig",
    "build_sequences",
    "decode_tokens",
    "deserialize",
    "interleave_tokens",
    "roundtrip_bound",
    "serialize",
]

"""Parking trajectory model: encoder plus either the dual decoder or the
single interleaved decoder used as a baseline.

Dual decoder data flow for a teacher-forced batch of ``T`` steps::

    tokens_x, tokens_y --embed--> (B, T, d) x2
        --dual-stream attention (optional)--> (B, T, d) x2
        --per-axis causal decoder stacks over encoder memory--> hx, hy
        --refinement head (optional) or linear heads--> x_logits, y_logits (B, T, V)

The refinement head predicts a fractional map centre from ``[hx, hy]``,
builds the normalised Gaussian map over the BEV grid, weights the raw BEV
features with it and lets ``hx`` and ``hy`` cross-attend to the weighted BEV
before the vocabulary projections.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Tensor, causal_mask, ops
from .camera import CameraRig
from .encoder import Encoder, EncoderConfig, EncoderOutput, query_map
from .maps import GridSpec, gaussian_map_tensor
from .tokenizer import TokenizerConfig, decode_tokens

MEMORY_KINDS = ("fused", "bev")


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ffn_hidden: int = 128
    dual_stream: bool = True
    refinement: bool = True
    dual_decoder: bool = True
    refine_sigma: float = 2.0  # cells
    memory: str = "fused"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.memory not in MEMORY_KINDS:
            raise ValueError(f"unknown decoder memory {self.memory!r}; expected one of {MEMORY_KINDS}")
        if self.layers < 1 or not self.refine_sigma > 0:
            raise ValueError("need at least one layer and a positive refinement sigma")


@dataclass(frozen=True)
class ModelConfig:
    grid_cells: int = 100
    half_range: float = 10.0
    n_tokens: int = 1200
    horizon: int = 30
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.square(self.grid_cells, self.half_range)

    @property
    def tokenizer(self) -> TokenizerConfig:
        return TokenizerConfig(self.half_range, self.half_range, self.n_tokens, self.horizon)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["decoder"] = DecoderConfig(**d.get("decoder", {}))
        return cls(**d)


# query kind, dual-stream, refinement, dual decoder
VARIANTS = {
    "complete": ("gaussian", True, True, True),
    "Decoder-Gaussian-Refinement": ("gaussian", False, True, True),
    "Decoder-Gaussian-Dual": ("gaussian", True, False, True),
    "Decoder-Gaussian": ("gaussian", False, False, True),
    "Decoder-Binary": ("binary", False, False, True),
    "interleaved": ("binary", False, False, False),
}


def variant_config(cfg: ModelConfig, name: str) -> ModelConfig:
    try:
        query, dual, refine, split = VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None
    return replace(cfg, encoder=replace(cfg.encoder, query=query),
                   decoder=replace(cfg.decoder, dual_stream=dual, refinement=refine, dual_decoder=split))


def block_causal_mask(steps: int) -> np.ndarray:
    """(2T, 2T) mask over interleaved [x0, y0, x1, y1, ...]: pair i sees pairs <= i."""
    pair = np.arange(2 * steps) // 2
    return pair[None, :] <= pair[:, None]


# -- layers ------------------------------------------------------------------------

class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, h, memory, mask) -> Tensor:
        h = self.norm1(h + self.self_attn(h, mask=mask))
        h = self.norm2(h + self.cross_attn(h, memory))
        return self.norm3(h + self.ffn(h))


@dataclass
class StreamState:
    x: Tensor  # (B, T, d)
    y: Tensor

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"x/y stream shapes differ: {self.x.shape} vs {self.y.shape}")

    @property
    def steps(self) -> int:
        return self.x.shape[1]


@dataclass
class StepOutput:
    x_logits: Tensor  # (B, T, V)
    y_logits: Tensor
    center: Tensor | None = None  # (B, T, 2) fractional (row, col)
    predicted_map: Tensor | None = None  # (B, T, H, W), each map sums to 1
    log_map: Tensor | None = None


class RefinementHead(Module):
    """Soft-localisation refinement over the raw BEV grid (single-head attention)."""

    def __init__(self, dim: int, bev_channels: int, vocab: int, hidden: int, grid: GridSpec,
                 sigma: float, rng: np.random.Generator):
        self.grid = grid
        self.sigma = sigma
        self.center1 = Linear(2 * dim, dim, rng)
        self.center2 = Linear(dim, 2, rng)
        self.q = Linear(dim, dim, rng)
        # bias-free so that a zero-weighted cell contributes a zero key and value
        self.k = Linear(bev_channels, dim, rng, bias=False)
        self.v = Linear(bev_channels, dim, rng, bias=False)
        self.v_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.out = Linear(dim, dim, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, rng)
        self.norm2 = LayerNorm(dim)
        self.head_x = Linear(dim, vocab, rng)
        self.head_y = Linear(dim, vocab, rng)

    def locate(self, hx, hy) -> Tensor:
        h = ops.concat([hx, hy], axis=-1)
        unit = ops.sigmoid(self.center2(ops.relu(self.center1(h))))
        return unit * np.array([self.grid.height - 1.0, self.grid.width - 1.0])

    def weights(self, center: Tensor) -> Tensor:
        """Unnormalised Gaussian (peak 1 at an on-grid centre), separable, (..., H*W)."""
        scale = -1.0 / (2 * self.sigma**2)
        rows = np.arange(self.grid.height, dtype=np.float64)
        cols = np.arange(self.grid.width, dtype=np.float64)
        er = ops.exp(((rows - center[..., 0:1]) ** 2) * scale)
        ec = ops.exp(((cols - center[..., 1:2]) ** 2) * scale)
        lead = center.shape[:-1]
        w = er.reshape(*lead, self.grid.height, 1) * ec.reshape(*lead, 1, self.grid.width)
        return w.reshape(*lead, self.grid.height * self.grid.width)

    def __call__(self, hx, hy, bev) -> StepOutput:
        b, t, d = hx.shape
        center = self.locate(hx, hy)
        pmap, log_map = gaussian_map_tensor(center, self.sigma, self.grid)
        w = self.weights(center).reshape(b, t, 1, -1)  # (B, T, 1, HW)
        c = bev.shape[1]
        cells = bev.reshape(b, c, -1).transpose(0, 2, 1)  # (B, HW, C)
        keys, values = self.k(cells), self.v(cells)
        hs = ops.stack([hx, hy], axis=2)  # (B, T, 2, d)
        q = self.q(hs).reshape(b, 2 * t, d)
        # attention over w * BEV: scale raw scores and values by w instead of materialising w * BEV
        raw = ops.matmul(q, keys.transpose(0, 2, 1)).reshape(b, t, 2, -1)
        attn = ops.softmax(raw * w * (1.0 / math.sqrt(d)), axis=-1)
        ctx = ops.matmul((attn * w).reshape(b, 2 * t, -1), values).reshape(b, t, 2, d) + self.v_bias
        hs = self.norm1(hs + self.out(ctx))
        hs = self.norm2(hs + self.ffn(hs))
        return StepOutput(self.head_x(hs[:, :, 0]), self.head_y(hs[:, :, 1]), center, pmap, log_map)


class DualDecoder(Module):
    def __init__(self, cfg: DecoderConfig, tok: TokenizerConfig, grid: GridSpec, bev_channels: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.tok = tok
        d, v, steps = cfg.d_model, tok.vocab_size, tok.horizon + 1
        self.embed_x = Embedding(v, d, rng)
        self.embed_y = Embedding(v, d, rng)
        self.pos_x = Embedding(steps, d, rng)
        self.pos_y = Embedding(steps, d, rng)
        if cfg.dual_stream:
            self.stream_attn = MultiHeadAttention(d, cfg.heads, rng)
            self.stream_norm = LayerNorm(d)
        self.layers_x = [DecoderLayer(d, cfg.heads, cfg.ffn_hidden, rng) for _ in range(cfg.layers)]
        self.layers_y = [DecoderLayer(d, cfg.heads, cfg.ffn_hidden, rng) for _ in range(cfg.layers)]
        if cfg.refinement:
            self.refine = RefinementHead(d, bev_channels, v, cfg.ffn_hidden, grid, cfg.refine_sigma, rng)
        else:
            self.head_x = Linear(d, v, rng)
            self.head_y = Linear(d, v, rng)

    def embed(self, tokens_x, tokens_y) -> StreamState:
        tx, ty = np.asarray(tokens_x), np.asarray(tokens_y)
        if tx.shape != ty.shape or tx.ndim != 2:
            raise ValueError(f"token batches must be equal (B, T) arrays, got {tx.shape} and {ty.shape}")
        t = tx.shape[1]
        if t > self.tok.horizon + 1:
            raise ValueError(f"{t} steps exceed the position table of {self.tok.horizon + 1}")
        pos = np.arange(t)
        return StreamState(self.embed_x(tx) + self.pos_x(pos), self.embed_y(ty) + self.pos_y(pos))

    def dual_stream_attention(self, state: StreamState) -> StreamState:
        if not self.cfg.dual_stream:
            return state
        b, t, d = state.x.shape
        z = ops.stack([state.x, state.y], axis=2).reshape(b, 2 * t, d)
        z = self.stream_norm(z + self.stream_attn(z, mask=block_causal_mask(t)))
        z = z.reshape(b, t, 2, d)
        return StreamState(z[:, :, 0], z[:, :, 1])

    def __call__(self, tokens_x, tokens_y, memory, bev) -> StepOutput:
        state = self.dual_stream_attention(self.embed(tokens_x, tokens_y))
        mask = causal_mask(state.steps)
        hx, hy = state.x, state.y
        for layer in self.layers_x:
            hx = layer(hx, memory, mask)
        for layer in self.layers_y:
            hy = layer(hy, memory, mask)
        if self.cfg.refinement:
            return self.refine(hx, hy, bev)
        return StepOutput(self.head_x(hx), self.head_y(hy))


class InterleavedDecoder(Module):
    """One causal decoder over [BOS, x1, y1, ..., xQ, yQ, EOS]."""

    def __init__(self, cfg: DecoderConfig, tok: TokenizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tok = tok
        d = cfg.d_model
        self.embed = Embedding(tok.vocab_size, d, rng)
        self.pos = Embedding(2 * tok.horizon + 1, d, rng)
        self.layers = [DecoderLayer(d, cfg.heads, cfg.ffn_hidden, rng) for _ in range(cfg.layers)]
        self.head = Linear(d, tok.vocab_size, rng)

    def __call__(self, tokens, memory) -> Tensor:
        tokens = np.asarray(tokens)
        t = tokens.shape[1]
        if t > 2 * self.tok.horizon + 1:
            raise ValueError(f"{t} tokens exceed the position table of {2 * self.tok.horizon + 1}")
        h = self.embed(tokens) + self.pos(np.arange(t))
        mask = causal_mask(t)
        for layer in self.layers:
            h = layer(h, memory, mask)
        return self.head(h)


# -- full model --------------------------------------------------------------------

@dataclass
class Generation:
    points: np.ndarray  # (n, 2) metres, current ego frame
    tokens_x: list[int]
    tokens_y: list[int]
    centers: np.ndarray | None = None  # (n, 2) fractional pixels
    maps: np.ndarray | None = None  # (n, H, W)
    trace: list[dict] = field(default_factory=list)


class ParkingModel(Module):
    def __init__(self, cfg: ModelConfig, rig: CameraRig | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dec = cfg.decoder
        self.encoder = Encoder(cfg.encoder, cfg.grid, dec.d_model, dec.heads, dec.ffn_hidden, rng, rig)
        if dec.dual_decoder:
            self.decoder = DualDecoder(dec, cfg.tokenizer, cfg.grid, cfg.encoder.bev_channels, rng)
        else:
            self.decoder = InterleavedDecoder(dec, cfg.tokenizer, rng)

    @property
    def dual(self) -> bool:
        return self.cfg.decoder.dual_decoder

    def query_maps(self, slots) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.float64).reshape(-1, 2)
        return np.stack([query_map(s, self.cfg.grid, self.cfg.encoder) for s in slots])

    def encode(self, sensor, slots) -> EncoderOutput:
        return self.encoder(sensor, self.query_maps(slots))

    def memory(self, enc: EncoderOutput) -> Tensor:
        return enc.fused if self.cfg.decoder.memory == "fused" else enc.bev_tokens

    def forward(self, enc: EncoderOutput, tokens_x, tokens_y=None):
        """Teacher-forced logits. Dual: StepOutput. Interleaved: ``tokens_x`` is the joint stream."""
        if self.dual:
            return self.decoder(tokens_x, tokens_y, self.memory(enc), enc.bev)
        return self.decoder(tokens_x, self.memory(enc))

    def generate(self, sensor, slots, keep_maps: bool = False) -> list[Generation]:
        """Greedy decoding for a batch; BOS and PAD are never emitted."""
        enc = self.encode(sensor, slots)
        if self.dual:
            return self._generate_dual(enc, keep_maps)
        return self._generate_interleaved(enc)

    def _pick(self, logits: np.ndarray) -> np.ndarray:
        tok = self.cfg.tokenizer
        z = logits.copy()
        z[:, [tok.bos, tok.pad]] = -np.inf
        return z.argmax(axis=-1)

    def _generate_dual(self, enc: EncoderOutput, keep_maps: bool) -> list[Generation]:
        tok = self.cfg.tokenizer
        b = enc.fused.shape[0]
        tx = np.full((b, 1), tok.bos, dtype=np.int64)
        ty = tx.copy()
        length = np.full(b, tok.horizon)
        done = np.zeros(b, dtype=bool)
        traces: list[list[dict]] = [[] for _ in range(b)]
        centers, maps = [], []
        for step in range(tok.horizon):
            out = self.forward(enc, tx, ty)
            nx = self._pick(out.x_logits.data[:, -1])
            ny = self._pick(out.y_logits.data[:, -1])
            if out.center is not None:
                c = out.center.data[:, -1]
                m = out.predicted_map.data[:, -1]
                centers.append(c)
                if keep_maps:
                    maps.append(m)
            for i in range(b):
                if done[i]:
                    continue
                rec = {"step": step, "x_token": int(nx[i]), "y_token": int(ny[i])}
                if out.center is not None:
                    flat = int(np.argmax(m[i]))
                    rec["center"] = [float(c[i, 0]), float(c[i, 1])]
                    rec["map_argmax"] = [flat // m.shape[-1], flat % m.shape[-1]]
                traces[i].append(rec)
                if nx[i] == tok.eos or ny[i] == tok.eos:
                    done[i], length[i] = True, step
            tx = np.concatenate([tx, nx[:, None]], axis=1)
            ty = np.concatenate([ty, ny[:, None]], axis=1)
            if done.all():
                break
        results = []
        for i in range(b):
            n = int(length[i])
            xs, ys = tx[i, 1 : n + 1].tolist(), ty[i, 1 : n + 1].tolist()
            pts = decode_tokens(xs, ys, tok) if n else np.zeros((0, 2))
            cen = np.array([c[i] for c in centers[:n]]) if centers else None
            mp = np.array([m[i] for m in maps[:n]]) if maps else None
            results.append(Generation(pts, xs, ys, cen, mp, traces[i]))
        return results

    def _generate_interleaved(self, enc: EncoderOutput) -> list[Generation]:
        tok = self.cfg.tokenizer
        b = enc.fused.shape[0]
        seq = np.full((b, 1), tok.bos, dtype=np.int64)
        stop = np.full(b, 2 * tok.horizon)
        done = np.zeros(b, dtype=bool)
        traces: list[list[dict]] = [[] for _ in range(b)]
        memory = self.memory(enc)
        for step in range(2 * tok.horizon):
            nxt = self._pick(self.decoder(seq, memory).data[:, -1])
            for i in range(b):
                if done[i]:
                    continue
                traces[i].append({"step": step, "axis": "xy"[step % 2], "token": int(nxt[i])})
                if nxt[i] == tok.eos:
                    done[i], stop[i] = True, step
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            if done.all():
                break
        results = []
        for i in range(b):
            n = int(stop[i]) // 2  # a dangling x without its y is dropped
            body = seq[i, 1 : 2 * n + 1]
            xs, ys = body[0::2].tolist(), body[1::2].tolist()
            pts = decode_tokens(xs, ys, tok) if n else np.zeros((0, 2))
            results.append(Generation(pts, xs, ys, trace=traces[i]))
        return results

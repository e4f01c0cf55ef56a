import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualpark.autodiff import Tensor, ops
from dualpark.encoder import EncoderConfig
from dualpark.model import (
    VARIANTS,
    DecoderConfig,
    ModelConfig,
    ParkingModel,
    StepOutput,
    block_causal_mask,
    variant_config,
)

BASE = ModelConfig(grid_cells=16, half_range=8.0, n_tokens=64, horizon=5,
                   encoder=EncoderConfig(bev_channels=4, downsample=2),
                   decoder=DecoderConfig(d_model=16, heads=2, layers=1, ffn_hidden=32))


def tiny(variant="complete", seed=0) -> ParkingModel:
    return ParkingModel(replace(variant_config(BASE, variant), seed=seed))


def encoded(model, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    sensor = rng.uniform(size=(batch, 2, 16, 16))
    slots = rng.uniform(-4, 4, size=(batch, 2))
    return model.encode(sensor, slots)


def random_tokens(rng, batch, steps, tok):
    tx = rng.integers(0, tok.n_tokens, size=(batch, steps))
    ty = rng.integers(0, tok.n_tokens, size=(batch, steps))
    tx[:, 0] = ty[:, 0] = tok.bos
    return tx, ty


@given(st.integers(1, 12))
def test_block_causal_mask(t):
    m = block_causal_mask(t)
    i, j = np.indices(m.shape)
    np.testing.assert_array_equal(m, j // 2 <= i // 2)


def test_embed_is_token_plus_position():
    model = tiny()
    dec = model.decoder
    tx, ty = np.array([[64, 3, 7]]), np.array([[64, 5, 9]])
    s = dec.embed(tx, ty)
    np.testing.assert_array_equal(s.x.data[0, 2], dec.embed_x.weight.data[7] + dec.pos_x.weight.data[2])
    np.testing.assert_array_equal(s.y.data[0, 1], dec.embed_y.weight.data[5] + dec.pos_y.weight.data[1])
    with pytest.raises(ValueError):
        dec.embed(tx, ty[:, :2])
    with pytest.raises(ValueError):
        dec.embed(np.zeros((1, 7), int), np.zeros((1, 7), int))


def test_single_step_pair_sees_itself():
    dec = tiny().decoder
    a = dec.dual_stream_attention(dec.embed([[3]], [[5]]))
    b = dec.dual_stream_attention(dec.embed([[3]], [[6]]))
    assert a.steps == 1
    assert np.abs(a.x.data - b.x.data).max() > 1e-6


@pytest.mark.parametrize("axis", ["x", "y"])
def test_perturbation_is_causal_and_crosses_streams(axis):
    model = tiny("Decoder-Gaussian-Dual")
    enc = encoded(model)
    tok = model.cfg.tokenizer
    rng = np.random.default_rng(1)
    tx, ty = random_tokens(rng, 2, 6, tok)
    base = model.forward(enc, tx, ty)
    for k in range(1, 6):
        px, py = tx.copy(), ty.copy()
        target = px if axis == "x" else py
        target[:, k] = (target[:, k] + 17) % tok.n_tokens
        out = model.forward(enc, px, py)
        for logits, ref in ((out.x_logits, base.x_logits), (out.y_logits, base.y_logits)):
            np.testing.assert_array_equal(logits.data[:, :k], ref.data[:, :k])
            assert np.abs(logits.data[:, k:] - ref.data[:, k:]).max() > 1e-9


def test_dual_stream_off_isolates_axes():
    model = tiny("Decoder-Gaussian")
    enc = encoded(model)
    tok = model.cfg.tokenizer
    tx, ty = random_tokens(np.random.default_rng(2), 2, 6, tok)
    base = model.forward(enc, tx, ty)
    ty2 = ty.copy()
    ty2[:, 1:] = (ty2[:, 1:] + 5) % tok.n_tokens
    out = model.forward(enc, tx, ty2)
    np.testing.assert_array_equal(out.x_logits.data, base.x_logits.data)
    assert np.abs(out.y_logits.data - base.y_logits.data).max() > 0


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_teacher_forcing_matches_incremental(variant):
    model = tiny(variant)
    enc = encoded(model)
    tok = model.cfg.tokenizer
    rng = np.random.default_rng(3)
    if model.dual:
        tx, ty = random_tokens(rng, 2, 6, tok)
        full = model.forward(enc, tx, ty)
        for t in range(1, 7):
            part = model.forward(enc, tx[:, :t], ty[:, :t])
            np.testing.assert_allclose(part.x_logits.data[:, -1], full.x_logits.data[:, t - 1], atol=1e-9)
            np.testing.assert_allclose(part.y_logits.data[:, -1], full.y_logits.data[:, t - 1], atol=1e-9)
    else:
        seq = rng.integers(0, tok.n_tokens, size=(2, 11))
        seq[:, 0] = tok.bos
        full = model.forward(enc, seq).data
        for t in range(1, 12):
            np.testing.assert_allclose(model.forward(enc, seq[:, :t]).data[:, -1], full[:, t - 1], atol=1e-9)


def test_interleaved_position_table():
    model = tiny("interleaved")
    enc = encoded(model)
    tok = model.cfg.tokenizer
    assert model.forward(enc, np.full((2, 2 * tok.horizon + 1), tok.bos)).shape == (2, 11, tok.vocab_size)
    with pytest.raises(ValueError):
        model.forward(enc, np.full((2, 2 * tok.horizon + 2), tok.bos))


def test_predicted_maps_are_normalised():
    model = tiny()
    enc = encoded(model)
    tx, ty = random_tokens(np.random.default_rng(4), 2, 6, model.cfg.tokenizer)
    out = model.forward(enc, tx, ty)
    assert out.predicted_map.shape == (2, 6, 16, 16)
    np.testing.assert_allclose(out.predicted_map.data.sum(axis=(-1, -2)), 1.0, atol=1e-6)
    c = out.center.data
    assert (c >= 0).all() and (c <= 15).all()


def test_refinement_weights_peak_and_wide_limit():
    head = tiny().decoder.refine
    w = head.weights(Tensor(np.array([[3.0, 7.0]]))).data.reshape(16, 16)
    assert w[3, 7] == 1.0 and w.max() == 1.0
    head.sigma = 1e8
    w = head.weights(Tensor(np.array([[3.3, 7.9]]))).data
    np.testing.assert_allclose(w, 1.0, atol=1e-12)


def test_wide_refinement_equals_plain_attention_over_bev():
    model = tiny()
    head = model.decoder.refine
    head.sigma = 1e8
    rng = np.random.default_rng(5)
    hx, hy = (Tensor(rng.normal(size=(1, 2, 16))) for _ in range(2))
    bev = Tensor(rng.normal(size=(1, 4, 16, 16)))
    out = head(hx, hy, bev)
    # reference: standard single-head attention of each stream over the unweighted BEV cells
    cells = bev.data.reshape(4, -1).T
    keys, values = cells @ head.k.weight.data, cells @ head.v.weight.data
    for t in range(2):
        for s, (h, proj) in enumerate(((hx, head.head_x), (hy, head.head_y))):
            q = h.data[0, t] @ head.q.weight.data + head.q.bias.data
            a = np.exp(keys @ q / 4.0 - (keys @ q / 4.0).max())
            ctx = (a / a.sum()) @ values + head.v_bias.data
            z = head.norm1(Tensor(h.data[0, t] + head.out(Tensor(ctx)).data))
            z = head.norm2(z + head.ffn(z))
            ref = proj(z).data
            got = (out.x_logits if s == 0 else out.y_logits).data[0, t]
            np.testing.assert_allclose(got, ref, atol=1e-9)


def test_center_mlp_receives_gradient():
    model = tiny()
    enc = encoded(model)
    tx, ty = random_tokens(np.random.default_rng(6), 2, 6, model.cfg.tokenizer)
    out = model.forward(enc, tx, ty)
    target = np.zeros((2, 6, 16, 16))
    target[..., 2, 3] = 1.0
    (-(out.log_map * target).sum()).backward()
    assert np.abs(model.decoder.refine.center1.weight.grad).max() > 0


class Scripted:
    """Replaces ``forward`` with fixed logits: coordinate token 10 until ``stop_at``."""

    def __init__(self, model, stop_at, axis):
        self.model, self.stop_at, self.axis = model, stop_at, axis

    def __call__(self, enc, tx, ty=None):
        tok = self.model.cfg.tokenizer
        b, t = np.asarray(tx).shape
        lx = np.zeros((b, t, tok.vocab_size))
        lx[..., 10] = 1.0
        ly = lx.copy()
        if self.stop_at is not None and t - 1 >= self.stop_at:
            (lx if self.axis == "x" else ly)[:, -1, tok.eos] = 5.0
        return StepOutput(Tensor(lx), Tensor(ly))


@pytest.mark.parametrize("axis", ["x", "y"])
def test_eos_on_either_stream_stops_both(axis):
    model = tiny("Decoder-Gaussian")
    model.forward = Scripted(model, 3, axis)
    gen = model.generate(np.zeros((1, 2, 16, 16)), [[0.0, 0.0]])[0]
    assert len(gen.points) == 3 and len(gen.trace) == 4
    assert gen.tokens_x == gen.tokens_y == [10, 10, 10]


def test_step_cap_without_eos():
    model = tiny("Decoder-Gaussian")
    model.forward = Scripted(model, None, "x")
    gen = model.generate(np.zeros((2, 2, 16, 16)), [[0.0, 0.0], [1.0, 1.0]])
    assert all(len(g.points) == model.cfg.horizon for g in gen)


def test_bos_and_pad_never_emitted():
    model = tiny("Decoder-Gaussian")
    tok = model.cfg.tokenizer
    model.decoder.head_x.bias.data[tok.bos] = 1e6
    model.decoder.head_y.bias.data[tok.pad] = 1e6
    gen = model.generate(np.zeros((1, 2, 16, 16)), [[0.0, 0.0]])[0]
    assert tok.bos not in gen.tokens_x and tok.pad not in gen.tokens_y


def test_generation_trace_and_maps():
    model = tiny()
    tok = model.cfg.tokenizer
    model.decoder.refine.head_x.bias.data[tok.eos] = -1e6
    model.decoder.refine.head_y.bias.data[tok.eos] = -1e6
    gen = model.generate(np.zeros((1, 2, 16, 16)), [[0.0, 2.0]], keep_maps=True)[0]
    assert len(gen.trace) == tok.horizon
    assert gen.maps.shape == (tok.horizon, 16, 16)
    rec = gen.trace[0]
    assert set(rec) == {"step", "x_token", "y_token", "center", "map_argmax"}
    flat = int(np.argmax(gen.maps[0]))
    assert rec["map_argmax"] == [flat // 16, flat % 16]


def test_interleaved_generation_lengths():
    model = tiny("interleaved")
    tok = model.cfg.tokenizer
    model.decoder.head.bias.data[tok.eos] = -1e6
    gen = model.generate(np.zeros((1, 2, 16, 16)), [[0.0, 0.0]])[0]
    assert len(gen.points) == tok.horizon and len(gen.trace) == 2 * tok.horizon
    # an EOS right after an x drops that dangling x
    model.decoder.head.bias.data[tok.eos] = 0.0
    calls = {"n": 0}
    orig = model.decoder.__class__.__call__

    def scripted(self, seq, memory):
        logits = orig(self, seq, memory)
        z = np.zeros_like(logits.data)
        z[..., 10] = 1.0
        if seq.shape[1] == 4:  # BOS x y x -> next is EOS
            z[:, -1, tok.eos] = 5.0
        return Tensor(z)

    model.decoder.__class__.__call__ = scripted
    try:
        gen = model.generate(np.zeros((1, 2, 16, 16)), [[0.0, 0.0]])[0]
    finally:
        model.decoder.__class__.__call__ = orig
    assert len(gen.points) == 1


def test_variant_lookup_and_config_roundtrip():
    with pytest.raises(ValueError):
        variant_config(BASE, "nope")
    cfg = variant_config(BASE, "Decoder-Binary")
    assert cfg.encoder.query == "binary" and not cfg.decoder.refinement
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        DecoderConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        DecoderConfig(memory="camera")


def test_bev_memory_option():
    cfg = replace(BASE, decoder=replace(BASE.decoder, memory="bev"))
    model = ParkingModel(cfg)
    enc = encoded(model)
    assert model.memory(enc) is enc.bev_tokens
    tx, ty = random_tokens(np.random.default_rng(7), 2, 3, cfg.tokenizer)
    assert model.forward(enc, tx, ty).x_logits.shape == (2, 3, cfg.tokenizer.vocab_size)
    assert math.isfinite(float(model.forward(enc, tx, ty).x_logits.data.sum()))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualpark.tokenizer import (
    TokenizerConfig,
    build_sequences,
    decode_tokens,
    deserialize,
    interleave_tokens,
    roundtrip_bound,
    serialize,
)

CFG = TokenizerConfig()
coords = st.floats(-10.0, 10.0, allow_nan=False)


def test_special_tokens_follow_bins():
    assert (CFG.bos, CFG.eos, CFG.pad, CFG.vocab_size) == (1200, 1201, 1202, 1203)


def test_bin_width_at_default_range():
    assert CFG.bin_width("x") == pytest.approx(20 / 1200)
    assert roundtrip_bound(10.0, 1200) == pytest.approx(0.016666666666666666)


def test_endpoints_clamp():
    assert serialize(-10.0, 10.0, 1200) == 0
    assert serialize(10.0, 10.0, 1200) == 1199
    assert serialize(-25.0, 10.0, 1200) == 0
    assert serialize(25.0, 10.0, 1200) == 1199


def test_origin_lands_mid_vocabulary():
    assert serialize(0.0, 10.0, 1200) == 600


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        serialize(float("nan"), 10.0, 1200)


def test_deserialize_rejects_special_tokens():
    for t in (CFG.bos, CFG.eos, CFG.pad, -1):
        with pytest.raises(ValueError):
            deserialize(t, 10.0, 1200)


@settings(max_examples=300)
@given(coords)
def test_roundtrip_within_one_bin(p):
    back = deserialize(serialize(p, 10.0, 1200), 10.0, 1200)
    assert abs(back - p) <= roundtrip_bound(10.0, 1200)


@settings(max_examples=300)
@given(coords, coords)
def test_serialize_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert serialize(lo, 10.0, 1200) <= serialize(hi, 10.0, 1200)


@given(st.integers(0, 1199))
def test_token_is_fixed_point(t):
    assert serialize(deserialize(t, 10.0, 1200), 10.0, 1200) == t


def test_sequences_bracketed():
    sx, sy = build_sequences([0.0, 1.0], [2.0, -3.0], CFG)
    assert sx.tokens[0] == CFG.bos and sx.tokens[-1] == CFG.eos
    assert len(sx.tokens) == len(sy.tokens) == 4


def test_sequence_length_mismatch():
    with pytest.raises(ValueError):
        build_sequences([0.0], [1.0, 2.0], CFG)


@given(st.lists(st.tuples(coords, coords), min_size=1, max_size=30))
def test_interleaved_length_and_decode(points):
    xs, ys = zip(*points)
    sx, sy = build_sequences(xs, ys, CFG)
    joint = interleave_tokens(sx, sy, CFG)
    assert len(joint) == 2 * len(points) + 2
    assert joint[1::2][: len(points)] == sx.tokens[1:-1]
    dec = decode_tokens(sx.tokens[1:-1], sy.tokens[1:-1], CFG)
    assert np.abs(dec - np.array(points)).max() <= roundtrip_bound(10.0, 1200)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualpark.autodiff import Adam, Linear, Module, Tensor, cosine_lr, load_checkpoint, ops, save_checkpoint
from dualpark.autodiff.checkpoint import CheckpointError
from dualpark.autodiff.gradcheck import check_gradients, gradient_cases, numeric_grad, relative_error

CASES = gradient_cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    build = CASES[name]
    for seed in range(5):
        fn, inputs = build(np.random.default_rng(seed))
        assert check_gradients(fn, inputs) <= 1e-4, name


def test_backward_accumulates_on_repeat():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (a * a).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(a.grad, 2 * 2 * a.data)


def test_shared_subexpression_gradient():
    a = Tensor(np.array(3.0), requires_grad=True)
    b = a * 2.0
    (b * b + b).backward()
    # d/da (4a^2 + 2a) = 8a + 2
    assert a.grad == pytest.approx(26.0)


def test_non_scalar_backward_rejected():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_numpy_left_operand_dispatches_to_tensor():
    a = Tensor(np.ones(3), requires_grad=True)
    out = np.arange(3.0) * a
    assert isinstance(out, Tensor)
    out.sum().backward()
    np.testing.assert_allclose(a.grad, np.arange(3.0))


def test_attention_blocked_keys_get_zero_weight():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=(1, 2, 4))) for _ in range(3))
    mask = np.array([[True, False], [True, True]])
    out = ops.attention(q, k, v, mask)
    np.testing.assert_allclose(out.data[0, 0], v.data[0, 0])


def test_attention_fully_masked_row_is_error():
    q = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        ops.attention(q, q, q, np.array([[True, False], [False, False]]))


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ops.embedding(Tensor(np.zeros((3, 2))), np.array([3]))


def test_cross_entropy_uniform_logits():
    loss = ops.cross_entropy(Tensor(np.zeros((4, 7))), np.array([0, 1, 2, 6]))
    assert loss.item() == pytest.approx(np.log(7))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ops.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(ops.log_softmax(Tensor(x)).data), p, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_unbroadcast_gradient_shapes(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    (a * b).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data.sum(), a.shape) * np.ones(a.shape))


def test_conv2d_output_size():
    x = Tensor(np.zeros((2, 3, 64, 64)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    assert ops.conv2d(x, w, None, stride=2, padding=1).shape == (2, 4, 32, 32)


def test_numeric_grad_restores_input():
    x = Tensor(np.array([1.0, 2.0]))
    before = x.data.copy()
    numeric_grad(lambda: (x * x).sum(), x)
    np.testing.assert_array_equal(x.data, before)


def test_relative_error_zero_vectors():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ((x - 1.0) ** 2).sum().backward()
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-3)


def test_adam_state_roundtrip():
    x = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([x])
    (x * x).sum().backward()
    opt.step()
    other = Adam([Tensor(np.ones(3), requires_grad=True)])
    other.load_state(opt.state())
    assert other.step_count == 1
    np.testing.assert_array_equal(other.m[0], opt.m[0])


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(0, 100, 1e-3, warmup=10) == pytest.approx(1e-4)


class _Tiny(Module):
    def __init__(self, rng):
        self.a = Linear(3, 2, rng)
        self.blocks = [Linear(2, 2, rng), Linear(2, 1, rng, bias=False)]


def test_module_state_dict_roundtrip(tmp_path):
    m = _Tiny(np.random.default_rng(0))
    assert [n for n, _ in m.named_parameters()] == ["a.weight", "a.bias", "blocks.0.weight", "blocks.0.bias",
                                                    "blocks.1.weight"]
    save_checkpoint(tmp_path / "m.ckpt", m.state_dict(), {"note": "x"})
    arrays, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": "x"}
    fresh = _Tiny(np.random.default_rng(1))
    fresh.load_state_dict(arrays)
    for (_, p), (_, q) in zip(m.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_load_state_dict_mismatch():
    m = _Tiny(np.random.default_rng(0))
    state = m.state_dict()
    state.pop("a.bias")
    with pytest.raises(KeyError):
        m.load_state_dict(state)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_detects_truncation(tmp_path):
    p = tmp_path / "t.ckpt"
    save_checkpoint(p, {"w": np.arange(10.0)}, {})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)

import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msdn.errors import ContractError, DimensionError, FormatError
from msdn.tensor import (
    Tensor, activation, add, channel_softmax, elementwise, gradcheck, load_tensor, mul,
    no_grad, precision, reductions, save_tensor, sigmoid, tensor_from_bytes, tensor_to_bytes,
    tsum,
)


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def central_difference(f, x, eps=1e-5):
    """Independent numeric gradient of a numpy scalar function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        g[i] = (f(hi) - f(lo)) / (2 * eps)
    return g


class TestElementwise:
    def test_hadamard_values(self):
        out = elementwise("hadamard", Tensor([2.0, 3.0]), Tensor([4.0, 5.0]))
        np.testing.assert_array_equal(out.data, [8.0, 15.0])

    def test_add_zeros_identity_and_grad(self):
        x = leaf([1.0, -2.0, 3.0])
        y = add(x, np.zeros(3))
        np.testing.assert_array_equal(y.data, x.data)
        tsum(y).backward()
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_hadamard_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a0, b0 = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 2, 2))
        a, b = leaf(a0), leaf(b0)
        tsum(mul(a, b) * mul(a, a)).backward()
        num_a = central_difference(lambda v: (v * b0 * v * v).sum(), a0)
        num_b = central_difference(lambda v: (a0 * v * a0 * a0).sum(), b0)
        assert np.max(np.abs(a.grad - num_a) / np.maximum(1, np.abs(num_a))) <= 1e-6
        assert np.max(np.abs(b.grad - num_b) / np.maximum(1, np.abs(num_b))) <= 1e-6

    def test_scale_and_sub(self):
        x = leaf([1.0, 2.0])
        out = elementwise("sub", elementwise("scale", x, 3.0), 1.0)
        np.testing.assert_array_equal(out.data, [2.0, 5.0])

    def test_broadcast_singleton(self):
        feats = leaf(np.ones((2, 3, 4, 4)))
        attn = leaf(np.full((2, 1, 4, 4), 0.5))
        out = mul(feats, attn)
        assert out.shape == (2, 3, 4, 4)
        tsum(out).backward()
        assert attn.grad.shape == (2, 1, 4, 4)
        np.testing.assert_allclose(attn.grad, 3.0)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(3, 2\)"):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_broadcast_with_ones_is_identity(self):
        x = leaf(np.random.default_rng(1).normal(size=(2, 3, 4, 4)))
        out = mul(x, np.ones((1, 1, 4, 4)))
        np.testing.assert_array_equal(out.data, x.data)
        tsum(out * 2.0).backward()
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 2.0))


class TestActivations:
    def test_sigmoid_zero(self):
        assert activation("sigmoid", Tensor([0.0])).item() == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(activation("relu", Tensor([-3.0, 3.0])).data, [0.0, 3.0])

    def test_sigmoid_grad_at_two(self):
        x = leaf([2.0])
        sigmoid(x).backward()
        s = lambda v: 1 / (1 + np.exp(-v))
        numeric = (s(2 + 1e-5) - s(2 - 1e-5)) / 2e-5
        assert abs(x.grad[0] - numeric) / abs(numeric) <= 1e-6

    def test_sigmoid_open_interval_and_stable(self):
        out = sigmoid(Tensor(np.array([-700.0, -30.0, 0.0, 30.0, 700.0])))
        assert np.all(np.isfinite(out.data))
        assert np.all(out.data[1:-1] > 0) and np.all(out.data[1:-1] < 1)


class TestReductions:
    def test_sum(self):
        assert reductions("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_softmax_equal_logits(self):
        out = channel_softmax(Tensor(np.zeros((1, 3, 2, 2))))
        np.testing.assert_allclose(out.data, 1 / 3)

    def test_softmax_sums_to_one_and_overflow_safe(self):
        x = np.random.default_rng(2).normal(size=(2, 4, 3, 3)) * 500
        out = channel_softmax(Tensor(x))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_grad(self):
        rng = np.random.default_rng(3)
        x0, w = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
        x = leaf(x0)
        tsum(mul(channel_softmax(x), w)).backward()

        def f(v):
            e = np.exp(v - v.max(axis=1, keepdims=True))
            return ((e / e.sum(axis=1, keepdims=True)) * w).sum()

        num = central_difference(f, x0)
        assert np.max(np.abs(x.grad - num) / np.maximum(1, np.abs(num))) <= 1e-6

    @given(st.floats(-50, 50), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_softmax_shift_invariant(self, shift, seed):
        x = np.random.default_rng(seed).normal(size=(1, 3, 2, 2))
        a = channel_softmax(Tensor(x)).data
        b = channel_softmax(Tensor(x + shift)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            tsum(Tensor(np.ones((2, 2))), axis=3)


class TestBackward:
    def test_square(self):
        x = leaf([3.0])
        mul(x, x).backward()
        assert x.grad[0] == 6.0

    def test_leaf_used_twice(self):
        x = leaf([1.5])
        add(x, x).backward()
        assert x.grad[0] == 2.0

    def test_non_scalar_root(self):
        with pytest.raises(ContractError):
            mul(leaf([1.0, 2.0]), 2.0).backward()

    def test_backward_twice_doubles(self):
        rng = np.random.default_rng(4)
        x = leaf(rng.normal(size=(3, 3)))
        y = tsum(mul(sigmoid(x), x))
        y.backward()
        first = x.grad.copy()
        y.backward()
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_zero_grad(self):
        x = leaf([1.0, 2.0])
        tsum(x).backward()
        x.zero_grad()
        assert np.all(x.grad == 0)

    def test_no_ops_is_noop(self):
        x = leaf([2.0])
        x.backward()
        assert x.grad[0] == 1.0
        Tensor([1.0]).backward()

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = mul(x, 2.0)
        assert not y.requires_grad


class TestGradcheck:
    def test_linear_is_exact(self):
        assert gradcheck(lambda t: tsum(t), np.zeros((3, 4))) == 0.0

    def test_linear_random_within_rounding(self):
        # central differences of an O(1) sum carry ~ulp(f)/eps of rounding
        x = np.random.default_rng(5).normal(size=(3, 4))
        assert gradcheck(lambda t: tsum(t), x) <= 1e-9

    def test_sigmoid_sum(self):
        x = np.random.default_rng(6).normal(size=(2, 3))
        assert gradcheck(lambda t: tsum(sigmoid(t)), x) <= 1e-6

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            gradcheck(lambda t: sigmoid(t), np.zeros(3))

    def test_runs_in_double(self):
        seen = []
        gradcheck(lambda t: seen.append(t.dtype) or tsum(t), np.zeros(2, dtype=np.float32))
        assert seen[0] == np.float64

    def test_precision_context_restores(self):
        with precision("f64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32


class TestSerialization:
    def test_layout(self):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        raw = tensor_to_bytes(arr)
        assert raw[:4] == b"MSDT"
        assert raw[4] == 1 and raw[5] == 2
        assert struct.unpack_from("<2I", raw, 6) == (2, 3)
        assert np.frombuffer(raw[14:], "<f4").tolist() == list(range(6))

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, tmp_path, dtype):
        arr = np.random.default_rng(7).normal(size=(2, 1, 3, 4)).astype(dtype)
        path = os.path.join(tmp_path, "t.msdt")
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)

    def test_truncated(self):
        raw = tensor_to_bytes(np.ones((4, 4), dtype=np.float64))
        with pytest.raises(FormatError, match="offset"):
            tensor_from_bytes(raw[:-3])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            tensor_from_bytes(b"XXXX" + b"\x01\x00")

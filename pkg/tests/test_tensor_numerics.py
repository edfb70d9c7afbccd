"""Unit tests for scripts/tensor_numerics.py - ops and reverse-mode gradients."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

import common  # noqa: E402
from common import ConfigError, ContractError, NumericError, ShapeError  # noqa: E402
from tensor_numerics import (  # noqa: E402
    GradTape,
    Tensor,
    add,
    backward,
    default_dtype,
    float64_mode,
    gelu,
    layernorm,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    square,
    sub,
    sum_all,
    transpose,
    where,
)


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` with respect to every entry of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        plus = fn()
        x[idx] = orig - h
        minus = fn()
        x[idx] = orig
        g[idx] = (plus - minus) / (2 * h)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(numeric), 1e-8)
    ok = (diff / scale < rtol) | (diff < 1e-8)
    assert ok.all(), f"max relative error {np.max(diff / scale)}"


def check_op_grads(build, *shapes, seed: int = 0):
    """Compare tape gradients of sum(weights * build(*inputs)) against finite differences."""
    rng = np.random.default_rng(seed)
    with float64_mode():
        arrays = [rng.normal(size=s) for s in shapes]
        inputs = [Tensor(a, requires_grad=True, name=f"x{i}") for i, a in enumerate(arrays)]
        proj = rng.normal(size=build(*inputs).shape)

        with GradTape() as tape:
            loss = sum_all(mul(build(*inputs), proj))
        grads = tape.backward(loss)

        def value():
            return float(np.sum(build(*inputs).data * proj))

        for i, arr in enumerate(arrays):
            assert_grad_close(grads[f"x{i}"], numeric_grad(value, arr))


class TestMatmul:
    """Tests for matmul."""

    def test_hand_arithmetic(self):
        """[[1,2],[3,4]] x [[5],[6]] = [[17],[39]]."""
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_identity(self, rng):
        """I x A = A."""
        a = rng.normal(size=(4, 3)).astype(np.float32)
        np.testing.assert_array_equal(matmul(Tensor(np.eye(4)), Tensor(a)).data, a)

    def test_zero(self, rng):
        """0 x A = 0."""
        a = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(matmul(Tensor(np.zeros((2, 3))), Tensor(a)).data, 0.0)

    def test_shape_mismatch(self):
        """Inner extents must agree."""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched(self, rng):
        """Leading axes broadcast against a 2-D right operand."""
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-6)

    def test_deterministic(self, rng):
        """Identical inputs give bit-identical outputs."""
        a = Tensor(rng.normal(size=(8, 16)))
        b = Tensor(rng.normal(size=(16, 4)))
        assert matmul(a, b).data.tobytes() == matmul(a, b).data.tobytes()


class TestSoftmax:
    """Tests for softmax."""

    def test_uniform(self):
        """softmax([0,0,0]) = [1/3,1/3,1/3]."""
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_large_values_stable(self):
        """softmax([1000,1000]) = [0.5,0.5] without overflow."""
        out = softmax(Tensor([1000.0, 1000.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_rows_sum_to_one(self, rng):
        """Each slice along the axis sums to 1 within 1e-6."""
        x = Tensor(rng.normal(scale=5.0, size=(6, 7)))
        np.testing.assert_allclose(softmax(x, axis=-1).data.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax(x, axis=0).data.sum(axis=0), 1.0, atol=1e-6)


class TestLayernorm:
    """Tests for layer normalization."""

    def test_constant_row_is_zero(self):
        """A constant row normalizes to zeros before the affine part."""
        out = layernorm(Tensor(np.full((2, 8), 3.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_normalized_moments(self, rng):
        """Rows have |mean| < 1e-6 and variance ~1 with identity affine."""
        x = Tensor(rng.normal(loc=4.0, scale=3.0, size=(5, 64)))
        out = layernorm(x, Tensor(np.ones(64)), Tensor(np.zeros(64))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_affine(self):
        """Gain and bias apply after normalization."""
        x = Tensor(np.full((1, 4), 2.0))
        out = layernorm(x, Tensor(np.full(4, 3.0)), Tensor(np.full(4, 0.5)))
        np.testing.assert_allclose(out.data, 0.5)

    @pytest.mark.parametrize("eps", [0.0, -1e-5, float("nan")])
    def test_eps_must_be_positive(self, eps):
        """eps of zero, negative or NaN raises ConfigError."""
        with pytest.raises(ConfigError):
            x = Tensor(np.full((2, 8), 3.0))
            layernorm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=eps)


class TestGelu:
    """Tests for tanh-approximated GELU."""

    def test_known_values(self):
        """gelu(0) = 0, and the tanh approximation at 1 and -1."""
        x = np.array([0.0, 1.0, -1.0])
        expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(gelu(Tensor(x)).data, expected, rtol=1e-6)
        assert gelu(Tensor(x)).data[0] == 0.0

    def test_large_positive_is_identity(self):
        """For large x, gelu(x) ~ x."""
        assert gelu(Tensor([10.0])).data[0] == pytest.approx(10.0)


class TestDtype:
    """Tests for precision handling."""

    def test_default_float32(self):
        """New tensors default to float32."""
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert default_dtype() is np.float32

    def test_float64_mode(self):
        """float64_mode switches the default inside the block only."""
        with float64_mode():
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_constants_follow_tensor_dtype(self):
        """Python scalars combined with a float64 tensor stay float64."""
        x = Tensor(np.ones(3, dtype=np.float64))
        assert mul(x, 0.5).dtype == np.float64
        assert add(2.0, x).dtype == np.float64


class TestDebugNumerics:
    """Tests for the NaN/Inf debug check."""

    def test_non_finite_raises_when_enabled(self, monkeypatch):
        """With the debug flag on, an op producing Inf raises NumericError."""
        monkeypatch.setattr(common, "DEBUG_NUMERICS", True)
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            mul(Tensor([np.float32(3e38)]), 10.0)

    def test_non_finite_passes_when_disabled(self, monkeypatch):
        """Without the flag the value propagates."""
        monkeypatch.setattr(common, "DEBUG_NUMERICS", False)
        with np.errstate(over="ignore"):
            out = mul(Tensor([np.float32(3e38)]), 10.0)
        assert np.isinf(out.data).all()


class TestGradients:
    """Finite-difference checks for every differentiable op."""

    def test_add_broadcast(self):
        check_op_grads(add, (3, 4), (4,))

    def test_sub(self):
        check_op_grads(sub, (2, 3), (2, 3))

    def test_mul_broadcast(self):
        check_op_grads(mul, (2, 3, 4), (1, 4))

    def test_square(self):
        check_op_grads(square, (5,))

    def test_matmul(self):
        check_op_grads(matmul, (3, 4), (4, 2))

    def test_matmul_batched_2d_rhs(self):
        check_op_grads(matmul, (2, 3, 4), (4, 5))

    def test_matmul_batched_both(self):
        check_op_grads(matmul, (2, 3, 4), (2, 4, 3))

    def test_gelu(self):
        check_op_grads(gelu, (4, 5))

    def test_softmax(self):
        check_op_grads(lambda x: softmax(x, axis=-1), (3, 6))

    def test_softmax_axis0(self):
        check_op_grads(lambda x: softmax(x, axis=0), (4, 3))

    def test_layernorm(self):
        check_op_grads(layernorm, (3, 8), (8,), (8,))

    def test_reshape_transpose(self):
        check_op_grads(lambda x: transpose(reshape(x, (2, 3, 4)), (2, 0, 1)), (6, 4))

    def test_mean_axes(self):
        check_op_grads(lambda x: mean(x, axis=(1, 2)), (2, 3, 4))

    def test_mean_keepdims(self):
        check_op_grads(lambda x: mean(x, axis=-1, keepdims=True), (3, 5))

    def test_where(self):
        mask = np.array([[True, False, True], [False, False, True]])
        check_op_grads(lambda a, b: where(mask, a, b), (2, 3), (3,))

    def test_sum_of_product_outer_structure(self):
        """loss = sum(x @ W) gives dL/dW[i, j] = sum over rows of x[:, i]."""
        with float64_mode():
            x = Tensor(np.arange(6.0).reshape(2, 3))
            w = Tensor(np.ones((3, 4)), requires_grad=True, name="w")
            with GradTape() as tape:
                loss = sum_all(matmul(x, w))
            g = tape.backward(loss)["w"]
        expected = np.repeat(x.data.sum(axis=0)[:, None], 4, axis=1)
        np.testing.assert_allclose(g, expected)


class TestGradTape:
    """Tests for tape bookkeeping."""

    def test_non_scalar_loss(self):
        """Backward from a non-scalar raises ContractError."""
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        with GradTape() as tape:
            out = mul(w, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_consumed_once(self):
        """A tape cannot be replayed."""
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        with GradTape() as tape:
            loss = sum_all(w)
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)

    def test_frozen_parameter_absent(self):
        """Frozen tensors get no gradient entry."""
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        frozen = Tensor(np.ones(3), requires_grad=False, name="frozen")
        with GradTape() as tape:
            loss = sum_all(mul(w, frozen))
        grads = backward(tape, loss, {"w": w, "frozen": frozen})
        assert set(grads) == {"w"}
        np.testing.assert_array_equal(grads["w"], 1.0)

    def test_unused_parameter_zero(self):
        """A trainable tensor the loss ignores gets a zero gradient."""
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        unused = Tensor(np.ones((2, 2)), requires_grad=True, name="unused")
        with GradTape() as tape:
            loss = sum_all(w)
        grads = tape.backward(loss, {"w": w, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_shared_input_accumulates(self):
        """A tensor used twice accumulates both contributions."""
        w = Tensor(np.array([2.0, 3.0]), requires_grad=True, name="w")
        with GradTape() as tape:
            loss = sum_all(mul(w, w))
        np.testing.assert_allclose(tape.backward(loss)["w"], [4.0, 6.0])

    def test_no_recording_without_tracked_inputs(self):
        """Ops on constants are not recorded."""
        with GradTape() as tape:
            add(Tensor(np.ones(2)), 1.0)
        assert len(tape) == 0

    def test_no_tape_no_recording(self):
        """Ops outside a tape run without recording."""
        w = Tensor(np.ones(2), requires_grad=True)
        out = mul(w, 3.0)
        np.testing.assert_array_equal(out.data, 3.0)

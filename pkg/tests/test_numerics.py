import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmproto.numerics import (DimensionError, GradientTape, ParameterError,
                              Tensor, UsageError, backward, finite_difference,
                              l2_normalize_rows, matmul,
                              relative_gradient_error, softmax_rows)

finite_matrices = arrays(
    np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
    elements=st.floats(-50, 50, allow_nan=False))


class TestMatmul:
    def test_identity(self):
        out = matmul([[1, 0], [0, 1]], [[5, 6], [7, 8]])
        np.testing.assert_array_equal(out, [[5, 6], [7, 8]])

    def test_hand_computed(self):
        out = matmul([[1, 2]], [[3], [4]])
        np.testing.assert_array_equal(out, [[11]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match="2x3.*2x3"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    @given(a=finite_matrices, b=finite_matrices, c=finite_matrices)
    @settings(max_examples=50)
    def test_associativity(self, a, b, c):
        b = np.resize(b, (a.shape[1], b.shape[1]))
        c = np.resize(c, (b.shape[1], c.shape[1]))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        np.testing.assert_allclose(left, right, atol=1e-9 * (1 + np.abs(left).max()))


class TestSoftmaxRows:
    def test_symmetric_row(self):
        out = softmax_rows([[0.0, 0.0]], temperature=0.1)
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_direct_evaluation(self):
        out = softmax_rows([[1.0, 0.0]], temperature=0.1)
        expect = np.array([1.0, np.exp(-10)]) / (1.0 + np.exp(-10))
        np.testing.assert_allclose(out[0], expect, rtol=1e-12)
        np.testing.assert_allclose(out[0], [0.9999546, 4.5398e-5], rtol=1e-4)

    def test_no_overflow(self):
        out = softmax_rows([[1000.0, 0.0]], temperature=1.0)
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_nonpositive_temperature(self):
        with pytest.raises(ParameterError):
            softmax_rows([[1.0, 2.0]], temperature=0.0)

    @given(m=finite_matrices)
    @settings(max_examples=50)
    def test_rows_sum_to_one(self, m):
        out = softmax_rows(m, temperature=0.7)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    @given(m=finite_matrices, c=st.floats(-20, 20))
    @settings(max_examples=50)
    def test_shift_invariance(self, m, c):
        np.testing.assert_allclose(softmax_rows(m + c), softmax_rows(m),
                                   atol=1e-9)


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out, zero = l2_normalize_rows([[3.0, 4.0]])
        np.testing.assert_allclose(out, [[0.6, 0.8]])
        assert not zero.any()

    def test_zero_row_flagged(self):
        out, zero = l2_normalize_rows([[0.0, 0.0]])
        np.testing.assert_array_equal(out, [[0.0, 0.0]])
        assert zero.tolist() == [True]

    def test_diagonal(self):
        out, _ = l2_normalize_rows([[1.0, 1.0]])
        np.testing.assert_allclose(out, [[0.70710678, 0.70710678]], rtol=1e-7)

    @given(m=finite_matrices)
    @settings(max_examples=50)
    def test_idempotent(self, m):
        once, _ = l2_normalize_rows(m)
        twice, _ = l2_normalize_rows(once)
        np.testing.assert_allclose(once, twice, atol=1e-9)


class TestBackward:
    def test_linear_loss_gives_ones(self):
        tape = GradientTape()
        p = tape.parameter("p", np.arange(6.0).reshape(2, 3))
        grads = backward(tape, p.sum())
        np.testing.assert_array_equal(grads["p"], np.ones((2, 3)))

    def test_quadratic_loss_gives_p(self):
        tape = GradientTape()
        value = np.arange(6.0).reshape(2, 3)
        p = tape.parameter("p", value)
        grads = backward(tape, (p * p).sum() * 0.5)
        np.testing.assert_allclose(grads["p"], value)

    def test_non_scalar_loss_rejected(self):
        tape = GradientTape()
        p = tape.parameter("p", np.ones((2, 2)))
        with pytest.raises(UsageError):
            backward(tape, p * 2.0)

    def test_repeated_backward_identical(self):
        tape = GradientTape()
        p = tape.parameter("p", np.array([[1.0, 2.0], [3.0, 4.0]]))
        loss = (p.log_softmax_rows(0.5) * p).sum()
        first = backward(tape, loss)
        second = backward(tape, loss)
        assert (first["p"] == second["p"]).all()

    def test_gradient_shapes_match(self):
        tape = GradientTape()
        w = tape.parameter("w", np.ones((3, 4)))
        b = tape.parameter("b", np.zeros((1, 4)))
        x = Tensor(np.random.default_rng(0).standard_normal((5, 3)))
        loss = ((x @ w + b).relu()).sum()
        grads = backward(tape, loss)
        assert grads["w"].shape == (3, 4)
        assert grads["b"].shape == (1, 4)

    def test_seeded_reproducibility(self):
        def run():
            rng = np.random.default_rng(42)
            tape = GradientTape()
            p = tape.parameter("p", rng.standard_normal((4, 4)))
            x = Tensor(rng.standard_normal((4, 4)))
            loss = ((x @ p).softmax_rows(0.3) * x).sum()
            return backward(tape, loss)["p"]

        a, b = run(), run()
        assert (a == b).all()


class TestFiniteDifferenceAgreement:
    """Every composite op used by the objective matches central differences."""

    def check(self, build, params):
        tape = GradientTape()
        tensors = {k: tape.parameter(k, v.copy()) for k, v in params.items()}
        analytic = backward(tape, build(tensors))

        def scalar(raw):
            return float(
                build({k: Tensor(v) for k, v in raw.items()}).data[0, 0])

        numeric = finite_difference(scalar, params)
        assert relative_gradient_error(analytic, numeric) < 1e-4

    def test_matmul(self):
        rng = np.random.default_rng(0)
        self.check(lambda p: (p["a"] @ p["b"]).sum(),
                   {"a": rng.standard_normal((3, 4)),
                    "b": rng.standard_normal((4, 2))})

    def test_softmax(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((3, 5))
        self.check(lambda p: (p["m"].softmax_rows(0.2) * Tensor(w)).sum(),
                   {"m": rng.standard_normal((3, 5))})

    def test_log(self):
        rng = np.random.default_rng(2)
        self.check(lambda p: (p["m"].log() * 0.7).sum(),
                   {"m": np.abs(rng.standard_normal((3, 3))) + 0.5})

    def test_normalization(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((4, 6))
        self.check(lambda p: (p["m"].l2_normalize_rows() * Tensor(w)).sum(),
                   {"m": rng.standard_normal((4, 6)) + 0.2})

    def test_cross_entropy(self):
        rng = np.random.default_rng(4)
        q = np.abs(rng.standard_normal((4, 5)))
        q /= q.sum(axis=1, keepdims=True)
        self.check(
            lambda p: -(Tensor(q) * p["s"].log_softmax_rows(0.1)).sum() * 0.25,
            {"s": rng.standard_normal((4, 5))})

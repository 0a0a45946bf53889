import numpy as np
import pytest

from canonfield import tensor as T
from canonfield.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    concat,
    cosine_similarity,
    conv2d,
    finite_difference_check,
    interp_bilinear,
    softmax,
)

RNG = np.random.default_rng(0)


def rand(*shape):
    return RNG.standard_normal(shape)


class TestForwardValues:
    def test_elu_closed_form(self):
        y = Tensor([-1.0]).elu()
        assert y.data[0] == pytest.approx(np.exp(-1.0) - 1.0, abs=1e-12)

    def test_softmax_symmetry(self):
        y = softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3] * 3, atol=1e-15)

    def test_cosine_similarity_identity(self):
        for _ in range(5):
            v = Tensor(rand(7))
            assert cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            Tensor(rand(2, 3)) + Tensor(rand(4, 5))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_debug_nonfinite_flag(self):
        T.set_debug_nonfinite(True)
        try:
            with pytest.raises(NonFiniteError):
                Tensor([1.0, 0.0]).log() * 0.0
        finally:
            T.set_debug_nonfinite(False)


class TestBackwardBasics:
    def test_square_grad(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_softmax_sum_grad_is_zero(self):
        x = Tensor(rand(5), requires_grad=True)
        softmax(x).sum().backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)

    def test_matmul_grads_match_finite_differences(self):
        a0, b0 = rand(3, 4), rand(4, 2)
        b = Tensor(b0)
        err = finite_difference_check(lambda a: (a @ b).sum(), Tensor(a0))
        assert err < 1e-6
        a = Tensor(a0)
        err = finite_difference_check(lambda bb: (a @ bb).sum(), Tensor(b0))
        assert err < 1e-6

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(rand(3), requires_grad=True).backward()

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(2.0, requires_grad=True)
        (x * x).backward()
        (x * 3.0).backward()
        assert x.grad == pytest.approx(4.0 + 3.0)
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, 0.0)


class TestFiniteDifferenceOracle:
    def test_exp_sum(self):
        assert finite_difference_check(lambda x: x.exp().sum(), Tensor(rand(8))) < 1e-6

    def test_linear_is_exact(self):
        # zero up to float rounding of the difference quotient
        assert finite_difference_check(lambda x: x.sum(), Tensor(rand(6))) < 1e-10

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda x: x.sum(), Tensor(rand(2)), eps=0.5)

    def test_abs_kink_detectable(self):
        # |x| at 0: central difference gives 0, analytic sign(0)=0; the kink
        # shows up when straddling it with a shifted base point
        x = np.array([0.5e-5])
        err = finite_difference_check(lambda t: t.abs().sum(), Tensor(x), eps=1e-4)
        assert err > 0.5  # nondifferentiable point flagged by large mismatch


UNARY_OPS = {
    "exp": lambda x: x.exp().sum(),
    "log": lambda x: (x.square() + 0.5).log().sum(),
    "abs": lambda x: (x + 10.0).abs().sum(),  # keep away from the kink
    "square": lambda x: x.square().sum(),
    "sqrt": lambda x: (x.square() + 0.5).sqrt().sum(),
    "sin": lambda x: x.sin().sum(),
    "cos": lambda x: x.cos().sum(),
    "elu": lambda x: x.elu().square().sum(),
    "leaky_relu": lambda x: (x + 5.0).leaky_relu().sum(),
    "sigmoid": lambda x: x.sigmoid().sum(),
    "softplus": lambda x: x.softplus().sum(),
    "maximum": lambda x: (x + 5.0).maximum(0.0).sum(),
    "neg": lambda x: (-x).square().sum(),
    "mean": lambda x: x.mean(),
    "cumsum": lambda x: x.cumsum(0).square().sum(),
    "softmax": lambda x: (softmax(x) * np.arange(6.0)).sum(),
    "reshape": lambda x: x.reshape(2, 3).square().sum(),
    "slice": lambda x: x[1:4].square().sum(),
    "broadcast": lambda x: x.reshape(6, 1).broadcast_to((6, 3)).square().sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_op_gradients_match_finite_differences(name):
    # spec-level property: 100 random small inputs per op, rel err < 1e-4
    f = UNARY_OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = Tensor(rng.standard_normal(6))
        worst = max(worst, finite_difference_check(f, x))
    assert worst < 1e-4


class TestBinaryAndStructuredGrads:
    def test_div_broadcast(self):
        b = Tensor(rand(4) + 3.0)
        err = finite_difference_check(lambda a: (a / b).square().sum(), Tensor(rand(3, 4)))
        assert err < 1e-6

    def test_mul_broadcast(self):
        b = Tensor(rand(1, 4))
        err = finite_difference_check(lambda a: (a * b).sum(), Tensor(rand(3, 4)))
        assert err < 1e-6

    def test_concat(self):
        b = Tensor(rand(2, 3))
        err = finite_difference_check(
            lambda a: concat([a, b], axis=0).square().sum(), Tensor(rand(2, 3))
        )
        assert err < 1e-6

    def test_cosine_similarity_grad(self):
        b = Tensor(rand(5))
        err = finite_difference_check(lambda a: cosine_similarity(a, b), Tensor(rand(5)))
        assert err < 1e-6

    def test_transpose(self):
        w = Tensor(rand(3, 2))
        err = finite_difference_check(lambda a: (a.T @ w).sum(), Tensor(rand(3, 4)))
        assert err < 1e-6

    def test_cumprod_all_nonzero(self):
        x = Tensor(rand(5) + 3.0)
        assert finite_difference_check(lambda t: t.cumprod(0).sum(), x) < 1e-5

    def test_cumprod_with_zero_factor(self):
        vals = np.array([1.5, 0.0, 2.0, -1.0])
        x = Tensor(vals)
        x.requires_grad = True
        x.cumprod(0).sum().backward()
        # analytic: dy/dx via products with the zero held out
        expected = np.zeros(4)
        for i in range(4):
            for k in range(i, 4):
                prod = 1.0
                for j in range(k + 1):
                    if j != i:
                        prod *= vals[j]
                expected[i] += prod
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12)

    def test_cumprod_axis1(self):
        x = Tensor(rand(2, 4) + 3.0)
        assert finite_difference_check(lambda t: t.cumprod(1).sum(), x) < 1e-5

    def test_conv2d(self):
        x = Tensor(rand(2, 3, 6, 6))
        w = Tensor(rand(4, 3, 3, 3) * 0.3)
        b = Tensor(rand(4) * 0.3)
        err = finite_difference_check(lambda t: conv2d(t, w, b, stride=2).square().sum(), x)
        assert err < 1e-5
        err = finite_difference_check(lambda t: conv2d(x, t, b, stride=2).square().sum(), w)
        assert err < 1e-5
        err = finite_difference_check(lambda t: conv2d(x, w, t, stride=2).square().sum(), b)
        assert err < 1e-5

    def test_interp_bilinear(self):
        x = Tensor(rand(1, 2, 8, 8))
        err = finite_difference_check(
            lambda t: interp_bilinear(t, (4, 4)).square().sum(), x
        )
        assert err < 1e-5

    def test_interp_bilinear_preserves_constants(self):
        x = Tensor(np.full((1, 1, 8, 8), 2.5))
        y = interp_bilinear(x, (3, 3))
        np.testing.assert_allclose(y.data, 2.5, atol=1e-12)


class TestInferenceMode:
    def test_no_grad_builds_no_graph(self):
        x = Tensor(rand(3), requires_grad=True)
        with T.no_grad():
            y = (x * 2.0).sum()
        assert y._parents == ()

    def test_f32_mode(self):
        T.set_default_dtype(np.float32)
        try:
            assert Tensor([1.0]).data.dtype == np.float32
        finally:
            T.set_default_dtype(np.float64)

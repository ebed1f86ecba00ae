import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpunet import autodiff as ad
from cpunet.autodiff import Parameter, Tensor, gradient_check
from cpunet.errors import ContractError, DimensionError, GradientCheckError


def loop_conv2d(x, w, b, stride, padding):
    """Scalar-loop cross-correlation used as an independent oracle."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_all_ones_center_and_corner(self):
        out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=1)
        assert out.data[0, 1, 1] == 9.0
        assert out.data[0, 0, 0] == 4.0
        assert out.data[0, 2, 2] == 4.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 5, 4))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_stride_two_shape(self):
        out = ad.conv2d(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 4, 4)

    @settings(max_examples=25, deadline=None)
    @given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
           k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]), seed=st.integers(0, 2 ** 16))
    def test_matches_loop_oracle(self, c_in, c_out, h, w, k, stride, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((c_in, h, w))
        wt = rng.standard_normal((c_out, c_in, k, k))
        b = rng.standard_normal(c_out)
        pad = k // 2
        out = ad.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, loop_conv2d(x, wt, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradient(self, stride):
        rng = np.random.default_rng(1)
        x = Parameter(rng.standard_normal((2, 6, 6)), "x")
        w = Parameter(rng.standard_normal((3, 2, 3, 3)), "w")
        b = Parameter(rng.standard_normal(3), "b")
        r = rng.standard_normal((3, 6 // stride, 6 // stride))
        err = gradient_check(lambda: ad.sum(ad.mul(ad.conv2d(x, w, b, stride, 1), Tensor(r))),
                             [x, w, b], samples_per_param=20)
        assert err < 1e-6


class TestGap:
    def test_mean_of_values(self):
        out = ad.gap(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        assert out.shape == (1, 1, 1)
        assert out.data.item() == 2.5

    def test_constant_channel(self):
        assert ad.gap(Tensor(np.full((2, 3, 5), 1.75))).data.ravel().tolist() == [1.75, 1.75]

    def test_zero(self):
        np.testing.assert_array_equal(ad.gap(Tensor(np.zeros((3, 4, 4)))).data, 0.0)

    def test_gradient_is_uniform(self):
        x = Parameter(np.random.default_rng(0).standard_normal((2, 3, 4)))
        ad.sum(ad.gap(x)).backward()
        np.testing.assert_allclose(x.grad, 1.0 / 12)


class TestElementwise:
    def test_add(self):
        out = ad.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_broadcast_mul_by_ones(self):
        x = np.random.default_rng(0).standard_normal((3, 4, 5))
        out = ad.elementwise("broadcast_mul", Tensor(x), Tensor(np.ones((3, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_mul_by_zero_kills_gradient(self):
        a = Parameter(np.array([1.0, -2.0, 3.0]))
        out = ad.elementwise("mul", a, Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)
        ad.sum(out).backward()
        np.testing.assert_array_equal(a.grad, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.elementwise("add", Tensor(np.zeros(2)), Tensor(np.zeros(3)))
        with pytest.raises(DimensionError):
            ad.elementwise("broadcast_mul", Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((3, 1, 1))))

    def test_broadcast_adjoint_sums(self):
        rng = np.random.default_rng(2)
        a = Parameter(rng.standard_normal((2, 3, 3)), "a")
        b = Parameter(rng.standard_normal((2, 1, 1)), "b")
        r = rng.standard_normal((2, 3, 3))
        err = gradient_check(lambda: ad.sum(ad.mul(ad.elementwise("broadcast_mul", a, b), Tensor(r))),
                             [a, b], samples_per_param=10)
        assert err < 1e-6


class TestActivations:
    def test_fixed_points(self):
        assert ad.sigmoid(Tensor(0.0)).data == 0.5
        assert ad.gelu(Tensor(0.0)).data == 0.0

    def test_softplus_positive(self):
        x = np.linspace(-30, 30, 101)
        assert np.all(ad.softplus(Tensor(x)).data > 0)

    def test_gelu_tanh_formula(self):
        x = np.linspace(-4, 4, 17)
        expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(ad.gelu(Tensor(x)).data, expected, rtol=1e-15)

    def test_sigmoid_extremes_stay_finite(self):
        out = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
        assert np.all(np.isfinite(out)) and out[0] >= 0 and out[1] == 1.0

    @pytest.mark.parametrize("op", ["gelu", "sigmoid", "softplus", "relu"])
    def test_gradient(self, op):
        rng = np.random.default_rng(3)
        # keep relu away from its kink
        data = rng.standard_normal(30)
        data[np.abs(data) < 0.05] += 0.2
        x = Parameter(data, op)
        r = rng.standard_normal(30)
        assert gradient_check(lambda: ad.sum(ad.mul(ad.activation(op, x), Tensor(r))), [x],
                              samples_per_param=30) < 1e-6


class TestMatmul:
    def test_identity(self):
        v = np.array([[1.5], [-2.0], [3.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(v)).data, v)

    def test_dot_product(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.item() == 11.0

    def test_zero(self):
        out = ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        a = Parameter(rng.standard_normal((3, 4)), "a")
        b = Parameter(rng.standard_normal((4, 2)), "b")
        r = rng.standard_normal((3, 2))
        assert gradient_check(lambda: ad.sum(ad.mul(ad.matmul(a, b), Tensor(r))), [a, b],
                              samples_per_param=12) < 1e-6


class TestOtherPrimitives:
    @pytest.mark.parametrize("name", ["log", "square", "exp", "upsample", "div", "reshape", "mean_axis"])
    def test_gradient(self, name):
        rng = np.random.default_rng(5)
        x = Parameter(rng.uniform(0.5, 2.0, (2, 3, 4)), "x")
        y = Parameter(rng.uniform(0.5, 2.0, (2, 3, 4)), "y")
        fns = {
            "log": lambda: ad.log(x),
            "square": lambda: ad.square(x),
            "exp": lambda: ad.exp(x),
            "upsample": lambda: ad.upsample_nearest2x(x),
            "div": lambda: ad.div(x, y),
            "reshape": lambda: ad.reshape(x, (6, 4)),
            "mean_axis": lambda: ad.mean(x, axis=1, keepdims=True),
        }
        r = rng.standard_normal(fns[name]().shape)
        err = gradient_check(lambda: ad.sum(ad.mul(fns[name](), Tensor(r))), [x, y], samples_per_param=10)
        assert err < 1e-6

    def test_upsample_values(self):
        out = ad.upsample_nearest2x(Tensor(np.array([[[1.0, 2.0]]])))
        assert out.data.tolist() == [[[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]]]


class TestBackward:
    def test_sum_gives_ones(self):
        p = Parameter(np.arange(5.0))
        ad.sum(p).backward()
        np.testing.assert_array_equal(p.grad, 1.0)

    def test_sum_of_squares(self):
        p = Parameter(np.array([1.0, 2.0]))
        ad.sum(ad.mul(p, p)).backward()
        assert p.grad.tolist() == [2.0, 4.0]

    def test_disconnected_parameter(self):
        p, q = Parameter(np.ones(3)), Parameter(np.ones(3))
        ad.sum(p).backward()
        np.testing.assert_array_equal(q.grad, 0.0)

    def test_loss_grad_is_one(self):
        p = Parameter(np.array([3.0]))
        loss = ad.sum(ad.square(p))
        loss.backward()
        assert loss.grad.tolist() == 1.0

    def test_fan_out_accumulates(self):
        p = Parameter(np.array([2.0, -1.0]))
        # p feeds three consumers: d/dp (p + 3p + p^2) = 4 + 2p
        loss = ad.sum(ad.add(ad.add(p, ad.scale(p, 3.0)), ad.square(p)))
        loss.backward()
        assert p.grad.tolist() == [8.0, 2.0]

    def test_repeated_backward_accumulates(self):
        p = Parameter(np.array([1.0, 2.0]))
        loss = ad.sum(ad.square(p))
        loss.backward()
        loss.backward()
        assert p.grad.tolist() == [4.0, 8.0]

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            Parameter(np.ones(3)).backward()

    def test_forward_is_pure_and_replay_identical(self):
        rng = np.random.default_rng(6)
        w = Parameter(rng.standard_normal((2, 1, 3, 3)))
        x = Tensor(rng.standard_normal((1, 5, 5)))

        def run():
            w.zero_grad()
            out = ad.sum(ad.gelu(ad.conv2d(x, w, padding=1)))
            out.backward()
            return out.data.copy(), w.grad.copy()

        (o1, g1), (o2, g2) = run(), run()
        assert o1.tobytes() == o2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestGradientCheck:
    def test_constant_function(self):
        p = Parameter(np.ones(4))
        assert gradient_check(lambda: ad.sum(Tensor(np.ones(2))) + ad.scale(ad.sum(p), 0.0), [p]) == 0.0

    def test_detects_wrong_adjoint(self):
        p = Parameter(np.array([0.3, -0.7]))

        def bad_square(t):
            return Tensor.from_op(t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

        assert gradient_check(lambda: ad.sum(bad_square(p)), [p]) > 0.1

    def test_non_finite_names_parameter(self):
        # finite at the base point, log of a negative number one step away
        p = Parameter(np.array([-1.0 + 5e-6]), name="edge")
        with pytest.raises(GradientCheckError, match="edge"):
            with np.errstate(invalid="ignore"):
                gradient_check(lambda: ad.sum(ad.log(ad.add(p, Tensor(1.0)))), [p], eps=1e-5)

    def test_non_finite_base_point(self):
        p = Parameter(np.array([-2.0]))
        with pytest.raises(GradientCheckError, match="base point"):
            with np.errstate(invalid="ignore"):
                gradient_check(lambda: ad.sum(ad.log(p)), [p])

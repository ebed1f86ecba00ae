import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpunet import autodiff as ad
from cpunet import gf
from cpunet.autodiff import Parameter, Tensor, gradient_check
from cpunet.errors import ConfigError, DimensionError
from cpunet.gf import GfLayer, StageBundle, UpBlock, fuse_inputs


def layer(c=3, h=4, w=5, seed=0, init="kaiming"):
    return GfLayer(c, h, w, np.random.default_rng(seed), linear_init=init)


class TestFuseInputs:
    def test_additive_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 3))
        z = Tensor(np.zeros((2, 3, 3)))
        np.testing.assert_array_equal(fuse_inputs(StageBundle(Tensor(x), z, z)).data, x)

    def test_three_equal(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 3))
        t = Tensor(x)
        np.testing.assert_allclose(fuse_inputs(StageBundle(t, t, t)).data, 3 * x, rtol=1e-15)

    def test_loop_oracle(self):
        a, b, c = np.random.default_rng(2).standard_normal((3, 2, 4, 4))
        out = fuse_inputs(StageBundle(Tensor(a), Tensor(b), Tensor(c))).data
        for idx in np.ndindex(a.shape):
            assert out[idx] == a[idx] + b[idx] + c[idx]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 16))
    def test_commutative_and_associative(self, seed):
        a, b, c = (Tensor(v) for v in np.random.default_rng(seed).integers(-1000, 1000, (3, 2, 3, 3)) / 8.0)
        ref = fuse_inputs(StageBundle(a, b, c)).data
        for perm in ((b, c, a), (c, a, b), (b, a, c)):
            np.testing.assert_array_equal(fuse_inputs(StageBundle(*perm)).data, ref)

    @pytest.mark.parametrize("field", ["skip", "contour"])
    def test_mismatch_names_input(self, field):
        good, bad = Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 4, 3)))
        parts = {"up": good, "skip": good, "contour": good, field: bad}
        with pytest.raises(DimensionError, match=f"F_{field}"):
            fuse_inputs(StageBundle(**parts))


class TestGate:
    def test_open_gate_returns_embedding(self):
        g = layer()
        f = Tensor(np.random.default_rng(3).standard_normal((3, 4, 5)))
        out = gf.gate(f, g, signal=Tensor(np.ones((3, 20))))
        expected = f.data.reshape(3, 20) @ g.linear.weight.data + g.linear.bias.data
        np.testing.assert_allclose(out.data, expected.reshape(3, 4, 5), rtol=1e-13)

    def test_identity_embedding_with_open_gate(self):
        g = layer(init="identity")
        f = np.random.default_rng(4).standard_normal((3, 4, 5))
        np.testing.assert_array_equal(gf.gate(Tensor(f), g, signal=Tensor(np.ones((3, 20)))).data, f)

    def test_zero_input(self):
        out = layer()(Tensor(np.zeros((3, 4, 5))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zeroed_gate_conv_suppresses(self):
        g = layer()
        g.gate_conv.weight.data[...] = 0.0
        g.gate_conv.bias.data[...] = 0.0
        out = g(Tensor(np.random.default_rng(5).standard_normal((3, 4, 5))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_formula(self):
        g = layer(seed=6)
        f = np.random.default_rng(6).standard_normal((3, 4, 5))
        signal = ad.gelu(g.gate_conv(Tensor(f))).data.reshape(3, 20)
        emb = f.reshape(3, 20) @ g.linear.weight.data + g.linear.bias.data
        np.testing.assert_allclose(g(Tensor(f)).data, (signal * emb).reshape(3, 4, 5), rtol=1e-12)

    @pytest.mark.parametrize("c,h,w", [(1, 2, 2), (4, 8, 8), (2, 3, 7)])
    def test_shape_preserved(self, c, h, w):
        assert layer(c, h, w)(Tensor(np.ones((c, h, w)))).shape == (c, h, w)

    def test_wrong_spatial_size(self):
        with pytest.raises(ConfigError):
            layer()(Tensor(np.zeros((3, 4, 4))))

    def test_wrong_channels(self):
        with pytest.raises(DimensionError):
            layer()(Tensor(np.zeros((2, 4, 5))))

    def test_gradient_through_fuse_and_gate(self):
        rng = np.random.default_rng(7)
        g = layer(2, 4, 4, seed=7)
        up, skip, contour = (Parameter(rng.standard_normal((2, 4, 4)), n) for n in ("up", "skip", "contour"))
        r = rng.standard_normal((2, 4, 4))
        err = gradient_check(lambda: ad.sum(ad.mul(g(fuse_inputs(StageBundle(up, skip, contour))), Tensor(r))),
                             [up, skip, contour, *g.parameters()], samples_per_param=8)
        assert err < 1e-4


class TestUpBlock:
    def test_shape(self):
        up = UpBlock(4, 2, np.random.default_rng(0))
        assert up(Tensor(np.ones((4, 3, 5)))).shape == (2, 6, 10)

    def test_constant_input_interior(self):
        up = UpBlock(1, 1, np.random.default_rng(0))
        out = up(Tensor(np.ones((1, 4, 4)))).data
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], up.conv.weight.data.sum(), rtol=1e-14)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import draw_smooth
from i2c_wsol import engine as E
from i2c_wsol.errors import BoundsError, ConfigError, InputError, UsageError

FD = dict(eps=1e-4, rtol=1e-4, atol=1e-8)
SEEDS = range(20)


def leaf(a):
    return E.Tensor(a, requires_grad=True)


def brute_conv(x, k, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, oc, i, j] = np.sum(patch * k[oc])
    return out


class TestTensor:
    def test_grad_slot_matches_shape(self):
        t = leaf(np.ones((2, 3)))
        assert t.grad.shape == t.shape
        assert E.Tensor([1.0]).grad is None

    def test_rank_limit(self):
        with pytest.raises(InputError):
            E.Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_graph_order_is_topological(self):
        x = leaf(np.random.default_rng(0).normal(size=(1, 1, 4, 4)))
        k = leaf(np.ones((2, 1, 3, 3)))
        y = E.global_average_pool(E.relu(E.conv2d(x, k, pad=1)))
        loss = E.sum_all(y)
        g = E.Graph(loss)
        pos = {id(t): i for i, t in enumerate(g.order)}
        for t in g.order:
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad:
                        assert pos[id(inp)] < pos[id(t)]
        assert g.order[-1] is loss
        assert {id(t) for t in g.leaves} == {id(x), id(k)}


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 5, 4))
        out = E.conv2d(E.Tensor(x), E.Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_2x2(self):
        out = E.conv2d(E.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), E.Tensor(np.ones((1, 1, 2, 2))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 10.0

    def test_zero_input(self):
        k = np.random.default_rng(2).normal(size=(3, 2, 3, 3))
        out = E.conv2d(E.Tensor(np.zeros((1, 2, 6, 6))), E.Tensor(k), pad=1)
        assert not out.data.any()

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
    def test_matches_brute_force(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 7, 7))
        k = rng.normal(size=(4, 3, 3, 3)) if stride != 3 else rng.normal(size=(4, 3, 1, 1))
        if stride == 3:
            x = rng.normal(size=(2, 3, 7, 7))
        out = E.conv2d(E.Tensor(x), E.Tensor(k), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, brute_conv(x, k, stride, pad), rtol=1e-12, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ConfigError, match="C=2"):
            E.conv2d(E.Tensor(np.zeros((1, 2, 4, 4))), E.Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ConfigError, match="not integral"):
            E.conv2d(E.Tensor(np.zeros((1, 1, 6, 6))), E.Tensor(np.zeros((1, 1, 3, 3))), stride=2)
        with pytest.raises(ConfigError):
            E.conv2d(E.Tensor(np.zeros((1, 1, 2, 2))), E.Tensor(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        stride, pad = (1, 1) if seed % 2 else (2, 0)
        size = 5 if stride == 2 else 4
        x = leaf(rng.normal(size=(2, 2, size, size)))
        k = leaf(rng.normal(size=(3, 2, 3, 3)))
        w = rng.normal(size=E.conv2d(x, k, stride, pad).shape)
        assert E.gradcheck(lambda: E.sum_all(E.mul(E.conv2d(x, k, stride, pad), E.Tensor(w))), [x, k], **FD) <= 1


class TestReluMaxpool:
    def test_relu_cases(self):
        x = leaf([-1.0, 0.0, 2.0])
        y = E.relu(x)
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        E.backward(E.sum_all(y))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
    def test_relu_idempotent(self, a):
        once = E.relu(E.Tensor(a))
        np.testing.assert_array_equal(E.relu(once).data, once.data)

    def test_maxpool_window(self):
        out = E.maxpool2(E.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.data.reshape(()) == 4.0

    def test_maxpool_tie_goes_to_first(self):
        x = leaf(np.full((1, 1, 2, 2), 5.0))
        E.backward(E.sum_all(E.maxpool2(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_odd_extent(self):
        with pytest.raises(ConfigError):
            E.maxpool2(E.Tensor(np.zeros((1, 1, 3, 4))))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        def make(rng):
            x = leaf(rng.normal(size=(2, 2, 4, 6)))
            w = E.Tensor(rng.normal(size=(2, 2, 4, 6)))
            w2 = E.Tensor(rng.normal(size=(2, 2, 2, 3)))
            return lambda: E.add(E.sum_all(E.mul(E.relu(x), w)), E.sum_all(E.mul(E.maxpool2(x), w2))), [x]

        f, inputs = draw_smooth(100 + seed, make)
        assert E.gradcheck(f, inputs, **FD) <= 1


class TestGap:
    def test_constant(self):
        out = E.global_average_pool(E.Tensor(np.full((1, 2, 3, 3), 1.5)))
        np.testing.assert_array_equal(out.data, [[1.5, 1.5]])

    def test_mean(self):
        assert E.global_average_pool(E.Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])).data[0, 0] == 4.0

    def test_zeros(self):
        assert not E.global_average_pool(E.Tensor(np.zeros((2, 2, 2, 2)))).data.any()

    def test_grad_distribution(self):
        x = leaf(np.zeros((1, 1, 2, 3)))
        E.backward(E.sum_all(E.global_average_pool(x)))
        np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 3), 1 / 6))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = leaf(rng.normal(size=(2, 3, 3, 4)))
        w = rng.normal(size=(2, 3))
        assert E.gradcheck(lambda: E.sum_all(E.mul(E.global_average_pool(x), E.Tensor(w))), [x], **FD) <= 1


class TestGatherSpatial:
    def test_single(self):
        f = np.random.default_rng(3).normal(size=(4, 3, 3))
        out = E.gather_spatial(E.Tensor(f), [(0, 0)])
        np.testing.assert_array_equal(out.data, f[:, 0, 0][None])

    def test_duplicates_sum_in_backward(self):
        f = leaf(np.random.default_rng(4).normal(size=(2, 3, 3)))
        out = E.gather_spatial(f, [(1, 2), (1, 2)])
        np.testing.assert_array_equal(out.data[0], out.data[1])
        g = np.array([[1.0, 2.0], [10.0, 20.0]])
        E.backward(E.sum_all(E.mul(out, E.Tensor(g))))
        np.testing.assert_array_equal(f.grad[:, 1, 2], [11.0, 22.0])
        assert f.grad.sum() == 33.0

    def test_batched_form(self):
        f = np.random.default_rng(5).normal(size=(3, 2, 4, 4))
        out = E.gather_spatial(E.Tensor(f), [(2, 1, 3), (0, 0, 0)])
        np.testing.assert_array_equal(out.data, np.stack([f[2, :, 1, 3], f[0, :, 0, 0]]))

    def test_out_of_range(self):
        with pytest.raises(BoundsError, match=r"\(3, 0\)"):
            E.gather_spatial(E.Tensor(np.zeros((2, 3, 3))), [(0, 0), (3, 0)])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(300 + seed)
        f = leaf(rng.normal(size=(3, 4, 5)))
        coords = rng.integers(0, [4, 5], size=(6, 2))
        w = rng.normal(size=(6, 3))
        assert E.gradcheck(lambda: E.sum_all(E.mul(E.gather_spatial(f, coords), E.Tensor(w))), [f], **FD) <= 1

    def test_sum_gradcheck_relative(self):
        rng = np.random.default_rng(7)
        f = leaf(rng.normal(size=(3, 4, 4)))
        coords = rng.integers(0, 4, size=(5, 2))
        assert E.gradcheck(lambda: E.sum_all(E.gather_spatial(f, coords)), [f], eps=1e-4, rtol=1e-6, atol=1e-8) <= 1

    @pytest.mark.parametrize("seed", range(10))
    def test_scatter_is_adjoint(self, seed):
        rng = np.random.default_rng(400 + seed)
        f = leaf(rng.normal(size=(3, 5, 5)))
        coords = rng.integers(0, 5, size=(8, 2))
        g = rng.normal(size=(8, 3))
        out = E.gather_spatial(f, coords)
        E.backward(E.sum_all(E.mul(out, E.Tensor(g))))
        lhs = float(np.sum(out.data * g))
        rhs = float(np.sum(f.data * f.grad))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


class TestSoftmaxCrossEntropy:
    def test_uniform_two_classes(self):
        loss = E.softmax_cross_entropy(E.Tensor([[0.3, 0.3]]), [1])
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-15)

    def test_confident(self):
        loss = E.softmax_cross_entropy(E.Tensor([[10.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-12)
        assert loss.item() == pytest.approx(4.54e-5, rel=1e-3)

    @given(st.floats(-50, 50), st.integers(0, 4))
    def test_shift_invariance(self, c, label):
        z = np.random.default_rng(label).normal(size=(1, 5))
        a = E.softmax_cross_entropy(E.Tensor(z), [label]).item()
        b = E.softmax_cross_entropy(E.Tensor(z + c), [label]).item()
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)

    def test_extreme_logits_finite(self):
        loss = E.softmax_cross_entropy(E.Tensor([[1e4, -1e4, 0.0]]), [1])
        assert np.isfinite(loss.item())

    def test_bad_label(self):
        with pytest.raises(InputError):
            E.softmax_cross_entropy(E.Tensor([[0.0, 1.0]]), [2])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(500 + seed)
        z = leaf(rng.normal(size=(4, 5)) * 2)
        labels = rng.integers(0, 5, size=4)
        assert E.gradcheck(lambda: E.softmax_cross_entropy(z, labels), [z], **FD) <= 1


class TestSquaredL2Mean:
    def test_identity(self):
        a = np.random.default_rng(8).normal(size=(3, 4))
        assert E.squared_l2_mean(E.Tensor(a), E.Tensor(a)).item() == 0.0

    def test_example(self):
        assert E.squared_l2_mean(E.Tensor([[1.0, 0.0], [0.0, 1.0]]), E.Tensor(np.zeros((2, 2)))).item() == 1.0

    @given(st.floats(-10, 10))
    def test_homogeneity(self, c):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        base = E.squared_l2_mean(E.Tensor(a), E.Tensor(b)).item()
        scaled = E.squared_l2_mean(E.Tensor(c * a), E.Tensor(c * b)).item()
        assert scaled == pytest.approx(c * c * base, rel=1e-12, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            E.squared_l2_mean(E.Tensor(np.zeros((2, 3))), E.Tensor(np.zeros((3, 2))))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(600 + seed)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
        assert E.gradcheck(lambda: E.squared_l2_mean(a, b), [a, b], **FD) <= 1


class TestAlgebraGradcheck:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_rows_and_arith(self, seed):
        rng = np.random.default_rng(700 + seed)
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 3)))
        s = leaf(rng.normal())
        w = rng.normal(size=(2, 3))

        def f():
            m = E.mean_rows(E.concat_rows([a, b]))
            st_ = E.stack_rows([m, E.scale(m, 2.0)])
            return E.add(E.sum_all(E.mul(E.sub(st_, E.Tensor(w)), st_)), E.mul(s, s))

        assert E.gradcheck(f, [a, b, s], **FD) <= 1

    def test_no_broadcasting(self):
        with pytest.raises(InputError):
            E.add(E.Tensor(np.zeros(3)), E.Tensor(np.zeros(4)))
        out = E.add(E.Tensor(np.zeros(3)), E.Tensor(2.0))
        np.testing.assert_array_equal(out.data, [2.0, 2.0, 2.0])


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        E.backward(E.mul(x, x))
        assert x.grad == 6.0

    def test_constant_leaf_gets_zero(self):
        x, c = leaf(np.ones(3)), leaf(np.ones(3))
        loss = E.add(E.sum_all(x), E.scale(E.sum_all(c), 0.0))
        E.backward(loss)
        np.testing.assert_array_equal(c.grad, 0.0)
        unused = leaf(np.ones(2))
        E.backward(E.sum_all(x))
        np.testing.assert_array_equal(unused.grad, 0.0)

    def test_accumulates_until_reset(self):
        x = leaf(2.0)
        for _ in range(3):
            E.backward(E.mul(x, x))
        assert x.grad == 12.0
        x.zero_grad()
        assert x.grad == 0.0

    def test_non_scalar(self):
        with pytest.raises(UsageError):
            E.backward(E.relu(leaf(np.ones(2))))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_three_layer_graph(self, seed):
        def make(rng):
            x = leaf(rng.normal(size=(2, 2, 4, 4)))
            k1, k2 = leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=(3, 3, 3, 3)))
            k3 = leaf(rng.normal(size=(4, 3, 1, 1)))
            labels = rng.integers(0, 4, size=2)

            def f():
                h = E.relu(E.conv2d(x, k1, pad=1))
                h = E.relu(E.conv2d(E.maxpool2(h), k2, pad=1))
                return E.softmax_cross_entropy(E.global_average_pool(E.conv2d(h, k3)), labels)

            return f, [x, k1, k2, k3]

        f, inputs = draw_smooth(800 + seed, make)
        assert E.gradcheck(f, inputs, **FD) <= 1

    def test_kink_margin(self):
        x = leaf([[[[0.5, -0.002], [0.3, 0.1]]]])
        assert E.kink_margin(E.sum_all(E.relu(x))) == pytest.approx(0.002)
        assert E.kink_margin(E.sum_all(E.maxpool2(x))) == pytest.approx(0.2)

    def test_kink_margin_skips_clamped_windows(self):
        x = leaf([[[[-1.0, -2.0], [-3.0, -4.0]]]])
        assert E.kink_margin(E.sum_all(E.maxpool2(E.relu(x)))) == pytest.approx(1.0)

    def test_gradcheck_terms_reports_each_term(self):
        x = leaf(np.array([[0.3, -0.7, 1.1]]))
        ratios = E.gradcheck_terms(lambda: (E.sum_all(E.relu(x)), E.squared_l2_mean(x, E.Tensor(np.zeros((1, 3))))), [x], **FD)
        assert len(ratios) == 2 and max(ratios) <= 1

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(10)
        x, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
        a = E.conv2d(E.Tensor(x), E.Tensor(k), pad=1).data
        b = E.conv2d(E.Tensor(x), E.Tensor(k), pad=1).data
        assert a.tobytes() == b.tobytes()


class TestSGD:
    def test_plain_step(self):
        p = leaf(1.0)
        p.grad[...] = 2.0
        E.SGD([p], lr=0.1).step()
        assert p.data == pytest.approx(0.8, abs=1e-15)
        assert p.grad == 0.0

    def test_zero_lr(self):
        p = leaf([1.0, -2.0])
        p.grad[...] = 5.0
        opt = E.SGD([p], lr=0.1)
        opt.step(lr=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_momentum_two_steps(self):
        p = leaf(0.0)
        opt = E.SGD([p], lr=0.1, momentum=0.9)
        for _ in range(2):
            p.grad[...] = 1.0
            opt.step()
        assert p.data == pytest.approx(-0.29, abs=1e-15)

    def test_missing_grad(self):
        with pytest.raises(UsageError):
            E.SGD([E.Tensor(1.0)], lr=0.1).step()

    def test_bad_hyperparameters(self):
        with pytest.raises(ConfigError):
            E.SGD([leaf(1.0)], lr=0.0)
        with pytest.raises(ConfigError):
            E.SGD([leaf(1.0)], lr=0.1, momentum=1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_outputs_finite_on_finite_inputs(seed):
    rng = np.random.default_rng(seed)
    x = E.Tensor(rng.normal(size=(1, 2, 4, 4)) * 100)
    k = E.Tensor(rng.normal(size=(3, 2, 3, 3)))
    logits = E.global_average_pool(E.maxpool2(E.relu(E.conv2d(x, k, pad=1))))
    loss = E.softmax_cross_entropy(logits, [1])
    assert np.all(np.isfinite(logits.data)) and np.isfinite(loss.item())


def test_relu_propagates_nan():
    out = E.relu(E.Tensor([np.nan, -1.0, 2.0]))
    assert np.isnan(out.data[0]) and out.data[1:].tolist() == [0.0, 2.0]

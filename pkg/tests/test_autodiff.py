import numpy as np
import pytest

from epiunwarp import autodiff as ad
from epiunwarp.errors import ContractError, ShapeError


def scalar(x):
    return ad.Tensor(np.asarray(float(x)))


class TestArithmetic:
    def test_mean_example(self):
        assert ad.mean(ad.Tensor([1.0, 2.0, 3.0, 6.0])).item() == 3.0

    def test_diff_example(self):
        out = ad.diff(ad.Tensor([1.0, 4.0, 9.0]), axis=0)
        np.testing.assert_array_equal(out.data, [3.0, 5.0])

    def test_mean_gradient_is_one_over_n(self):
        x = ad.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mean(x)
        ad.backward(tape, y)
        np.testing.assert_allclose(x.grad, np.full((3, 4), 1.0 / 12.0), rtol=0, atol=0)

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))

    def test_operator_sugar_matches_ops(self):
        a = ad.Tensor([1.0, 2.0])
        b = ad.Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 7.0])
        np.testing.assert_array_equal((a - b).data, [-2.0, -3.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 10.0])
        np.testing.assert_array_equal((b / a).data, [3.0, 2.5])
        np.testing.assert_array_equal((2.0 * a + 1.0).data, [3.0, 5.0])


class TestBackward:
    def test_quadratic_gradient(self):
        x = scalar(3.0)
        x.requires_grad = True
        with ad.Tape() as tape:
            loss = ad.mean(ad.square(x - 1.0))
        ad.backward(tape, loss)
        assert x.grad == pytest.approx(2.0 * (3.0 - 1.0), abs=1e-15)

    def test_reuse_accumulates(self):
        x = scalar(5.0)
        x.requires_grad = True
        with ad.Tape() as tape:
            y = x + x
        ad.backward(tape, y)
        assert x.grad == pytest.approx(2.0, abs=0)

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.square(x)
        with pytest.raises(ContractError):
            ad.backward(tape, y)

    def test_backward_deterministic_bitwise(self):
        def run():
            rng = np.random.default_rng(42)
            x = ad.Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
            k = ad.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
            b = ad.Tensor(rng.normal(size=3), requires_grad=True)
            with ad.Tape() as tape:
                y = ad.mean(ad.square(ad.leaky_relu(ad.conv_nd(x, k, b, stride=2), 0.2)))
            ad.backward(tape, y)
            return x.grad.copy(), k.grad.copy(), b.grad.copy()

        first = run()
        second = run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


class TestLeakyRelu:
    def test_definition(self):
        out = ad.leaky_relu(ad.Tensor([2.0, -2.0]), slope=0.2)
        np.testing.assert_allclose(out.data, [2.0, -0.4], rtol=0, atol=1e-15)

    def test_nonnegative_identity(self):
        x = np.abs(np.random.default_rng(0).normal(size=16))
        out = ad.leaky_relu(ad.Tensor(x), slope=0.2)
        np.testing.assert_array_equal(out.data, x)

    def test_gradient(self):
        x = ad.Tensor([3.0, -3.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.tsum(ad.leaky_relu(x, slope=0.2))
        ad.backward(tape, y)
        np.testing.assert_allclose(x.grad, [1.0, 0.2], rtol=0, atol=0)


class TestUpsample:
    def test_definition(self):
        x = ad.Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        out = ad.upsample_nearest(x, 2)
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(out.data[0], expected)

    def test_factor_one_identity(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 4))
        out = ad.upsample_nearest(ad.Tensor(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_backward_sums_replication_blocks(self):
        x = ad.Tensor(np.zeros((1, 3, 3)), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.tsum(ad.upsample_nearest(x, 2))
        ad.backward(tape, y)
        np.testing.assert_array_equal(x.grad, np.full((1, 3, 3), 4.0))


class TestConcat:
    def test_shape_arithmetic(self):
        a = ad.Tensor(np.zeros((1, 4, 4)))
        b = ad.Tensor(np.zeros((2, 4, 4)))
        assert ad.concat_channels(a, b).shape == (3, 4, 4)

    def test_concat_zero_slice_back(self):
        a = np.random.default_rng(2).normal(size=(2, 4, 4))
        out = ad.concat_channels(ad.Tensor(a), ad.Tensor(np.zeros((1, 4, 4))))
        np.testing.assert_array_equal(out.data[:2], a)

    def test_gradient_round_trip(self):
        rng = np.random.default_rng(3)
        a = ad.Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        upstream = rng.normal(size=(5, 4, 4))
        with ad.Tape() as tape:
            y = ad.tsum(ad.mul(ad.concat_channels(a, b), ad.Tensor(upstream)))
        ad.backward(tape, y)
        np.testing.assert_array_equal(a.grad, upstream[:2])
        np.testing.assert_array_equal(b.grad, upstream[2:])

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat_channels(ad.Tensor(np.zeros((1, 4, 4))),
                               ad.Tensor(np.zeros((1, 5, 4))))


class TestLinearSamplePE:
    def test_integer_shift_with_zero_fill(self):
        img = ad.Tensor([10.0, 20.0, 30.0, 40.0])
        disp = ad.Tensor(np.ones(4))
        out = ad.linear_sample_pe(img, disp, 0)
        np.testing.assert_array_equal(out.data, [20.0, 30.0, 40.0, 0.0])

    def test_zero_displacement_identity_bitwise(self):
        img = np.random.default_rng(4).normal(size=(6, 5))
        out = ad.linear_sample_pe(ad.Tensor(img), ad.Tensor(np.zeros((6, 5))), 0)
        assert np.array_equal(out.data, img)

    def test_half_voxel_interpolation(self):
        img = ad.Tensor([0.0, 1.0, 2.0, 3.0])
        disp = ad.Tensor(np.full(4, 0.5))
        out = ad.linear_sample_pe(img, disp, 0)
        np.testing.assert_allclose(out.data, [0.5, 1.5, 2.5, 1.5], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("shift", [-3, -1, 1, 2])
    def test_any_integer_shift_bitwise(self, shift):
        img = np.random.default_rng(5).normal(size=(8, 7))
        out = ad.linear_sample_pe(ad.Tensor(img),
                                  ad.Tensor(np.full((8, 7), float(shift))), 0).data
        expected = np.zeros_like(img)
        if shift > 0:
            expected[:-shift] = img[shift:]
        else:
            expected[-shift:] = img[:shift]
        assert np.array_equal(out, expected)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        img = ad.Tensor(rng.normal(size=(8, 6)), requires_grad=True)
        # keep sample positions away from integers so the interpolant is smooth
        disp = ad.Tensor(rng.uniform(0.2, 0.8, size=(8, 6)), requires_grad=True)
        ref = ad.Tensor(rng.normal(size=(8, 6)))

        def loss_img(t):
            return ad.mean(ad.square(ad.linear_sample_pe(t, disp, 0) - ref))

        def loss_disp(t):
            return ad.mean(ad.square(ad.linear_sample_pe(img, t, 0) - ref))

        assert ad.grad_check(loss_img, img) < 1e-4
        assert ad.grad_check(loss_disp, disp) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.linear_sample_pe(ad.Tensor(np.zeros((4, 4))),
                                ad.Tensor(np.zeros((4, 5))), 0)


class TestConv:
    def test_box_sum_with_zero_padding(self):
        x = ad.Tensor(np.ones((1, 4, 4)))
        k = ad.Tensor(np.ones((1, 1, 3, 3)))
        b = ad.Tensor(np.zeros(1))
        out = ad.conv_nd(x, k, b, stride=1).data[0]
        assert out[1, 1] == 9.0 and out[2, 2] == 9.0
        assert out[0, 0] == 4.0 and out[3, 3] == 4.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 6))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = 1.0
        k[1, 1, 1, 1] = 1.0
        out = ad.conv_nd(ad.Tensor(x), ad.Tensor(k), ad.Tensor(np.zeros(2)), 1)
        assert np.array_equal(out.data, x)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ad.conv_nd(ad.Tensor(np.zeros((2, 4, 4))),
                       ad.Tensor(np.zeros((1, 3, 3, 3))),
                       ad.Tensor(np.zeros(1)), 1)

    def test_strided_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        x = ad.Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        k = ad.Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=4), requires_grad=True)

        def make(which, holder={"x": x, "k": k, "b": b}):
            def f(t):
                args = dict(holder)
                args[which] = t
                return ad.mean(ad.square(ad.conv_nd(args["x"], args["k"], args["b"], 2)))
            return f

        assert ad.grad_check(make("x"), x) < 1e-4
        assert ad.grad_check(make("k"), k) < 1e-4
        assert ad.grad_check(make("b"), b) < 1e-4

    def test_3d_gradients(self):
        rng = np.random.default_rng(9)
        x = ad.Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
        k = ad.Tensor(rng.normal(size=(3, 2, 3, 3, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=3), requires_grad=True)

        def f(t):
            return ad.mean(ad.square(ad.conv_nd(x, k if t is not k else t, b, (2, 2, 1))))

        assert ad.grad_check(f, k) < 1e-4


class TestWindowSum:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(6, 7))
        out = ad.window_sum(ad.Tensor(a), (3, 5)).data
        expected = np.zeros_like(a)
        for i in range(6):
            for j in range(7):
                for u in range(i - 1, i + 2):
                    for v in range(j - 2, j + 3):
                        if 0 <= u < 6 and 0 <= v < 7:
                            expected[i, j] += a[u, v]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_backward_is_window_sum(self):
        rng = np.random.default_rng(11)
        x = ad.Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        up = rng.normal(size=(5, 5))
        with ad.Tape() as tape:
            y = ad.tsum(ad.mul(ad.window_sum(x, (3, 3)), ad.Tensor(up)))
        ad.backward(tape, y)
        expected = ad.window_sum(ad.Tensor(up), (3, 3)).data
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)


class TestGradCheck:
    def test_sum_of_squares(self):
        # values bounded away from 0 so FD cancellation noise stays tiny
        rng = np.random.default_rng(12)
        x = ad.Tensor(rng.uniform(0.5, 2.0, size=6) * rng.choice([-1.0, 1.0], size=6),
                      requires_grad=True)
        assert ad.grad_check(lambda t: ad.tsum(ad.square(t)), x) < 1e-9

    def test_linear_map_is_near_exact(self):
        # central differences are exact for linear maps; what remains is
        # roundoff in the two function evaluations, ~eps*f/step
        x = ad.Tensor(np.random.default_rng(13).normal(size=8), requires_grad=True)
        w = ad.Tensor(np.random.default_rng(14).normal(size=8))
        assert ad.grad_check(lambda t: ad.tsum(ad.mul(t, w)), x) < 1e-9

    def test_leaky_relu_mean_composition(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(6, 6))
        x[np.abs(x) < 0.1] = 0.5  # keep away from the kink
        xt = ad.Tensor(x, requires_grad=True)
        assert ad.grad_check(lambda t: ad.mean(ad.leaky_relu(t, 0.2)), xt) < 1e-7


PRIMITIVES = [
    ("add", lambda t, o: ad.mean(ad.square(ad.add(t, o)))),
    ("sub", lambda t, o: ad.mean(ad.square(ad.sub(t, o)))),
    ("mul", lambda t, o: ad.mean(ad.square(ad.mul(t, o)))),
    ("div", lambda t, o: ad.mean(ad.square(ad.div(t, o)))),
    ("neg", lambda t, o: ad.mean(ad.square(ad.neg(t)))),
    ("square", lambda t, o: ad.mean(ad.square(t))),
    ("sqrt", lambda t, o: ad.mean(ad.sqrt(ad.add_scalar(ad.square(t), 1.0)))),
    ("sum", lambda t, o: ad.square(ad.tsum(t))),
    ("mean", lambda t, o: ad.square(ad.mean(t))),
    ("diff", lambda t, o: ad.mean(ad.square(ad.diff(t, 0)))),
    ("window_sum", lambda t, o: ad.mean(ad.square(ad.window_sum(t, (3, 3))))),
    ("reshape", lambda t, o: ad.mean(ad.square(ad.reshape(t, (36,))))),
    ("leaky_relu", lambda t, o: ad.mean(ad.square(ad.leaky_relu(t, 0.2)))),
    ("upsample", lambda t, o: ad.mean(ad.square(ad.upsample_nearest(ad.reshape(t, (1, 6, 6)), 2)))),
    ("concat", lambda t, o: ad.mean(ad.square(ad.concat_channels(
        ad.reshape(t, (1, 6, 6)), ad.reshape(o, (1, 6, 6)))))),
    ("warp", lambda t, o: ad.mean(ad.square(ad.linear_sample_pe(
        t, ad.mul_scalar(ad.leaky_relu(o, 0.5), 0.3), 0)))),
]


@pytest.mark.parametrize("name,fn", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_every_primitive_gradient_over_20_seeds(name, fn):
    """Analytic gradients agree with central differences at 64-bit.

    Inputs are kept >= 10x the step away from non-differentiable points
    (LeakyReLU kink, integer warp positions).
    """
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 6))
        x[np.abs(x) < 1e-3] = 0.25
        other = ad.Tensor(rng.uniform(0.5, 1.5, size=(6, 6)))
        xt = ad.Tensor(x, requires_grad=True)
        worst = max(worst, ad.grad_check(lambda t: fn(t, other), xt, step=1e-5))
    assert worst < 1e-4, f"{name}: max relative error {worst}"

import numpy as np
import pytest

from spikegrad.errors import ContractError, DimensionError
from spikegrad.gradcheck import gradcheck, relative_error
from spikegrad.losses import cross_entropy
from spikegrad.tensor import (
    Tape, Tensor, add, avgpool2d, backward, conv2d, conv_output_size, custom_node, flatten,
    get_default_dtype, heaviside_detached, index_select, matmul, mean, mul, precision, repeat_leading,
    reshape, scale, stack, sub, sum_over_axes,
)


def rand(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape))


def conv_reference(x, k, stride, padding):
    """Direct seven-loop convolution."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, ic, i * stride + di, j * stride + dj] * k[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


# -- forward examples ---------------------------------------------------------


def test_default_dtype_is_float32():
    assert get_default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_matmul_identity_and_hand_case():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2, 3], [4, 5]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_ones_gives_nine():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_stride2_corner_kernel_subsamples():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    k = np.zeros((1, 1, 2, 2))
    k[0, 0, 0, 0] = 1.0
    out = conv2d(Tensor(x), Tensor(k), stride=2, padding=0)
    np.testing.assert_array_equal(out.data[0, 0], x[0, 0, ::2, ::2])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (1, 2)])
def test_conv2d_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    with precision(np.float64):
        out = conv2d(Tensor(x), Tensor(k), stride, padding).data
    np.testing.assert_allclose(out, conv_reference(x, k, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_invalid_geometry():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), 1, 0)
    assert conv_output_size(28, 5, 1, 2) == 28
    assert conv_output_size(8, 3, 2, 1) == 4


def test_avgpool_examples():
    out = avgpool2d(Tensor(np.full((2, 3, 4, 4), 0.7)), 2)
    np.testing.assert_allclose(out.data, 0.7, rtol=1e-6)
    assert avgpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).data.item() == 2.5
    with pytest.raises(DimensionError):
        avgpool2d(Tensor(np.ones((1, 1, 5, 4))), 2)


def test_heaviside_strict():
    out = heaviside_detached(Tensor([-0.5, 0.5, 0.0]))
    assert out.data.tolist() == [0.0, 1.0, 0.0]


def test_sum_over_time_of_ones():
    assert sum_over_axes(Tensor(np.ones(10)), axis=0).item() == 10.0


def test_elementwise_shape_errors():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


# -- backward -----------------------------------------------------------------


def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_product_sum():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    y = Tensor(rng.standard_normal(5), requires_grad=True)
    with Tape():
        backward((x * y).sum())
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_reused_leaf_accumulates():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape():
        backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            backward(scale(x, 3.0).sum())
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar_and_unrecorded():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(ContractError):
            backward(x * 2.0)
    with pytest.raises(ContractError):
        backward((x * 2.0).sum())


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    assert y._tape is None


def test_custom_node_scaled_backward():
    x = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    upstream = np.array([0.3, -0.2, 1.5])
    with Tape():
        y = custom_node(x, lambda a: a.copy(), lambda g: 2 * g)
        backward((y * Tensor(upstream)).sum())
    np.testing.assert_allclose(x.grad, 2 * upstream)


def test_custom_node_zero_backward():
    x = Tensor(np.ones(4), requires_grad=True)
    with Tape():
        y = custom_node(x, lambda a: a * 3, lambda g: np.zeros_like(g))
        backward(y.sum())
    np.testing.assert_array_equal(x.grad, np.zeros(4))


def test_custom_node_bad_backward_shape():
    x = Tensor(np.ones(4), requires_grad=True)
    with Tape():
        y = custom_node(x, lambda a: a.copy(), lambda g: np.ones(3))
        with pytest.raises(DimensionError):
            backward(y.sum())


# -- gradient checks (float64) --------------------------------------------------


GRAD_CASES = {
    "add": lambda a, b: add(a, b).sum(),
    "sub": lambda a, b: sub(a, b).sum(),
    "mul": lambda a, b: (mul(a, b) * a).sum(),
    "scale": lambda a, b: (scale(a, -1.7) * b).sum(),
    "mean": lambda a, b: (mean(mul(a, b), axis=1) * mean(a, axis=1)).sum(),
    "sum_axes": lambda a, b: (sum_over_axes(mul(a, b), axis=0) * sum_over_axes(a, axis=0)).sum(),
    "reshape": lambda a, b: (reshape(a, (12,)) * reshape(b, (12,))).sum(),
    "index": lambda a, b: (a[1] * b[2] + a[1] * a[0]).sum(),
    "stack": lambda a, b: (stack([a, b, a]) * stack([b, b, a])).sum(),
    "matmul": lambda a, b: (matmul(a, reshape(b, (4, 3))) * matmul(a, reshape(b, (4, 3)))).sum(),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_elementwise_gradcheck(name):
    fn = GRAD_CASES[name]
    with precision(np.float64):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            a, b = rand(rng, 3, 4), rand(rng, 3, 4)
            assert gradcheck(lambda: fn(a, b), [a, b]) < 1e-4


def test_leading_axis_broadcast_gradcheck():
    with precision(np.float64):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 5, 3, 4), rand(rng, 3, 4)
        w = Tensor(rng.standard_normal((5, 3, 4)))
        assert gradcheck(lambda: (mul(add(a, b), w) * b).sum(), [a, b]) < 1e-4


def test_repeat_leading_and_flatten_gradcheck():
    with precision(np.float64):
        rng = np.random.default_rng(2)
        a = rand(rng, 2, 3, 2)
        w = Tensor(rng.standard_normal((4, 2, 6)))
        assert gradcheck(lambda: (flatten(repeat_leading(a, 4), start=2) * w).sum(), [a]) < 1e-4
        idx = (slice(None), slice(1, 3))
        assert gradcheck(lambda: (index_select(a, idx) * index_select(a, idx)).sum(), [a]) < 1e-4


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 2)])
def test_conv2d_gradcheck(stride, padding):
    with precision(np.float64):
        rng = np.random.default_rng(3 + stride + padding)
        x, k = rand(rng, 2, 2, 5, 5), rand(rng, 3, 2, 3, 3)
        w = None

        def fn():
            nonlocal w
            y = conv2d(x, k, stride, padding)
            if w is None:
                w = Tensor(np.random.default_rng(9).standard_normal(y.shape))
            return (y * w).sum()

        assert gradcheck(fn, [x, k]) < 1e-4


def test_avgpool_gradcheck():
    with precision(np.float64):
        rng = np.random.default_rng(4)
        x = rand(rng, 2, 3, 4, 6)
        w = Tensor(rng.standard_normal((2, 3, 2, 3)))
        assert gradcheck(lambda: (avgpool2d(x, 2) * w).sum(), [x]) < 1e-4


def test_composite_conv_pool_dense_ce_gradcheck():
    with precision(np.float64):
        rng = np.random.default_rng(5)
        x = rand(rng, 3, 1, 6, 6)
        k = rand(rng, 2, 1, 3, 3)
        wd = rand(rng, 18, 4)
        labels = np.array([0, 3, 1])

        def fn():
            h = avgpool2d(conv2d(x, k, 1, 1), 2)
            return cross_entropy(matmul(flatten(h), wd), labels)

        assert gradcheck(fn, [x, k, wd]) < 1e-4


# -- properties -----------------------------------------------------------------


def test_backward_is_linear():
    with precision(np.float64):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        w1, w2 = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal((4, 3)))
        a, b = 0.7, -2.3

        def grad_of(fn):
            x.grad = None
            with Tape():
                backward(fn())
            return x.grad.copy()

        l1 = lambda: (matmul(x, w1) * matmul(x, w1)).sum()
        l2 = lambda: (x * w2 * x * x).sum()
        combined = grad_of(lambda: add(scale(l1(), a), scale(l2(), b)))
        expected = a * grad_of(l1) + b * grad_of(l2)
        np.testing.assert_allclose(combined, expected, rtol=1e-6, atol=1e-12)


def test_forward_determinism_and_tape_replay():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    outs = []
    for _ in range(2):
        with Tape():
            y = avgpool2d(conv2d(Tensor(x), k, 1, 1), 2)
            outs.append(y.data.copy())
    np.testing.assert_array_equal(outs[0], outs[1])


def test_relative_error_zero_when_both_vanish():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

import numpy as np
import pytest

from delnet import ops
from delnet.gradcheck import check_gradients, relative_error
from delnet.gradsuite import OP_TOLERANCE, block_cases, op_cases
from delnet.tensor import ShapeError, Tape, Tensor

from oracles import conv2d_loops


def random_conv_case(rng):
    stride = int(rng.integers(1, 4))
    dilation = int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3, 5]))
    padding = int(rng.integers(0, 4))
    span = dilation * (k - 1) + 1
    h = int(rng.integers(max(1, span - 2 * padding), span + 6))
    w = int(rng.integers(max(1, span - 2 * padding), span + 6))
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout) if rng.random() < 0.5 else None
    return x, wt, b, stride, padding, dilation


def test_conv2d_matches_nested_loops_on_100_cases():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(100):
        x, w, b, s, p, d = random_conv_case(rng)
        got = ops.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b),
                         stride=s, padding=p, dilation=d).data
        want = conv2d_loops(x, w, b, s, p, d)
        assert got.shape == want.shape
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-10


def test_conv2d_channel_mismatch_names_shapes():
    with pytest.raises(ShapeError) as err:
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 4, 3, 3))))
    assert "(1, 2, 4, 4)" in str(err.value) and "(3, 4, 3, 3)" in str(err.value)


def test_conv2d_output_too_small():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_conv_mac_count():
    with ops.count_macs() as c:
        ops.conv2d(Tensor(np.ones((2, 3, 8, 6))), Tensor(np.ones((4, 3, 3, 3))), padding=1)
    assert c.total == 2 * 4 * 8 * 6 * 3 * 9


def test_strided_conv_mac_count():
    with ops.count_macs() as c:
        ops.downsample(Tensor(np.ones((1, 2, 8, 8))), Tensor(np.ones((5, 2, 3, 3))))
    assert c.total == 1 * 5 * 4 * 4 * 2 * 9


def test_elementwise_and_free_op_counts():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with ops.count_macs() as c:
        ops.sigmoid(x)
        ops.concat_channels(x, x)
        ops.upsample_nearest(x)
    assert c.total == 32
    assert c.by_op["concat"] == 0


def test_downsample_requires_even_extents():
    with pytest.raises(ShapeError):
        ops.downsample(Tensor(np.ones((1, 1, 5, 4))), Tensor(np.ones((1, 1, 3, 3))))


def test_upsample_doubles_extents():
    y = ops.upsample(Tensor(np.ones((1, 2, 3, 5))), Tensor(np.ones((4, 2, 3, 3))))
    assert y.shape == (1, 4, 6, 10)


def test_upsample_nearest_values():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(ops.upsample_nearest(x).data[0, 0],
                                  [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_avg_pool2_floors_odd_extents():
    x = Tensor(np.arange(15.0).reshape(1, 1, 3, 5))
    y = ops.avg_pool2(x)
    assert y.shape == (1, 1, 1, 2)
    np.testing.assert_allclose(y.data[0, 0], [[3.0, 5.0]])


def test_channel_max_tie_goes_to_lowest_channel():
    x = Tensor(np.ones((1, 3, 1, 1)), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.channel_pool(x, "max"))
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(x).ravel(), [1.0, 0.0, 0.0])


def test_channel_pool_mode_checked():
    with pytest.raises(ValueError):
        ops.channel_pool(Tensor(np.ones((1, 2, 2, 2))), "median")


def test_clamp_boundaries_pass_gradient():
    x = Tensor(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.clamp(x, 0.0, 1.0))
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(x), [0, 1, 1, 1, 0])


def test_maximum_tie_goes_to_input():
    x = Tensor(np.array([0.5, 1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.maximum(x, 1.0))
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(x), [0, 1, 1])


def test_power_gradient_at_zero_is_finite():
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.power(x, 0.5))
    tape.backward(y)
    np.testing.assert_allclose(tape.grad(x), [0.0, 0.25])


def test_sigmoid_is_stable_for_large_inputs():
    y = ops.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(y))


def test_prelu_values():
    x = Tensor(np.array([-2.0, 3.0]).reshape(1, 2, 1, 1))
    np.testing.assert_allclose(ops.prelu(x, Tensor(np.array([0.25, 0.5]))).data.ravel(), [-0.5, 3.0])


def test_relative_error_is_normwise():
    assert relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0


@pytest.mark.parametrize("name,fn,inputs", op_cases(), ids=[c[0] for c in op_cases()])
def test_op_gradients(name, fn, inputs):
    result = check_gradients(fn, inputs, name, tolerance=OP_TOLERANCE)
    assert result.passed, f"{name}: {result.rel_error:.3e}"
    assert result.magnitude > 0


@pytest.mark.parametrize("name,fn,inputs", block_cases(), ids=[c[0] for c in block_cases()])
def test_block_gradients(name, fn, inputs):
    result = check_gradients(fn, inputs, name, tolerance=OP_TOLERANCE)
    assert result.passed, f"{name}: {result.rel_error:.3e}"
    assert result.magnitude > 0


def test_gradcheck_detects_a_wrong_backward():
    def bad_square(x):
        from delnet.ops import _emit
        return _emit("bad", x.data ** 2, [x], lambda g: (g * x.data,))  # missing factor 2

    x = Tensor(np.random.default_rng(0).uniform(0.5, 1.5, 5), requires_grad=True)
    assert not check_gradients(bad_square, [x]).passed

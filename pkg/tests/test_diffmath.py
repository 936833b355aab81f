"""Reverse-mode engine tests: frozen value examples, finite-difference
oracles for every primitive, tape mechanics, and the restricted broadcast
rule."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynfield import diffmath as dm
from dynfield.diffmath import DTensor, ShapeError, Tape


@pytest.fixture(autouse=True)
def _test_profile():
    dm.set_profile("test")
    yield
    dm.set_profile("test")


def fd_grad(f, x, step=1e-6):
    """Dense central-difference gradient of scalar-valued f at numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def backward_of(build, *arrays):
    """Run build(*leaves) under a tape, backward the scalar result."""
    leaves = [DTensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*leaves)
    tape.backward(loss)
    return [leaf.grad for leaf in leaves]


# ---------------------------------------------------------------- values


def test_add_values():
    out = dm.add(dm.tensor([1.0, 2.0]), dm.tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_softmax_uniform():
    out = dm.softmax(dm.tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=0)


def test_matmul_identity():
    x = np.arange(12.0).reshape(3, 4)
    out = dm.matmul(dm.tensor(np.eye(3)), dm.tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_sum_elementwise_square_grad():
    (g,) = backward_of(lambda x: dm.sum_(dm.mul(x, x)), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(g, [2.0, 4.0, 6.0], atol=1e-12)


def test_sigmoid_grad_at_zero():
    (g,) = backward_of(lambda x: dm.sigmoid(x), np.array(0.0))
    assert abs(g - 0.25) < 1e-12


def test_profiles_fix_dtype():
    dm.set_profile("train")
    assert dm.tensor([1.0]).dtype == np.float32
    dm.set_profile("test")
    assert dm.tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        dm.set_profile("half")


# ---------------------------------------------------------------- tape mechanics


def test_tape_records_in_execution_order():
    with Tape() as tape:
        a = dm.tensor([1.0], requires_grad=True)
        b = dm.mul(a, 2.0)
        c = dm.add(b, 1.0)
        d = dm.sum_(c)
    ids = [rec.out_id for rec in tape._records]
    assert ids == [b.node_id, c.node_id, d.node_id]
    tape.backward(d)


def test_constants_never_accumulate_grad():
    const = dm.tensor([1.0, 2.0])
    x = dm.tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        loss = dm.sum_(dm.mul(x, const))
    grads = tape.backward(loss)
    assert x.node_id in grads
    assert const.node_id not in grads
    assert const.grad is None


def test_tape_cleared_after_backward():
    x = dm.tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = dm.sum_(dm.mul(x, x))
    tape.backward(loss)
    assert len(tape) == 0
    with pytest.raises(ValueError):
        tape.backward(loss)


def test_backward_requires_scalar_loss():
    x = dm.tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = dm.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_backward_bit_identical_across_runs():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((8, 8))
    x = rng.standard_normal((4, 8))

    def run():
        leaf = DTensor(w.copy(), requires_grad=True)
        with Tape() as tape:
            h = dm.relu(dm.matmul(DTensor(x), leaf))
            loss = dm.sum_(dm.mul(h, h))
        tape.backward(loss)
        return leaf.grad

    g1, g2 = run(), run()
    assert g1.tobytes() == g2.tobytes()


def test_fanout_accumulates_once_per_consumer():
    # y = x*x + 3x uses x in two places; dy/dx = 2x + 3
    (g,) = backward_of(lambda x: dm.sum_(dm.add(dm.mul(x, x), dm.mul(x, 3.0))),
                       [1.0, -2.0])
    np.testing.assert_allclose(g, [5.0, -1.0], atol=1e-12)


def test_unreached_leaf_gets_zero_grad():
    x = dm.tensor([1.0], requires_grad=True)
    y = dm.tensor([2.0], requires_grad=True)
    with Tape() as tape:
        lead = dm.sum_(dm.mul(x, x))
        dm.mul(y, y)  # recorded but not part of the loss
    grads = tape.backward(lead)
    np.testing.assert_array_equal(grads[y.node_id].data, [0.0])


def test_nonfinite_loss_rejected():
    x = dm.tensor([1e308], requires_grad=True)
    with np.errstate(over="ignore"):
        with Tape() as tape:
            loss = dm.sum_(dm.exp(dm.mul(x, x)))
        with pytest.raises(dm.NumericalError):
            tape.backward(loss)


# ---------------------------------------------------------------- broadcast rule


def test_suffix_broadcast_allowed():
    bias = dm.tensor([1.0, 2.0], requires_grad=True)
    x = dm.tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = dm.sum_(dm.add(x, bias))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[bias.node_id].data, [3.0, 3.0])


def test_numpy_legal_alignments_rejected():
    with pytest.raises(ShapeError):
        dm.add(dm.tensor(np.zeros((4, 1))), dm.tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        dm.mul(dm.tensor(np.zeros((4, 1))), dm.tensor(np.zeros((1, 5))))
    with pytest.raises(ShapeError):
        dm.add(dm.tensor(np.zeros((2, 3))), dm.tensor(np.zeros((2, 1))))


def test_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError) as err:
        dm.add(dm.tensor(np.zeros((2, 3))), dm.tensor(np.zeros((4,))))
    assert "(2, 3)" in str(err.value) and "(4,)" in str(err.value)


def test_broadcast_op_and_grad():
    x = dm.tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        big = dm.broadcast(x, (5, 2))
        loss = dm.sum_(big)
    grads = tape.backward(loss)
    assert big.shape == (5, 2)
    np.testing.assert_array_equal(grads[x.node_id].data, [5.0, 5.0])
    with pytest.raises(ShapeError):
        dm.broadcast(dm.tensor(np.zeros((2, 3))), (3,))


# ---------------------------------------------------------------- FD oracles per op


def _leafify(arr):
    return DTensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


@pytest.mark.parametrize("opname", ["exp", "log", "sin", "cos", "sqrt", "relu",
                                    "sigmoid", "softplus", "tanh"])
def test_unary_ops_match_fd(opname):
    rng = np.random.default_rng(hash(opname) % 2**32)
    x = rng.uniform(0.2, 2.0, size=(3, 4))  # positive domain works for all
    if opname == "relu":
        x = x - 1.0  # exercise both sides of the kink away from zero
        x[np.abs(x) < 0.05] = 0.5
    op = getattr(dm, opname)
    err = dm.grad_check(lambda t: op(t), DTensor(x))
    assert err < 1e-6, f"{opname}: {err}"


def test_softmax_matches_fd():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 7))
    err = dm.grad_check(lambda t: dm.softmax(t, axis=1), DTensor(x))
    assert err < 1e-6


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
def test_sum_mean_match_fd(axis, keepdims):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5))
    for op in (dm.sum_, dm.mean):
        err = dm.grad_check(lambda t: op(t, axis=axis, keepdims=keepdims), DTensor(x))
        assert err < 1e-6


def test_matmul_matches_fd_all_rank_cases():
    rng = np.random.default_rng(5)
    a2 = rng.standard_normal((4, 3))
    b2 = rng.standard_normal((3, 5))
    ab = rng.standard_normal((2, 4, 3))
    bb = rng.standard_normal((2, 3, 5))
    # gradient wrt each operand, in each rank pairing
    assert dm.grad_check(lambda t: dm.matmul(t, DTensor(b2)), DTensor(a2)) < 1e-6
    assert dm.grad_check(lambda t: dm.matmul(DTensor(a2), t), DTensor(b2)) < 1e-6
    assert dm.grad_check(lambda t: dm.matmul(t, DTensor(b2)), DTensor(ab)) < 1e-6
    assert dm.grad_check(lambda t: dm.matmul(DTensor(ab), t), DTensor(b2)) < 1e-6
    assert dm.grad_check(lambda t: dm.matmul(t, DTensor(bb)), DTensor(ab)) < 1e-6
    assert dm.grad_check(lambda t: dm.matmul(DTensor(ab), t), DTensor(bb)) < 1e-6
    assert dm.grad_check(lambda t: dm.matmul(t, DTensor(bb)), DTensor(a2)) < 1e-6
    with pytest.raises(ShapeError):
        dm.matmul(dm.tensor(np.zeros(3)), dm.tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        dm.matmul(dm.tensor(np.zeros((2, 3))), dm.tensor(np.zeros((4, 2))))


def test_concat_slice_reshape_match_fd():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((2, 4))

    err = dm.grad_check(lambda t: dm.concat([t, DTensor(y)], axis=0), DTensor(x))
    assert err < 1e-6
    err = dm.grad_check(lambda t: dm.slice_axis(t, 1, 1, 3), DTensor(x))
    assert err < 1e-6
    err = dm.grad_check(lambda t: dm.reshape(t, (4, 3)), DTensor(x))
    assert err < 1e-6
    with pytest.raises(ShapeError):
        dm.slice_axis(dm.tensor(x), 1, 2, 9)


def test_gather_matches_fd_with_duplicates():
    rng = np.random.default_rng(13)
    grid = rng.standard_normal((5, 6, 3))
    iv = np.array([0, 4, 2, 2, 2])
    iu = np.array([0, 5, 3, 3, 1])
    err = dm.grad_check(lambda t: dm.gather_hw(t, iv, iu), DTensor(grid))
    assert err < 1e-6
    with pytest.raises(ShapeError):
        dm.gather_hw(dm.tensor(grid), np.array([5]), np.array([0]))


def test_bilinear_matches_fd_in_grid_and_coords():
    rng = np.random.default_rng(17)
    grid = rng.standard_normal((6, 7, 2))
    v = rng.uniform(0.3, 4.6, size=8)
    u = rng.uniform(0.3, 5.6, size=8)
    v += np.where(np.abs(v - np.round(v)) < 0.05, 0.11, 0.0)
    u += np.where(np.abs(u - np.round(u)) < 0.05, 0.11, 0.0)

    err = dm.grad_check(lambda t: dm.bilinear_hw(t, DTensor(v), DTensor(u)), DTensor(grid))
    assert err < 1e-6
    err = dm.grad_check(lambda t: dm.bilinear_hw(DTensor(grid), t, DTensor(u)), DTensor(v))
    assert err < 1e-6
    err = dm.grad_check(lambda t: dm.bilinear_hw(DTensor(grid), DTensor(v), t), DTensor(u))
    assert err < 1e-6


def test_bilinear_clamps_and_zeroes_coord_grad_outside():
    grid = DTensor(np.arange(12.0).reshape(3, 4, 1))
    v = DTensor(np.array([-3.0, 5.0]), requires_grad=True)
    u = DTensor(np.array([1.5, 1.5]), requires_grad=True)
    with Tape() as tape:
        out = dm.bilinear_hw(grid, v, u)
        loss = dm.sum_(out)
    grads = tape.backward(loss)
    # clamped to rows 0 and 2
    np.testing.assert_allclose(out.data[:, 0], [1.5, 9.5])
    np.testing.assert_array_equal(grads[v.node_id].data, [0.0, 0.0])


def test_conv2d_matches_fd():
    rng = np.random.default_rng(19)
    img = rng.standard_normal((5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 4)) * 0.3
    err = dm.grad_check(lambda t: dm.conv2d(t, DTensor(w)), DTensor(img))
    assert err < 1e-6
    err = dm.grad_check(lambda t: dm.conv2d(DTensor(img), t), DTensor(w))
    assert err < 1e-6


def test_conv2d_same_padding_value():
    # 1x1 input, 3x3 kernel: only the center tap sees the pixel
    img = np.full((1, 1, 1), 2.0)
    w = np.arange(9.0).reshape(3, 3, 1, 1)
    out = dm.conv2d(dm.tensor(img), dm.tensor(w))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(2.0 * w[1, 1, 0, 0])


def test_stability_at_extreme_inputs():
    x = dm.tensor([-500.0, 0.0, 500.0])
    with np.errstate(over="raise"):
        s = dm.sigmoid(x)
        p = dm.softplus(x)
    assert np.all(np.isfinite(s.data)) and np.all(np.isfinite(p.data))
    assert s.data[0] == pytest.approx(0.0, abs=1e-100)
    assert s.data[2] == pytest.approx(1.0)
    assert p.data[2] == pytest.approx(500.0)
    assert p.data[0] == pytest.approx(0.0, abs=1e-100)


# ---------------------------------------------------------------- grad_check API


def test_grad_check_four_layer_mlp():
    rng = np.random.default_rng(23)
    sizes = [(6, 16), (16, 16), (16, 16), (16, 1)]
    weights = [DTensor(rng.standard_normal(s) / np.sqrt(s[0])) for s in sizes]
    biases = [DTensor(np.zeros(s[1])) for s in sizes]
    x0 = rng.standard_normal((5, 6))

    def net(x):
        h = x
        for i, (w, b) in enumerate(zip(weights, biases)):
            h = dm.add(dm.matmul(h, w), b)
            if i < len(sizes) - 1:
                h = dm.tanh(h)
        return dm.mean(h)

    err = dm.grad_check(net, DTensor(x0))
    assert err <= 1e-4


def test_grad_check_sampled_subset():
    rng = np.random.default_rng(29)
    w = rng.standard_normal((20, 20))
    err = dm.grad_check(lambda t: dm.sum_(dm.mul(t, t)), DTensor(w), sample=10)
    assert err < 1e-6


def test_grad_check_flags_wrong_gradient():
    # sabotage: forward is x*x but we route the backward through x*3
    def broken(t):
        wrong = dm.mul(t, 3.0)
        return dm.add(dm.sum_(dm.mul(DTensor(t.data), DTensor(t.data))),
                      dm.sub(dm.sum_(wrong), dm.sum_(wrong.detach())))

    x = DTensor(np.array([1.0, 2.0]))
    err = dm.grad_check(broken, x)
    assert err > 1e-2


# ---------------------------------------------------------------- properties


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_add_mul_grads_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, m))
    b = rng.standard_normal((n, m))

    ga, gb = backward_of(lambda x, y: dm.sum_(dm.mul(dm.add(x, y), x)), a, b)
    np.testing.assert_allclose(ga, 2 * a + b, atol=1e-10)
    np.testing.assert_allclose(gb, a, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2**31 - 1))
def test_matmul_grad_property(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, k))
    b = rng.standard_normal((k, m))
    ga, gb = backward_of(lambda x, y: dm.sum_(dm.matmul(x, y)), a, b)
    np.testing.assert_allclose(ga, np.ones((n, m)) @ b.T, atol=1e-10)
    np.testing.assert_allclose(gb, a.T @ np.ones((n, m)), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8),
       st.integers(0, 2**31 - 1))
def test_softmax_is_distribution(vals, seed):
    x = dm.tensor(np.asarray(vals))
    s = dm.softmax(x, axis=0)
    assert np.all(s.data >= 0)
    assert np.sum(s.data) == pytest.approx(1.0, abs=1e-12)

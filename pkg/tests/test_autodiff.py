import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npgat.autodiff import (
    NonFiniteError, Segments, ShapeError, Tape, finite_difference_check, forward_op,
)


def test_leaky_relu_values():
    tape = Tape()
    out = forward_op("leaky_relu", [tape.leaf([-1.0, 2.0])], {"slope": 0.2})
    np.testing.assert_allclose(out.values, [-0.2, 2.0])


def test_sigmoid_symmetry_point():
    tape = Tape()
    assert forward_op("sigmoid", [tape.leaf([0.0])]).values[0] == 0.5


def test_segment_softmax_equal_logits():
    tape = Tape()
    seg = Segments([0, 0], 1)
    out = forward_op("segment_softmax", [tape.leaf([1.0, 1.0])], {"segments": seg})
    np.testing.assert_allclose(out.values, [0.5, 0.5])


def test_shape_mismatch_names_op():
    tape = Tape()
    with pytest.raises(ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
        tape.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tape.add(tape.leaf(np.ones(3)), tape.leaf(np.ones(4)))


def test_backward_square():
    tape = Tape()
    x = tape.leaf([3.0])
    tape.backward(tape.sum(x * x))
    assert x.grad[0] == 6.0


def test_backward_sigmoid():
    tape = Tape()
    x = tape.leaf([0.0])
    tape.backward(tape.sum(tape.sigmoid(x)))
    assert x.grad[0] == 0.25


def test_backward_softmax_sum_is_zero():
    rng = np.random.default_rng(0)
    tape = Tape()
    v = tape.leaf(rng.normal(size=5))
    tape.backward(tape.sum(tape.segment_softmax(v, Segments(np.zeros(5), 1))))
    np.testing.assert_allclose(v.grad, 0.0, atol=1e-15)


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        tape.backward(x * x)


def test_grads_zero_after_reset():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    tape.backward(tape.sum(x * x))
    tape.reset_grads()
    assert not x.grad.any()


def test_fd_sum_of_squares():
    rng = np.random.default_rng(1)
    err = finite_difference_check(lambda t, x: t.sum(x * x), rng.normal(size=8), 1e-5)
    assert err < 1e-6


def test_fd_constant_function():
    err = finite_difference_check(lambda t, x: t.const([4.0]), np.ones(3), 1e-5)
    assert err == 0.0


def test_fd_reports_nonfinite_coordinate():
    # log(x) with x[1] right at the boundary: the perturbed point goes negative
    def f(t, x):
        return t.sum(t.log(t.clip(x, -1.0, 10.0) + 1e-6))

    with pytest.raises(NonFiniteError) as exc:
        finite_difference_check(f, np.array([1.0, 0.0]), 1e-5)
    assert exc.value.coordinate == (1,)


SEG = Segments([0, 0, 1, 2, 2, 2], 3)


def _ops():
    """Scalar test functions covering every op kind."""
    w = np.linspace(-1, 1, 6)
    return {
        "add": lambda t, x: t.sum((x + x[::-1]) * w),
        "sub": lambda t, x: t.sum((x - 2.0 * x[::-1]) * w),
        "mul": lambda t, x: t.sum(x * x[::-1] * w),
        "matmul": lambda t, x: t.sum(t.matmul(t.reshape(x, (2, 3)), t.reshape(x, (3, 2)))),
        "concat": lambda t, x: t.sum(t.concat([x, x * x], axis=0) * np.concatenate([w, w])),
        "leaky_relu": lambda t, x: t.sum(t.leaky_relu(x) * w),
        "relu": lambda t, x: t.sum(t.relu(x) * w),
        "sigmoid": lambda t, x: t.sum(t.sigmoid(x) * w),
        "log": lambda t, x: t.sum(t.log(x * x + 0.5) * w),
        "power": lambda t, x: t.sum(t.power(x * x + 0.1, 1.7) * w),
        "exp": lambda t, x: t.sum(t.exp(x) * w),
        "sqrt": lambda t, x: t.sum(t.sqrt(x * x + 0.2) * w),
        "sin_cos": lambda t, x: t.sum(t.sin(x) * t.cos(x * 2.0) * w),
        "segment_softmax": lambda t, x: t.sum(t.segment_softmax(x, SEG) * w),
        "segment_sum": lambda t, x: t.sum(
            t.segment_sum(t.reshape(x, (6, 1)) * t.reshape(x, (6, 1)), SEG) * np.array([[1.0], [-2.0], [0.5]])
        ),
        "dropout": lambda t, x: t.sum(t.dropout(x, np.array([2.0, 0, 2.0, 2.0, 0, 2.0])) * x),
        "gather_rows": lambda t, x: t.sum(t.gather_rows(x, np.array([5, 0, 0, 3])) * np.arange(4.0)),
        "getitem": lambda t, x: t.sum(x[1:4] * x[0:3]),
        "clip": lambda t, x: t.sum(t.clip(x, -0.5, 0.5) * w),
        "mean": lambda t, x: t.mean(x * x),
        "arc_aggregate": lambda t, x: t.sum(
            t.arc_aggregate(x, t.reshape(x, (3, 2)) * 1.5, SEG, Segments([0, 1, 2, 0, 1, 2], 3))
            * np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, 0.7]])
        ),
    }


@pytest.mark.parametrize("kind", sorted(_ops()))
def test_gradcheck_every_op(kind):
    f = _ops()[kind]
    rng = np.random.default_rng(abs(hash(kind)) % 2**32)
    for _ in range(5):
        x = rng.normal(size=6)
        # keep away from relu/clip kinks
        x = np.where(np.abs(x) < 0.05, 0.3, x)
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.8, x)
        assert finite_difference_check(f, x, 1e-5) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_gradcheck_random_dims(n, k, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, k, size=n)
    seg = Segments(ids, k)
    w = rng.normal(size=n)

    def f(t, x):
        return t.sum(t.segment_softmax(t.leaky_relu(x) * 1.3, seg) * w) + t.mean(t.sigmoid(x))

    assert finite_difference_check(f, rng.normal(size=n), 1e-5) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_segment_softmax_sums_to_one(n, k, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, k, size=n)
    seg = Segments(ids, k)
    tape = Tape()
    out = tape.segment_softmax(tape.leaf(rng.normal(scale=20, size=n)), seg)
    sums = np.bincount(ids, weights=out.values, minlength=k)
    present = np.bincount(ids, minlength=k) > 0
    np.testing.assert_allclose(sums[present], 1.0, atol=1e-9)


def test_arc_aggregate_matches_unfused():
    rng = np.random.default_rng(3)
    dst = np.sort(rng.integers(0, 7, size=30))
    src = rng.integers(0, 7, size=30)
    D, S = Segments(dst, 7), Segments(src, 7)
    tape = Tape()
    w = tape.leaf(rng.random(30))
    z = tape.leaf(rng.normal(size=(7, 4)))
    fused = tape.arc_aggregate(w, z, D, S)
    plain = tape.segment_sum(tape.reshape(w, (-1, 1)) * tape.gather_rows(z, src), D)
    np.testing.assert_allclose(fused.values, plain.values, atol=1e-12)


def test_replay_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(5, 3)))
        w = tape.leaf(rng.normal(size=(3, 2)))
        y = tape.sigmoid(tape.matmul(x, w))
        loss = tape.mean(y * y)
        tape.backward(loss)
        return loss.values.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()

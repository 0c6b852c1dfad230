"""Tape mechanics, elementwise/reduction ops and their gradients."""

import numpy as np
import pytest

from voxrep import autograd as ag
from voxrep.autograd import Tape, Tensor, backward, parameter
from voxrep.errors import ContractError

from _util import gradcheck


def f64(rng, *shape):
    return parameter(rng.standard_normal(shape), dtype=np.float64)


def test_sum_backward_is_ones():
    x = parameter(np.arange(6.0).reshape(2, 3), dtype=np.float64)
    with Tape() as tape:
        loss = ag.tsum(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_sum_backward():
    x = parameter(np.array([1.0, 2.0, 3.0]), dtype=np.float64)
    with Tape() as tape:
        loss = ag.tsum(ag.mul(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = parameter(np.ones(3))
    with Tape() as tape:
        y = ag.mul(x, x)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_backward_requires_output_on_tape():
    x = parameter(np.ones(3))
    with Tape() as tape:
        ag.tsum(x)
    stray = Tensor(np.zeros(()))
    with pytest.raises(ContractError):
        backward(stray, tape)


def test_no_recording_without_tape():
    x = parameter(np.ones(3))
    y = ag.tsum(ag.mul(x, x))
    assert y.requires_grad is False
    tape = Tape()
    assert len(tape) == 0


def test_fanout_accumulates_branch_gradients():
    rng = np.random.default_rng(3)
    xv = rng.standard_normal(5)
    a = rng.standard_normal(5)
    b = rng.standard_normal(5)

    x = parameter(xv.copy(), dtype=np.float64)
    with Tape() as tape:
        loss = ag.add(ag.tsum(ag.mul(x, Tensor(a))), ag.tsum(ag.mul(x, Tensor(b))))
    backward(loss, tape)
    shared = x.grad.copy()

    # single-use decomposition: two independent leaves
    x1 = parameter(xv.copy(), dtype=np.float64)
    x2 = parameter(xv.copy(), dtype=np.float64)
    with Tape() as tape:
        loss = ag.add(ag.tsum(ag.mul(x1, Tensor(a))), ag.tsum(ag.mul(x2, Tensor(b))))
    backward(loss, tape)
    np.testing.assert_allclose(shared, x1.grad + x2.grad, rtol=0, atol=1e-15)


def test_used_k_times_gets_k_contributions():
    x = parameter(np.array([2.0]), dtype=np.float64)
    with Tape() as tape:
        y = ag.add(ag.add(x, x), x)  # 3x
        loss = ag.tsum(y)
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [3.0])


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_elementwise(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    a = f64(rng, *shape)
    b = f64(rng, *shape)
    gradcheck(lambda: ag.tsum(ag.mul(ag.add(a, b), ag.sub(a, ag.neg(b)))), [a, b])


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_broadcasting(seed):
    rng = np.random.default_rng(100 + seed)
    a = f64(rng, 3, 4)
    b = f64(rng, 1, 4)
    c = f64(rng, 3, 1)
    gradcheck(lambda: ag.tsum(ag.mul(ag.add(a, b), c)), [a, b, c])


def test_gradcheck_relu_away_from_kink():
    rng = np.random.default_rng(7)
    x = parameter(rng.standard_normal(20), dtype=np.float64)
    x.data[np.abs(x.data) < 0.05] += 0.1
    gradcheck(lambda: ag.tsum(ag.mul(ag.relu(x), ag.relu(x))), [x])


def test_gradcheck_reductions_and_lse():
    rng = np.random.default_rng(11)
    x = f64(rng, 4, 5)
    gradcheck(lambda: ag.tsum(ag.mul(ag.tsum(x, axis=1), ag.tsum(x, axis=1))), [x])
    gradcheck(lambda: ag.tsum(ag.logsumexp(x, axis=1)), [x])
    gradcheck(lambda: ag.tsum(ag.logsumexp(x, axis=0, keepdims=True)), [x])
    # distinct entries so the max is differentiable
    y = parameter(np.argsort(rng.standard_normal(12)).astype(np.float64).reshape(3, 4) * 0.37)
    gradcheck(lambda: ag.tsum(ag.mul(ag.tmax(y, axis=1), ag.tmax(y, axis=1))), [y])
    gradcheck(lambda: ag.mul(ag.tmax(y), ag.tmax(y)), [y])


def test_logsumexp_matches_naive():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((6, 9)) * 50  # large values: naive overflows in f32, lse must not
    got = ag.logsumexp(Tensor(x, dtype=np.float64), axis=1).data
    want = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1)) + x.max(1)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_gradcheck_concat_reshape():
    rng = np.random.default_rng(17)
    a = f64(rng, 2, 3)
    b = f64(rng, 2, 2)
    gradcheck(
        lambda: ag.tsum(ag.mul(ag.concat([a, b], axis=1), ag.concat([a, b], axis=1))),
        [a, b],
    )
    c = f64(rng, 2, 6)
    gradcheck(lambda: ag.tsum(ag.mul(ag.reshape(c, (3, 4)), ag.reshape(c, (3, 4)))), [c])


def test_mean_matches_numpy():
    rng = np.random.default_rng(19)
    x = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    np.testing.assert_allclose(ag.mean(x).item(), x.data.mean(), rtol=1e-12)
    np.testing.assert_allclose(ag.mean(x, axis=0).data, x.data.mean(axis=0), rtol=1e-12)


def test_operator_sugar_with_scalars():
    x = parameter(np.array([1.0, -2.0]), dtype=np.float64)
    with Tape() as tape:
        loss = ag.tsum(2.0 * x + 1.0 - (-x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [3.0, 3.0])


def test_deterministic_forward_backward():
    def run():
        rng = np.random.default_rng(123)
        x = parameter(rng.standard_normal((4, 4)).astype(np.float32))
        w = parameter(rng.standard_normal((4, 4)).astype(np.float32))
        with Tape() as tape:
            loss = ag.tsum(ag.mul(ag.relu(ag.add(x, w)), x))
        backward(loss, tape)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    first = run()
    second = run()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)

"""Autodiff engine: forward values, adjoints vs finite differences, Adam."""
import numpy as np
import pytest

from mmgl import numcore as nc
from mmgl.errors import DataError, DimensionError, MmglError, ParameterError


def make_tape():
    return nc.Tape()


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    t = make_tape()
    b = np.arange(6.0).reshape(3, 2)
    out = t.const(np.eye(3)) @ t.const(b)
    assert np.array_equal(out.value, b)


def test_matmul_hand_product():
    t = make_tape()
    out = t.const([[1.0, 2.0], [3.0, 4.0]]) @ t.const([[1.0], [1.0]])
    assert np.array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    t = make_tape()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        t.const(np.ones((2, 3))) @ t.const(np.ones((2, 3)))


def test_matmul_gradients():
    rng = np.random.default_rng(0)
    w = nc.Param(rng.normal(size=(3, 4)), "w")
    x = rng.normal(size=(4, 2))

    def build(tape):
        return nc.sum_all(tape.leaf(w) @ tape.const(x))

    assert nc.grad_check(build, [w]) < 1e-7
    # loss = sum(W @ x) => dL/dW = ones @ x.T (outer-product structure)
    w.zero_grad()
    t = make_tape()
    t.backward(nc.sum_all(t.leaf(w) @ t.const(x)))
    assert np.allclose(w.grad, np.ones((3, 2)) @ x.T)


# --------------------------------------------------------- softmax_columns

def test_softmax_uniform():
    t = make_tape()
    out = nc.softmax_columns(t.const(np.zeros((2, 2))), 1.0)
    assert np.allclose(out.value, 0.5)


def test_softmax_hand_case():
    t = make_tape()
    s = np.array([[np.log(2.0), 0.0], [0.0, 0.0]])
    out = nc.softmax_columns(t.const(s), 1.0)
    assert np.allclose(out.value[:, 0], [2 / 3, 1 / 3])
    assert np.allclose(out.value[:, 1], [0.5, 0.5])


def test_softmax_columns_stochastic():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = make_tape()
        s = rng.normal(size=(5, 7)) * 10
        y = nc.softmax_columns(t.const(s), 2.0).value
        assert np.all(y >= 0) and np.all(y <= 1)
        assert np.all(np.abs(y.sum(axis=0) - 1.0) <= 1e-12)


def test_softmax_bad_tau():
    t = make_tape()
    with pytest.raises(ParameterError):
        nc.softmax_columns(t.const(np.zeros((2, 2))), 0.0)


def test_softmax_shift_invariance_exact_on_integers():
    # adding a constant to a column leaves that column's softmax bitwise
    # unchanged when the additions are exact (integer-valued scores)
    rng = np.random.default_rng(2)
    s = rng.integers(-8, 8, size=(4, 5)).astype(np.float64)
    shifted = s.copy()
    shifted[:, 2] += 3.0
    a = nc.softmax_columns(make_tape().const(s), 1.0).value
    b = nc.softmax_columns(make_tape().const(shifted), 1.0).value
    assert np.array_equal(a, b)


# ------------------------------------------------------------------- relu

def test_relu_values():
    t = make_tape()
    out = nc.relu(t.const([[-1.0, 0.0], [2.0, -3.0]]))
    assert np.array_equal(out.value, [[0.0, 0.0], [2.0, 0.0]])


def test_relu_identity_on_nonnegative():
    t = make_tape()
    x = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert np.array_equal(nc.relu(t.const(x)).value, x)


def test_relu_gradient_mask():
    x = nc.Param([[-1.0, 0.5], [0.0, 2.0]], "x")
    t = make_tape()
    t.backward(nc.sum_all(nc.relu(t.leaf(x))))
    assert np.array_equal(x.grad, (x.value > 0).astype(float))


# --------------------------------------------------- cross_entropy_masked

def test_cross_entropy_uniform():
    t = make_tape()
    loss = nc.cross_entropy_masked(t.const(np.zeros((4, 3))), [0, 1, 2, 0], np.arange(4))
    assert np.isclose(float(loss.value), np.log(3.0))


def test_cross_entropy_confident():
    t = make_tape()
    logits = np.zeros((2, 3))
    logits[0, 1] = 50.0
    logits[1, 2] = 50.0
    loss = nc.cross_entropy_masked(t.const(logits), [1, 2], [0, 1])
    assert float(loss.value) < 1e-12


def test_cross_entropy_per_row_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 3))
    labels = np.array([2, 0, 1, 1])
    t = make_tape()
    loss = nc.cross_entropy_masked(t.const(logits), labels, np.arange(4))
    per_row = []
    for i in range(4):
        e = np.exp(logits[i] - logits[i].max())
        p = e / e.sum()
        per_row.append(-np.log(p[labels[i]]))
    assert np.isclose(float(loss.value), np.mean(per_row))


def test_cross_entropy_errors():
    t = make_tape()
    with pytest.raises(ParameterError):
        nc.cross_entropy_masked(t.const(np.zeros((2, 3))), [0, 1], [])
    with pytest.raises(DataError):
        nc.cross_entropy_masked(t.const(np.zeros((2, 3))), [0, 5], [0, 1])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    w = nc.Param(rng.normal(size=(4, 3)), "logits")
    labels = np.array([0, 2, 1, 1])

    def build(tape):
        return nc.cross_entropy_masked(tape.leaf(w), labels, [0, 2, 3])

    assert nc.grad_check(build, [w]) < 1e-6


# --------------------------------------------------------------- backward

def test_backward_unused_param_zero():
    w = nc.Param(np.ones((2, 2)), "w")
    unused = nc.Param(np.ones((2, 2)), "u")
    t = make_tape()
    t.backward(nc.sum_all(t.leaf(w)))
    assert np.array_equal(unused.grad, np.zeros((2, 2)))
    assert np.array_equal(w.grad, np.ones((2, 2)))


def test_backward_twice_is_error():
    w = nc.Param(np.ones((2, 2)), "w")
    t = make_tape()
    loss = nc.sum_all(t.leaf(w))
    t.backward(loss)
    with pytest.raises(MmglError):
        t.backward(loss)


def test_backward_non_scalar_loss():
    w = nc.Param(np.ones((2, 2)), "w")
    t = make_tape()
    with pytest.raises(ParameterError):
        t.backward(t.leaf(w))


def test_backward_accumulates_across_tapes():
    w = nc.Param(np.ones((2, 2)), "w")
    t1 = make_tape()
    t1.backward(nc.sum_all(t1.leaf(w)))
    t2 = make_tape()
    t2.backward(nc.sum_all(t2.leaf(w) * 3.0))
    assert np.array_equal(w.grad, np.full((2, 2), 4.0))


def test_forward_and_grad_deterministic():
    def run():
        rng = np.random.default_rng(7)
        w = nc.Param(rng.normal(size=(3, 3)), "w")
        t = make_tape()
        loss = nc.sum_all(nc.relu(t.leaf(w) @ t.const(rng.normal(size=(3, 2)))))
        t.backward(loss)
        return loss.value.copy(), w.grad.copy()

    (v1, g1), (v2, g2) = run(), run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


# --------------------------------------------- elementwise/reduction ops

@pytest.mark.parametrize("seed", range(10))
def test_finite_difference_all_ops(seed):
    rng = np.random.default_rng(seed)
    a = nc.Param(np.abs(rng.normal(size=(3, 4))) + 0.5, "a")
    b = nc.Param(np.abs(rng.normal(size=(3, 4))) + 0.5, "b")
    c = nc.Param(rng.normal(size=(4, 2)), "c")

    cases = [
        lambda t: nc.sum_all(t.leaf(a) + t.leaf(b)),
        lambda t: nc.sum_all(t.leaf(a) - t.leaf(b)),
        lambda t: nc.sum_all(t.leaf(a) * t.leaf(b)),
        lambda t: nc.sum_all(t.leaf(a) / t.leaf(b)),
        lambda t: nc.sum_all(t.leaf(a) @ t.leaf(c)),
        lambda t: nc.sum_all(t.leaf(a).T),
        lambda t: nc.sum_all(nc.relu(t.leaf(a) - 1.0) * t.leaf(b)),
        lambda t: nc.sum_all(nc.sqrt(t.leaf(a))),
        lambda t: nc.sum_all(nc.log(t.leaf(a))),
        lambda t: nc.sum_all(nc.sum_axis(t.leaf(a), axis=0) * nc.sum_axis(t.leaf(b), axis=1)),
        lambda t: nc.sum_all(nc.concat_rows([t.leaf(a), t.leaf(b)])),
        lambda t: nc.sum_all(nc.slice_rows(t.leaf(a), 1, 3) * nc.slice_rows(t.leaf(b), 0, 2)),
        lambda t: nc.sum_all(nc.softmax_columns(t.leaf(a), 0.7) * t.leaf(b)),
        lambda t: nc.sum_all(nc.maximum(t.leaf(a) - 1.0, 0.25)),
    ]
    for build in cases:
        assert nc.grad_check(build, [a, b, c], rng=rng) < 1e-4


def test_broadcasting_gradients():
    rng = np.random.default_rng(11)
    a = nc.Param(rng.normal(size=(3, 4)), "a")
    row = nc.Param(rng.normal(size=(1, 4)), "row")
    col = nc.Param(rng.normal(size=(3, 1)), "col")

    def build(tape):
        return nc.sum_all((tape.leaf(a) + tape.leaf(row)) * tape.leaf(col))

    assert nc.grad_check(build, [a, row, col]) < 1e-7


def test_concat_rows_mismatch():
    t = make_tape()
    with pytest.raises(DimensionError):
        nc.concat_rows([t.const(np.ones((2, 3))), t.const(np.ones((2, 4)))])


# ------------------------------------------------------------------- Adam

def test_adam_first_step_sign():
    p = nc.Param(np.zeros(4), "p")
    opt = nc.Adam([p], lr=0.1)
    p.grad = np.array([3.0, -2.0, 1e-3, -1e-3])
    opt.step()
    assert np.allclose(p.value, -0.1 * np.sign(p.grad), atol=1e-5)


def test_adam_zero_gradient_fixed_point():
    p = nc.Param(np.full(3, 7.0), "p")
    opt = nc.Adam([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.value, np.full(3, 7.0))


def test_adam_bad_lr():
    with pytest.raises(ParameterError):
        nc.Adam([nc.Param(np.zeros(1))], lr=0.0)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(9)
        p = nc.Param(rng.normal(size=(2, 2)), "p")
        opt = nc.Adam([p], lr=0.05)
        for _ in range(10):
            p.zero_grad()
            t = make_tape()
            t.backward(nc.sum_all(t.leaf(p) * t.leaf(p)))
            opt.step()
        return p.value.copy()

    assert np.array_equal(run(), run())


def test_adam_step_counter():
    p = nc.Param(np.zeros(1), "p")
    opt = nc.Adam([p], lr=0.1)
    for expected in (1, 2, 3):
        opt.step()
        assert opt.t == expected


# ------------------------------------------------------------- grad_check

def test_grad_check_quadratic():
    w = nc.Param(np.array([[1.0, -2.0], [0.5, 3.0]]), "w")

    def build(tape):
        x = tape.leaf(w)
        return nc.sum_all(x * x)

    assert nc.grad_check(build, [w]) < 1e-7


def test_grad_check_constant_loss():
    w = nc.Param(np.ones((2, 2)), "w")

    def build(tape):
        tape.leaf(w)
        return tape.const(np.array(5.0))

    assert nc.grad_check(build, [w]) == 0.0


def test_grad_check_bad_h():
    w = nc.Param(np.ones(1), "w")
    with pytest.raises(ParameterError):
        nc.grad_check(lambda t: nc.sum_all(t.leaf(w)), [w], h=0.0)

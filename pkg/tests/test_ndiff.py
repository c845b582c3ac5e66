"""Gradient-tape layer: primitive semantics, adjoints vs finite differences,
Cholesky behavior, tape determinism, allocation tracking."""

import math

import numpy as np
import pytest

from vbpc import ndiff as nd


def fd_gradient(fn, values, eps=1e-5):
    """Central finite differences of scalar fn w.r.t. one numpy operand."""
    grad = np.zeros_like(values)
    flat = values.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(values)
        flat[i] = orig - eps
        down = fn(values)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.abs(b), floor)


def scalarize(out, probe, tape):
    return nd.sum(nd.hadamard(out, nd.constant(probe), tape=tape), tape=tape)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    out = nd.matmul(nd.Array(a), nd.eye(3))
    np.testing.assert_array_equal(out.data, a)


def test_relu_definition():
    out = nd.relu(nd.Array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[0.0, 2.0]])


def test_logdet_diagonal():
    out = nd.logdet_spd(nd.Array([[2.0, 0.0], [0.0, 2.0]]))
    assert math.isclose(out.item(), 2.0 * math.log(2.0), rel_tol=1e-14)


def test_row_log_softmax_rows_normalize():
    rng = np.random.default_rng(1)
    out = nd.row_log_softmax(nd.Array(rng.standard_normal((5, 7))))
    sums = np.exp(out.data).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_rsqrt_shift_values():
    alpha = math.pi / 8
    x = np.array([[0.0, 1.0, 4.0]])
    out = nd.rsqrt_shift(nd.Array(x), alpha=alpha)
    np.testing.assert_allclose(out.data, 1.0 / np.sqrt(1.0 + alpha * x), rtol=1e-15)


def test_row_gather_and_sum_axes():
    a = nd.Array([[1.0, 2.0], [3.0, 4.0]])
    picked = nd.row_gather(a, idx=[1, 0])
    np.testing.assert_array_equal(picked.data, [[2.0], [3.0]])
    np.testing.assert_array_equal(nd.sum(a).data, [[10.0]])
    np.testing.assert_array_equal(nd.sum(a, axis=0).data, [[4.0, 6.0]])
    np.testing.assert_array_equal(nd.sum(a, axis=1).data, [[3.0], [7.0]])


def test_broadcast_div_rows():
    a = nd.Array([[2.0, 4.0], [9.0, 3.0]])
    v = nd.Array([[2.0], [3.0]])
    np.testing.assert_array_equal(nd.broadcast_div(a, v).data, [[1.0, 2.0], [3.0, 1.0]])


def test_shape_mismatch_raises():
    with pytest.raises(nd.ShapeError):
        nd.matmul(nd.zeros((2, 3)), nd.zeros((2, 3)))
    with pytest.raises(nd.ShapeError):
        nd.add(nd.zeros((2, 3)), nd.zeros((3, 2)))


def test_non_finite_result_is_error():
    big = nd.Array(np.full((2, 2), 1e200))
    with pytest.raises(nd.NonFiniteError):
        nd.hadamard(big, big)
    with pytest.raises(nd.NonFiniteError):
        nd.Array([[float("nan")]])


# ---------------------------------------------------------------------------
# cholesky
# ---------------------------------------------------------------------------

def test_cholesky_identity():
    np.testing.assert_array_equal(nd.cholesky_spd(nd.eye(3)).data, np.eye(3))


def test_cholesky_hand_recurrence():
    # hand recurrence on [[4,2],[2,3]]: l11=2, l21=1, l22=sqrt(2)
    out = nd.cholesky_spd(nd.Array([[4.0, 2.0], [2.0, 3.0]]))
    expect = np.array([[2.0, 0.0], [1.0, math.sqrt(2.0)]])
    np.testing.assert_allclose(out.data, expect, rtol=1e-15)


def test_cholesky_indefinite_raises():
    with pytest.raises(nd.NonSPDError):
        nd.cholesky_spd(nd.Array([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_asymmetric_raises():
    with pytest.raises(nd.NonSPDError):
        nd.cholesky_spd(nd.Array([[1.0, 0.5], [0.0, 1.0]]))


def test_cholesky_jitter_rescues_singular_psd():
    out = nd.cholesky_spd(nd.Array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.all(np.diag(out.data) > 0)


def test_cholesky_reconstruction_tolerance():
    rng = np.random.default_rng(7)
    for _ in range(5):
        q = rng.standard_normal((6, 6))
        a = q @ q.T + 6 * np.eye(6)
        chol = nd.cholesky_spd(nd.Array(a)).data
        err = np.linalg.norm(chol @ chol.T - a) / np.linalg.norm(a)
        assert err <= 1e-12


def test_cholesky_solve_residual_well_conditioned():
    # condition number ~1e6 via controlled spectrum
    rng = np.random.default_rng(11)
    for _ in range(5):
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        a = (q * np.logspace(-3, 3, 8)) @ q.T
        b = rng.standard_normal((8, 3))
        x = nd.cholesky_solve_spd(nd.Array(a), nd.Array(b)).data
        assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) <= 1e-10


# ---------------------------------------------------------------------------
# adjoints vs central finite differences
# ---------------------------------------------------------------------------

def check_primitive_gradient(make_operands, build, n_points=20, tol=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_points):
        operands = make_operands(rng)
        out_shape = build(*[nd.Array(o) for o in operands], tape=None).shape
        probe = rng.standard_normal(out_shape)

        def value(k, vals, operands=operands):
            ops = [o if j != k else vals for j, o in enumerate(operands)]
            out = build(*[nd.Array(o) for o in ops], tape=None)
            return float((out.data * probe).sum())

        tape = nd.Tape()
        leaves = [tape.leaf(nd.Array(o)) for o in operands]
        loss = scalarize(build(*leaves, tape=tape), probe, tape)
        grads = nd.backward(tape, loss)
        for k, leaf in enumerate(leaves):
            ad = grads[tape.node_id(leaf)].data
            fd = fd_gradient(lambda v, k=k: value(k, v), operands[k].copy())
            assert rel_err(ad, fd).max() <= tol, f"operand {k}"


def test_grad_matmul():
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 4)), rng.standard_normal((4, 2))),
        lambda a, b, tape: nd.matmul(a, b, tape=tape))


def test_grad_transpose():
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 4)),),
        lambda a, tape: nd.transpose(a, tape=tape))


def test_grad_add_sub_broadcast():
    for shape_b in [(3, 4), (1, 4), (3, 1), (1, 1)]:
        check_primitive_gradient(
            lambda rng, sb=shape_b: (rng.standard_normal((3, 4)), rng.standard_normal(sb)),
            lambda a, b, tape: nd.add(a, b, tape=tape), n_points=5)
        check_primitive_gradient(
            lambda rng, sb=shape_b: (rng.standard_normal((3, 4)), rng.standard_normal(sb)),
            lambda a, b, tape: nd.sub(a, b, tape=tape), n_points=5)


def test_grad_scale():
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 4)),),
        lambda a, tape: nd.scale(a, -2.5, tape=tape))


def test_grad_hadamard_broadcast():
    for shape_b in [(3, 4), (1, 4), (3, 1)]:
        check_primitive_gradient(
            lambda rng, sb=shape_b: (rng.standard_normal((3, 4)), rng.standard_normal(sb)),
            lambda a, b, tape: nd.hadamard(a, b, tape=tape), n_points=7)


def test_grad_relu():
    # keep samples away from the kink
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 4)) + 0.2 * np.sign(rng.standard_normal((3, 4))),),
        lambda a, tape: nd.relu(a, tape=tape))


def test_grad_row_log_softmax():
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 5)),),
        lambda a, tape: nd.row_log_softmax(a, tape=tape))


def test_grad_rsqrt_shift():
    check_primitive_gradient(
        lambda rng: (rng.uniform(0.0, 4.0, (5, 1)),),
        lambda a, tape: nd.rsqrt_shift(a, alpha=math.pi / 8, tape=tape))


def test_grad_cholesky_solve():
    def operands(rng):
        q = rng.standard_normal((4, 4))
        return (q @ q.T + 4 * np.eye(4), rng.standard_normal((4, 3)))

    check_primitive_gradient(
        operands, lambda a, b, tape: nd.cholesky_solve_spd(a, b, tape=tape), tol=1e-5)


def test_grad_logdet():
    def operands(rng):
        q = rng.standard_normal((4, 4))
        return (q @ q.T + 4 * np.eye(4),)

    check_primitive_gradient(operands, lambda a, tape: nd.logdet_spd(a, tape=tape))


def test_grad_trace_matmul():
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 4)), rng.standard_normal((4, 3))),
        lambda a, b, tape: nd.trace_matmul(a, b, tape=tape))


def test_grad_row_gather():
    idx = [2, 0, 1]
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 4)),),
        lambda a, tape: nd.row_gather(a, idx=idx, tape=tape))


def test_grad_sum_axes():
    for axis in [None, 0, 1]:
        check_primitive_gradient(
            lambda rng: (rng.standard_normal((3, 4)),),
            lambda a, tape, ax=axis: nd.sum(a, axis=ax, tape=tape), n_points=7)


def test_grad_broadcast_div():
    check_primitive_gradient(
        lambda rng: (rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 1))),
        lambda a, v, tape: nd.broadcast_div(a, v, tape=tape))


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

def test_backward_identity_chain():
    tape = nd.Tape()
    x = tape.leaf(nd.Array([[3.0]]))
    grads = nd.backward(tape, x)
    assert grads[tape.node_id(x)].item() == 1.0


def test_backward_matmul_vs_fd():
    rng = np.random.default_rng(3)
    a_val = rng.standard_normal((3, 4))
    b_val = rng.standard_normal((4, 2))
    tape = nd.Tape()
    a = tape.leaf(nd.Array(a_val))
    b = nd.Array(b_val)
    loss = nd.sum(nd.matmul(a, b, tape=tape), tape=tape)
    ad = nd.backward(tape, loss)[tape.node_id(a)].data

    def f(v):
        return float((v @ b_val).sum())

    fd = fd_gradient(f, a_val.copy())
    assert rel_err(ad, fd, floor=1e-8).max() <= 1e-6


def test_backward_logdet_is_symmetrized_inverse():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((3, 3))
    a_val = q @ q.T + 3 * np.eye(3)
    tape = nd.Tape()
    a = tape.leaf(nd.Array(a_val))
    out = nd.logdet_spd(a, tape=tape)
    ad = nd.backward(tape, out)[tape.node_id(a)].data
    inv = np.linalg.inv(a_val)
    assert rel_err(ad, 0.5 * (inv + inv.T)).max() <= 1e-8


def test_backward_accumulates_fanout():
    tape = nd.Tape()
    x = tape.leaf(nd.Array([[1.0, 2.0]]))
    loss = nd.sum(nd.add(x, x, tape=tape), tape=tape)
    grads = nd.backward(tape, loss)
    np.testing.assert_array_equal(grads[tape.node_id(x)].data, [[2.0, 2.0]])


def test_backward_untouched_leaf_gets_zero():
    tape = nd.Tape()
    x = tape.leaf(nd.Array([[1.0]]))
    y = tape.leaf(nd.Array([[1.0, 1.0]]))
    loss = nd.scale(x, 3.0, tape=tape)
    grads = nd.backward(tape, loss)
    np.testing.assert_array_equal(grads[tape.node_id(y)].data, [[0.0, 0.0]])


def test_backward_seed_errors():
    tape = nd.Tape()
    x = tape.leaf(nd.Array([[1.0, 2.0]]))
    with pytest.raises(nd.ShapeError):
        nd.backward(tape, x)
    with pytest.raises(nd.NdiffError):
        nd.backward(tape, nd.Array([[1.0]]))


def test_constants_get_no_gradient_work():
    tape = nd.Tape()
    x = tape.leaf(nd.Array([[1.0, 2.0]]))
    c = nd.Array([[3.0, 4.0]])  # constant: never watched
    loss = nd.sum(nd.hadamard(x, c, tape=tape), tape=tape)
    grads = nd.backward(tape, loss)
    np.testing.assert_array_equal(grads[tape.node_id(x)].data, [[3.0, 4.0]])
    assert tape.node_id(c) is None


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(42)
        tape = nd.Tape()
        a = tape.leaf(nd.Array(rng.standard_normal((4, 4))))
        b = tape.leaf(nd.Array(rng.standard_normal((4, 2))))
        spd = nd.add(nd.eye(4), nd.matmul(a, nd.transpose(a, tape=tape), tape=tape), tape=tape)
        x = nd.cholesky_solve_spd(spd, b, tape=tape)
        loss = nd.add(nd.sum(nd.relu(x, tape=tape), tape=tape),
                      nd.logdet_spd(spd, tape=tape), tape=tape)
        grads = nd.backward(tape, loss)
        return loss.item(), grads[tape.node_id(a)].data.copy(), grads[tape.node_id(b)].data.copy()

    l1, ga1, gb1 = run()
    l2, ga2, gb2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(ga1, ga2)
    np.testing.assert_array_equal(gb1, gb2)


# ---------------------------------------------------------------------------
# allocation tracking
# ---------------------------------------------------------------------------

def test_tracker_counts_live_and_peak():
    base = nd.tracker.live
    with nd.track_allocations() as window:
        a = nd.zeros((10, 10))
        b = nd.matmul(a, a)
        assert nd.tracker.live >= base + 200
        assert window.largest_block >= 100
        del a, b
    assert nd.tracker.live <= base + 8  # cached/incidental slack only


def test_tracker_window_scopes_peak():
    with nd.track_allocations() as outer:
        nd.zeros((5, 5))
        with nd.track_allocations() as inner:
            nd.zeros((20, 20))
        assert inner.largest_block == 400
    assert outer.largest_block == 400

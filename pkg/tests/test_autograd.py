import numpy as np
import pytest

from circnet import autograd as ag
from conftest import check_gradients, numeric_grad, rel_error


def test_relu_values():
    out = ag.relu(ag.Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_max_over_singleton_set_is_identity():
    x = ag.Tensor(np.arange(6.0).reshape(1, 1, 6))
    out = ag.reduce_max_over_set(x, axis=1)
    np.testing.assert_array_equal(out.data, x.data[:, 0, :])


def test_bce_perfect_predictions_near_zero():
    targets = np.array([[1.0, 0.0, 1.0, 0.0]])
    probs = ag.Tensor(targets.copy())
    loss = ag.binary_cross_entropy_multilabel(probs, targets)
    assert 0.0 <= float(loss.data) <= 1e-7


def test_backward_of_sum_is_ones():
    x = ag.parameter(np.array([1.0, -2.0, 3.0, 0.5]))
    with ag.Tape() as tape:
        loss = ag.reduce_sum(x)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_identity_circulant_quadratic_grad_is_input():
    x = ag.parameter(np.array([0.3, -1.2, 0.7, 2.0]))
    c = ag.Tensor([1.0, 0.0, 0.0, 0.0])
    with ag.Tape() as tape:
        y = ag.circ_matvec_batched(c, x)
        loss = ag.scale(ag.reduce_sum(ag.mul(y, y)), 0.5)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, x.data, atol=1e-12)


def test_backward_on_detached_graph_raises():
    x = ag.parameter(np.ones(3))
    y = ag.reduce_sum(x)  # no tape active: nothing recorded
    with ag.Tape() as tape:
        with pytest.raises(ag.DetachedGraphError):
            tape.backward(y)


def test_tapes_do_not_nest():
    with ag.Tape():
        with pytest.raises(RuntimeError):
            with ag.Tape():
                pass


def test_max_routing_single_winner_lowest_index():
    x = ag.parameter(np.array([[[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]]]))  # (1, 3, 2)
    with ag.Tape() as tape:
        out = ag.reduce_max_over_set(x, axis=1)
        tape.backward(ag.reduce_sum(out))
    # one nonzero per output coordinate, ties broken by the lowest frame index
    assert x.grad.sum() == 2.0
    np.testing.assert_array_equal(x.grad[0, :, 0], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(x.grad[0, :, 1], [1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# finite-difference checks, one per op
# ---------------------------------------------------------------------------

RNG = np.random.default_rng(42)


def away_from_kinks(shape, margin=0.05):
    x = RNG.standard_normal(shape)
    x[np.abs(x) < margin] += 3 * margin
    return x


def test_grad_add_sub_mul_broadcast():
    a = ag.parameter(RNG.standard_normal((3, 4)))
    b = ag.parameter(RNG.standard_normal(4))
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.add(a, b), ag.sub(a, b))), [a, b])


def test_grad_dense_matmul_2d_and_3d():
    x2 = ag.parameter(RNG.standard_normal((5, 3)))
    x3 = ag.parameter(RNG.standard_normal((2, 4, 3)))
    w = ag.parameter(RNG.standard_normal((3, 6)))
    check_gradients(lambda: ag.reduce_sum(ag.dense_matmul(x2, w)), [x2, w])
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.dense_matmul(x3, w), ag.dense_matmul(x3, w))), [x3, w])


def test_grad_circ_matvec():
    c = ag.parameter(RNG.standard_normal(8))
    x = ag.parameter(RNG.standard_normal((4, 8)))
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.circ_matvec_batched(c, x),
                                                 ag.circ_matvec_batched(c, x))), [c, x])


def test_grad_diag_scale_and_bias():
    d = ag.parameter(RNG.standard_normal(6))
    b = ag.parameter(RNG.standard_normal(6))
    x = ag.parameter(RNG.standard_normal((3, 6)))
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.bias_add(ag.diag_scale(d, x), b),
                                                 ag.diag_scale(d, x))), [d, b, x])


def test_grad_relu_sigmoid_softmax():
    x = ag.parameter(away_from_kinks((4, 7)))
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.relu(x), ag.sigmoid(x))), [x])
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.softmax(x), ag.softmax(x))), [x])


def test_grad_concat_slice_pad_reshape():
    a = ag.parameter(RNG.standard_normal((3, 4)))
    b = ag.parameter(RNG.standard_normal((3, 2)))

    def loss():
        cat = ag.concat([a, b], axis=-1)
        sl = ag.slice_lastaxis(cat, 1, 5)
        pd = ag.pad_lastaxis(sl, 8)
        rs = ag.reshape(pd, (3, 2, 4))
        return ag.reduce_sum(ag.mul(rs, rs))

    check_gradients(loss, [a, b])


def test_grad_reduce_ops():
    x = ag.parameter(away_from_kinks((3, 5, 4)))
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.reduce_max_over_set(x, axis=1),
                                                 ag.reduce_mean(x, axis=1))), [x])
    check_gradients(lambda: ag.reduce_mean(ag.mul(ag.reduce_sum(x, axis=2),
                                                  ag.reduce_sum(x, axis=2))), [x])


def test_grad_gather_frames():
    x = ag.parameter(RNG.standard_normal((2, 5, 3)))
    idx = np.array([[0, 2, 2, 4], [1, 1, 3, 0]])
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.gather_frames(x, idx),
                                                 ag.gather_frames(x, idx))), [x])


def test_grad_l2_normalize_and_clamp():
    x = ag.parameter(away_from_kinks((3, 6)) * 2.0)
    check_gradients(lambda: ag.reduce_sum(ag.mul(ag.l2_normalize(x), ag.clamp_min(x, 0.2))), [x])


def test_grad_batch_norm_train_and_eval():
    x = ag.parameter(RNG.standard_normal((6, 4)) * 1.5)
    gamma = ag.parameter(np.abs(RNG.standard_normal(4)) + 0.5)
    beta = ag.parameter(RNG.standard_normal(4))
    rm, rv = np.zeros(4), np.ones(4)

    def train_loss():
        y = ag.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training=True)
        return ag.reduce_sum(ag.mul(y, y))

    check_gradients(train_loss, [x, gamma, beta])

    def eval_loss():
        y = ag.batch_norm(x, gamma, beta, rm, rv, training=False)
        return ag.reduce_sum(ag.mul(y, y))

    check_gradients(eval_loss, [x, gamma, beta])


def test_grad_bce():
    logits = ag.parameter(RNG.standard_normal((4, 5)))
    targets = (RNG.random((4, 5)) > 0.5).astype(float)
    check_gradients(lambda: ag.binary_cross_entropy_multilabel(ag.sigmoid(logits), targets),
                    [logits])


def test_batch_norm_eval_is_deterministic_affine():
    x = ag.Tensor(RNG.standard_normal((5, 3)))
    gamma, beta = ag.Tensor(np.ones(3)), ag.Tensor(np.zeros(3))
    rm, rv = RNG.standard_normal(3), np.abs(RNG.standard_normal(3)) + 0.5
    y1 = ag.batch_norm(x, gamma, beta, rm, rv, training=False)
    y2 = ag.batch_norm(x, gamma, beta, rm, rv, training=False)
    np.testing.assert_array_equal(y1.data, y2.data)
    np.testing.assert_array_equal(rm, rm)  # untouched in eval mode


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adam_zero_gradients_leave_parameters_unchanged():
    p = ag.parameter(np.array([1.0, 2.0]))
    p.grad = np.zeros(2)
    state = ag.AdamState(lr0=0.1)
    ag.adam_step(state, [("p", p)])
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_magnitude_is_lr():
    p = ag.parameter(np.array([0.0]))
    p.grad = np.ones(1)
    state = ag.AdamState(lr0=0.01)
    ag.adam_step(state, [("p", p)], clip_norm=0.0)
    assert abs(-p.data[0] - 0.01) < 1e-6


def test_adam_converges_on_quadratic_bowl():
    target = np.array([1.0, -2.0, 0.5, 3.0])
    w = ag.parameter(np.zeros(4))
    state = ag.AdamState(lr0=0.05)
    for _ in range(500):
        ag.zero_grads([("w", w)])
        with ag.Tape() as tape:
            diff = ag.sub(w, ag.Tensor(target))
            loss = ag.reduce_sum(ag.mul(diff, diff))
            tape.backward(loss)
        ag.adam_step(state, [("w", w)], clip_norm=0.0)
    assert np.linalg.norm(w.data - target) < 1e-2


def test_adam_effective_lr_continuous_exponent():
    state = ag.AdamState(lr0=0.1, decay_rate=0.8, decay_every=1000, examples_seen=500)
    assert abs(state.effective_lr() - 0.1 * 0.8 ** 0.5) < 1e-12
    state.examples_seen = 4000
    assert abs(state.effective_lr() - 0.1 * 0.8 ** 4) < 1e-12


def test_adam_rejects_non_finite_gradients():
    p = ag.parameter(np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(ag.NonFiniteGradientError):
        ag.adam_step(ag.AdamState(lr0=0.1), [("p", p)])
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_global_norm_clipping():
    p = ag.parameter(np.zeros(4))
    p.grad = np.full(4, 10.0)  # norm 20
    state = ag.AdamState(lr0=1.0, beta1=0.0, beta2=0.0, epsilon=0.0)
    ag.adam_step(state, [("p", p)], clip_norm=1.0)
    # clipped gradient has norm 1; Adam with zero betas normalizes per-coordinate sign
    assert np.all(p.data < 0)

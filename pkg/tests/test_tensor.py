"""Autodiff engine: finite-difference oracles, double backward, graph rules."""

import warnings

import numpy as np
import pytest

from conftest import check_op_grad, fd_grad, rel_err
from epift import tensor as T
from epift.tensor import GraphError, NumericError, ShapeError, Tensor


def _r(shape, rng, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape).astype(np.float64)


# -- elementary op gradients vs finite differences -------------------------


class TestElementaryGrads:
    def test_add(self, rng):
        b = Tensor(_r((3, 4), rng))
        check_op_grad(lambda t: T.add(t, b), _r((3, 4), rng))

    def test_add_broadcast(self, rng):
        b = Tensor(_r((4,), rng))
        check_op_grad(lambda t: T.add(t, b), _r((3, 4), rng))

    def test_neg(self, rng):
        check_op_grad(T.neg, _r((5,), rng))

    def test_mul(self, rng):
        b = Tensor(_r((3, 4), rng))
        check_op_grad(lambda t: T.mul(t, b), _r((3, 4), rng))

    def test_mul_broadcast(self, rng):
        b = Tensor(_r((3, 1), rng))
        check_op_grad(lambda t: T.mul(t, b), _r((3, 4), rng))

    def test_div(self, rng):
        b = Tensor(_r((3, 4), rng, 0.5, 2.0))
        check_op_grad(lambda t: T.div(t, b), _r((3, 4), rng))
        a = Tensor(_r((3, 4), rng))
        check_op_grad(lambda t: T.div(a, t), _r((3, 4), rng, 0.5, 2.0))

    def test_pow_const(self, rng):
        check_op_grad(lambda t: T.pow_const(t, 3.0), _r((4,), rng, 0.5, 2.0))

    def test_exp(self, rng):
        check_op_grad(T.exp, _r((4,), rng))

    def test_log(self, rng):
        check_op_grad(T.log, _r((4,), rng, 0.5, 3.0))

    def test_sqrt(self, rng):
        check_op_grad(T.sqrt, _r((4,), rng, 0.5, 3.0))

    def test_relu(self, rng):
        # keep values away from the kink so FD is valid
        x = _r((20,), rng)
        x[np.abs(x) < 0.1] += 0.2
        check_op_grad(T.relu, x)

    def test_clip_min(self, rng):
        x = _r((20,), rng)
        x[np.abs(x - 0.3) < 0.1] += 0.3
        check_op_grad(lambda t: T.clip_min(t, 0.3), x)

    def test_matmul(self, rng):
        b = Tensor(_r((4, 5), rng))
        check_op_grad(lambda t: T.matmul(t, b), _r((3, 4), rng))
        a = Tensor(_r((3, 4), rng))
        check_op_grad(lambda t: T.matmul(a, t), _r((4, 5), rng))

    def test_matmul_batched_broadcast(self, rng):
        b = Tensor(_r((7, 4, 5), rng))
        check_op_grad(lambda t: T.matmul(t, b), _r((1, 3, 4), rng))

    def test_sum(self, rng):
        check_op_grad(lambda t: T.sum_(t, axis=1), _r((3, 4), rng))

    def test_mean(self, rng):
        check_op_grad(lambda t: T.mean(t, axis=0, keepdims=True), _r((3, 4), rng))

    def test_max_reduce(self, rng):
        x = _r((3, 7), rng)
        check_op_grad(lambda t: T.max_reduce(t, axis=1), x)

    def test_max_reduce_tie_splits(self):
        x = Tensor(np.array([[2.0, 2.0, 1.0]]), requires_grad=True)
        (g,) = T.grad(T.sum_(T.max_reduce(x, axis=1)), [x])
        assert np.allclose(g.data, [[0.5, 0.5, 0.0]])

    def test_broadcast_to(self, rng):
        check_op_grad(lambda t: T.broadcast_to(t, (5, 3, 4)), _r((3, 4), rng))

    def test_reshape(self, rng):
        check_op_grad(lambda t: T.reshape(t, (4, 3)), _r((3, 4), rng))

    def test_transpose(self, rng):
        check_op_grad(lambda t: T.transpose(t, (1, 0, 2)), _r((2, 3, 4), rng))

    def test_getitem(self, rng):
        check_op_grad(lambda t: T.getitem(t, (slice(None), 1)), _r((3, 4), rng))

    def test_concat(self, rng):
        b = Tensor(_r((2, 4), rng))
        check_op_grad(lambda t: T.concat([t, b], axis=0), _r((3, 4), rng))

    def test_im2col_col2im(self, rng):
        check_op_grad(lambda t: T.im2col(t, 2, 2), _r((2, 3, 4, 4), rng))
        cols = _r((2, 3 * 4, 9), rng)
        check_op_grad(lambda t: T.col2im(t, (2, 3, 4, 4), 2, 2), cols)

    def test_pad2d(self, rng):
        check_op_grad(lambda t: T.pad2d(t, 1), _r((2, 3, 4, 4), rng))

    def test_softmax(self, rng):
        w = Tensor(_r((3, 5), rng))
        check_op_grad(lambda t: T.mul(T.softmax(t, axis=-1), w), _r((3, 5), rng))

    def test_log_softmax(self, rng):
        check_op_grad(lambda t: T.log_softmax(t, axis=-1), _r((3, 5), rng))

    def test_cross_entropy(self, rng):
        onehot = np.eye(4)[[0, 2, 3]]
        check_op_grad(lambda t: T.cross_entropy(t, onehot), _r((3, 4), rng))

    def test_batch_norm(self, rng):
        # a plain sum of the normalized output is constant in x, so weight
        # the output to get a non-degenerate gradient
        g = Tensor(_r((3,), rng, 0.5, 1.5))
        b = Tensor(_r((3,), rng))
        w = Tensor(_r((4, 3, 2, 2), rng))
        check_op_grad(lambda t: T.mul(T.batch_norm(t, g, b), w),
                      _r((4, 3, 2, 2), rng), tol=1e-5)

    def test_batch_norm_gamma_beta_grads(self, rng):
        x = Tensor(_r((4, 3, 2, 2), rng))
        b = Tensor(_r((3,), rng))
        w = Tensor(_r((4, 3, 2, 2), rng))
        check_op_grad(lambda t: T.mul(T.batch_norm(x, t, b), w),
                      _r((3,), rng, 0.5, 1.5), tol=1e-5)

    def test_conv2d(self, rng):
        w = Tensor(_r((4, 3, 3, 3), rng))
        b = Tensor(_r((4,), rng))
        check_op_grad(lambda t: T.conv2d(t, w, b, pad=1), _r((2, 3, 5, 5), rng),
                      tol=1e-5)
        x = Tensor(_r((2, 3, 5, 5), rng))
        check_op_grad(lambda t: T.conv2d(x, t, b, pad=1), _r((4, 3, 3, 3), rng),
                      tol=1e-5)

    def test_max_pool2x2(self, rng):
        check_op_grad(T.max_pool2x2, _r((2, 3, 4, 4), rng))

    def test_squared_distance(self, rng):
        b = Tensor(_r((4, 6), rng))
        check_op_grad(lambda t: T.squared_distance(t, b), _r((3, 6), rng),
                      tol=1e-5)

    def test_cosine_similarity(self, rng):
        b = Tensor(_r((3, 6), rng, 0.5, 1.5))
        check_op_grad(lambda t: T.cosine_similarity(t, b), _r((3, 6), rng, 0.5, 1.5),
                      tol=1e-5)


# -- softmax/probability properties ---------------------------------------


class TestSoftmaxProperties:
    def test_rows_sum_to_one(self, rng):
        for _ in range(100):
            x = Tensor(rng.normal(size=(4, 7)) * rng.uniform(1, 50))
            p = T.softmax(x, axis=-1).data
            assert np.all(p >= 0)
            assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        a = T.softmax(Tensor(x), axis=-1).data
        b = T.softmax(Tensor(x + 100.0), axis=-1).data
        assert np.allclose(a, b, atol=1e-7)

    def test_large_logits_stable(self):
        p = T.softmax(Tensor(np.array([1e4, 0.0, -1e4])), axis=-1).data
        assert np.isfinite(p).all() and abs(p.sum() - 1.0) < 1e-9

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(3, 5))
        a = T.log_softmax(Tensor(x), axis=-1).data
        b = np.log(T.softmax(Tensor(x), axis=-1).data)
        assert np.allclose(a, b, atol=1e-6)


# -- higher-order gradients -----------------------------------------------


class TestDoubleBackward:
    def test_cubic_second_derivative(self):
        # d2/dx2 of x^3 at x=2 is 12
        x = Tensor(np.asarray(2.0), requires_grad=True)
        y = x * x * x
        (g,) = T.grad(y, [x], create_graph=True)
        (g2,) = T.grad(g, [x])
        assert abs(float(g2.data) - 12.0) < 1e-10

    def test_mixed_partial(self):
        # f = x^2 * y, d2f/dxdy = 2x
        x = Tensor(np.asarray(3.0), requires_grad=True)
        y = Tensor(np.asarray(5.0), requires_grad=True)
        f = x * x * y
        (gx,) = T.grad(f, [x], create_graph=True)
        (gxy,) = T.grad(gx, [y])
        assert abs(float(gxy.data) - 6.0) < 1e-10

    def test_second_derivative_through_matmul(self, rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        y = T.sum_(T.matmul(a, a))
        (g,) = T.grad(y, [a], create_graph=True)
        (g2,) = T.grad(T.sum_(g * g), [a])
        assert np.isfinite(g2.data).all()


# -- graph and error semantics --------------------------------------------


class TestGraphRules:
    def test_grad_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            T.grad(x * x, [x])

    def test_unreachable_warns_and_zeros(self):
        x = Tensor(np.asarray(1.0), requires_grad=True)
        z = Tensor(np.asarray(1.0), requires_grad=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            (gz,) = T.grad(T.sum_(x * x), [z])
        assert float(gz.data) == 0.0
        assert any("unreachable" in str(w.message).lower() for w in caught)

    def test_unreachable_raises_when_disallowed(self):
        x = Tensor(np.asarray(1.0), requires_grad=True)
        z = Tensor(np.asarray(1.0), requires_grad=True)
        with pytest.raises(GraphError):
            T.grad(T.sum_(x * x), [z], allow_unreachable=False)

    def test_no_grad_detaches(self):
        x = Tensor(np.asarray(2.0), requires_grad=True)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.asarray(3.0), requires_grad=True)
        y = x * x + x * x           # 2x^2, dy/dx = 4x = 12
        (g,) = T.grad(y, [x])
        assert abs(float(g.data) - 12.0) < 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_nonfinite_input_raises(self):
        with pytest.raises(NumericError):
            T.exp(Tensor(np.asarray([1.0, np.inf])))

    def test_scatter_is_getitem_adjoint(self, rng):
        # <scatter(g), x> == <g, x[key]> for random g -- exact adjointness
        x = rng.normal(size=(4, 5))
        g = rng.normal(size=(5,))
        key = (2,)
        lhs = np.sum(T.scatter(Tensor(g), key, (4, 5)).data * x)
        rhs = np.sum(g * x[key])
        assert abs(lhs - rhs) < 1e-12


# -- composite network check ----------------------------------------------


def test_small_convnet_loss_grad_matches_fd(rng):
    """conv + batch norm + relu + pool + cross-entropy, checked end to end."""
    x = rng.normal(size=(4, 1, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3)) * 0.5
    onehot = np.eye(3)[[0, 1, 2, 0]]
    gam = Tensor(np.ones(3), requires_grad=True)
    bet = Tensor(np.zeros(3), requires_grad=True)

    def forward(wv):
        h = T.conv2d(Tensor(x), wv, pad=1)
        h = T.batch_norm(h, gam, bet)
        h = T.max_pool2x2(T.relu(h))
        logits = T.reshape(T.mean(h, axis=(2, 3)), (4, 3))
        return T.cross_entropy(logits, onehot)

    wt = Tensor(w.copy(), requires_grad=True)
    (ad,) = T.grad(forward(wt), [wt])
    fd = fd_grad(lambda v: float(forward(Tensor(v)).data), w, eps=1e-5)
    assert rel_err(ad.data, fd, floor=1e-6) <= 1e-4

import numpy as np
import pytest

from gradlab import tensor as T
from gradlab.checks import fd_check, numeric_grad, op_check_cases
from gradlab.tensor import (GraphError, NumericsError, ShapeError, Tensor,
                            backward, no_grad)


def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[3.0], [4.0]])


def test_relu_definition():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(Tensor([[0.0, 0.0, 0.0]]), np.array([1]))
    assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        T.cross_entropy(Tensor([[0.0, 0.0]]), np.array([2]))


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    grads = backward(T.tsum(T.power(x, 2.0)), [x])
    assert np.array_equal(grads[x].data, [2.0, 4.0, 6.0])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_non_scalar_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(T.mul(x, 2.0), [x])


def test_unreachable_wrt_rejected():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([1.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(T.tsum(T.mul(x, 2.0)), [y])


def test_nan_raises_eagerly():
    x = Tensor([-1.0])
    with pytest.raises(NumericsError, match="log"):
        T.tlog(x)


def test_all_op_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    failures = []
    for _ in range(12):
        for name, fn, inputs in op_check_cases(rng):
            ok, err = fd_check(fn, inputs, rng)
            if not ok:
                failures.append((name, err))
    assert not failures, failures


def test_cosine_of_net_gradient_matches_fd():
    # external oracle first: central differences of a cosine-similarity loss
    # through a 2-layer net with < 200 parameters
    rng = np.random.default_rng(3)
    w1 = Tensor(rng.normal(size=(6, 8)) * 0.5, requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
    target = rng.normal(size=(6, 8))

    def loss_from(x_np):
        x = Tensor(x_np, requires_grad=True)
        h = T.relu(T.matmul(x, w1))
        out = T.tsum(T.power(T.matmul(h, w2), 2.0))
        g = backward(out, [w1], create_graph=True)[w1]
        num = T.tsum(T.mul(g, Tensor(target)))
        den = T.mul(T.l2_norm(g), float(np.linalg.norm(target)))
        return T.div(num, den), x

    x0 = rng.normal(size=(2, 6))
    loss, x = loss_from(x0)
    ana = backward(loss, [x])[x].data
    num = numeric_grad(lambda arr: loss_from(arr)[0].item(), x0)
    assert np.allclose(ana, num, rtol=1e-3, atol=1e-6)


def test_cosine_loss_closed_form_linear_victim():
    # hand derivation for a linear regression victim f(x) = w.x with loss
    # 0.5*(w.x - y)^2: the weight gradient is (w.x - y) * x, so for target c
    # and residual r > 0,
    #   L = 1 - (x.c) / (|x||c|),
    #   dL/dx = -( c/(|x||c|) - (x.c) x / (|x|^3 |c|) ).
    rng = np.random.default_rng(11)
    w = rng.normal(size=5)
    c = rng.normal(size=5)
    x0 = rng.normal(size=5) + 3.0       # keeps residual w.x - y positive
    y = w @ x0 - 5.0

    wt = Tensor(w, requires_grad=True)
    x = Tensor(x0, requires_grad=True)
    pred = T.tsum(T.mul(x, wt))
    victim_loss = T.mul(T.power(T.sub(pred, y), 2.0), 0.5)
    gw = backward(victim_loss, [wt], create_graph=True)[wt]
    cos = T.div(T.tsum(T.mul(gw, Tensor(c))),
                T.mul(T.l2_norm(gw), float(np.linalg.norm(c))))
    loss = T.sub(1.0, cos)
    ana = backward(loss, [x])[x].data

    nx, nc = np.linalg.norm(x0), np.linalg.norm(c)
    expected = -(c / (nx * nc) - (x0 @ c) * x0 / (nx ** 3 * nc))
    assert np.allclose(ana, expected, rtol=1e-10, atol=1e-12)


def test_create_graph_flag_preserves_first_order_values():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    loss = T.tsum(T.power(T.matmul(x, x), 2.0))
    g_plain = backward(loss, [x], create_graph=False)[x]
    g_graph = backward(loss, [x], create_graph=True)[x]
    assert np.array_equal(g_plain.data, g_graph.data)
    assert not g_plain.requires_grad
    assert g_graph.requires_grad


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        loss = T.tsum(T.power(T.relu(T.matmul(x, w)), 2.0))
        g = backward(loss, [x, w])
        return loss.item(), g[x].data.copy(), g[w].data.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_im2col_col2im_adjoint():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 5, 5))
    cols_shape = (2, 3 * 9, 25)
    y = rng.normal(size=cols_shape)
    with no_grad():
        ax = T.im2col(Tensor(x), 3, 3, 1, 1).data
        aty = T.col2im(Tensor(y), (2, 3, 5, 5), 3, 3, 1, 1).data
    assert np.isclose((ax * y).sum(), (x * aty).sum())


def test_no_grad_suppresses_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        out = T.mul(x, 3.0)
    assert not out.requires_grad and out._parents == ()


def test_tensor_shape_invariant():
    t = Tensor(np.zeros((2, 3)))
    assert t.size == 6 and t.shape == (2, 3)
    with pytest.raises(ShapeError):
        T.reshape(t, (4, 2))

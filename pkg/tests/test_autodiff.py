import numpy as np
import pytest

from multiroute import autodiff as ad
from multiroute.autodiff import (
    NonFiniteError,
    Param,
    ParamSet,
    ShapeError,
    Tensor,
    backward,
    forward_op,
    grad_check,
)


def central_diff(f, x, i, eps=1e-5):
    # independent finite-difference oracle on a flat copy of x
    x = x.copy().reshape(-1)
    x[i] += eps
    plus = f(x)
    x[i] -= 2 * eps
    minus = f(x)
    return (plus - minus) / (2 * eps)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = a @ Tensor(np.eye(2))
    assert np.array_equal(out.data, a.data)


def test_softmax_uniform():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_concat_slice_roundtrip():
    a = Tensor(np.arange(6, dtype=float).reshape(2, 3))
    b = Tensor(np.arange(3, dtype=float).reshape(1, 3) + 10)
    both = ad.concat([a, b], axis=0)
    back = ad.narrow(both, axis=0, start=0, length=2)
    assert np.array_equal(back.data, a.data)


def test_square_gradient_matches_oracle():
    p = Param("x", np.array(3.0))
    loss = ad.mul(p.tensor, p.tensor)
    grads = backward(loss, [p])
    assert np.isclose(grads["x"], 6.0, rtol=1e-12)
    numeric = central_diff(lambda v: float(v[0] * v[0]), np.array([3.0]), 0)
    assert np.isclose(grads["x"], numeric, rtol=1e-6)


def test_sum_of_softmax_has_zero_gradient():
    p = Param("v", np.array([0.3, -1.2, 2.0, 0.7]))
    loss = ad.softmax(p.tensor).sum()
    grads = backward(loss, [p])
    assert np.allclose(grads["v"], 0.0, atol=1e-12)


def test_matmul_partials_against_finite_differences():
    rng = np.random.default_rng(7)
    a0 = rng.normal(size=(3, 3))
    b0 = rng.normal(size=(3, 3))
    pa, pb = Param("a", a0), Param("b", b0)

    def f():
        return (pa.tensor @ pb.tensor).sum()

    assert grad_check(f, [pa, pb], eps=1e-5) <= 1e-6


def test_every_op_kind_gradient():
    rng = np.random.default_rng(11)
    # ops whose derivative exists everywhere we sample
    unary = ["neg", "exp", "sigmoid", "softplus", "relu", "gelu", "tanh", "abs"]
    for kind in unary:
        x0 = rng.normal(size=(4, 5)) + 0.1  # keep relu/abs away from the kink
        p = Param(kind, x0)
        err = grad_check(lambda p=p, kind=kind: forward_op(kind, [p.tensor]).sum(), [p])
        assert err <= 1e-6, kind

    p = Param("logx", np.abs(rng.normal(size=(3, 4))) + 0.5)
    assert grad_check(lambda: ad.log(p.tensor).sum(), [p]) <= 1e-6
    p = Param("powx", np.abs(rng.normal(size=(3, 4))) + 0.5)
    assert grad_check(lambda: ad.pow_(p.tensor, 1.7).sum(), [p]) <= 1e-6

    for kind in ["add", "sub", "mul", "div", "maximum", "minimum"]:
        a = Param("a_" + kind, rng.normal(size=(3, 4)))
        b = Param("b_" + kind, rng.normal(size=(3, 4)) + 3.0)  # offset avoids div-by-0 and ties
        err = grad_check(lambda a=a, b=b, kind=kind: forward_op(kind, [a.tensor, b.tensor]).sum(),
                         [a, b])
        assert err <= 1e-6, kind


def test_structural_op_gradients():
    rng = np.random.default_rng(13)
    p = Param("x", rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 3, 4))  # weighting makes reductions non-trivial

    def weighted(t):
        return ad.mul(t, Tensor(w.reshape(t.shape))).sum()

    cases = [
        lambda: weighted(ad.transpose(p.tensor, (2, 0, 1))),
        lambda: weighted(ad.reshape(p.tensor, (6, 4))),
        lambda: ad.mul(ad.narrow(p.tensor, 1, 1, 2), Tensor(w[:, 1:3, :])).sum(),
        lambda: ad.mul(ad.softmax(p.tensor, axis=-1), Tensor(w)).sum(),
        lambda: ad.mul(ad.layer_norm(p.tensor, axis=-1), Tensor(w)).sum(),
        lambda: ad.mul(p.tensor.mean(axis=1), Tensor(w[:, 0, :])).sum(),
        lambda: ad.mul(ad.concat([p.tensor, p.tensor], axis=0),
                       Tensor(np.concatenate([w, 2 * w], axis=0))).sum(),
        lambda: ad.mul(ad.masked_fill(p.tensor, w > 0.5, -9.0), Tensor(w)).sum(),
    ]
    for i, f in enumerate(cases):
        assert grad_check(f, [p]) <= 1e-6, f"case {i}"

    q = Param("rows", rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    wq = rng.normal(size=(4, 3))
    err = grad_check(lambda: ad.mul(ad.take_rows(q.tensor, idx), Tensor(wq)).sum(), [q])
    assert err <= 1e-6

    e = Param("exp", rng.normal(size=(1, 3)))
    we = rng.normal(size=(4, 3))
    err = grad_check(lambda: ad.mul(ad.expand(e.tensor, (4, 3)), Tensor(we)).sum(), [e])
    assert err <= 1e-6


def test_batched_matmul_gradient():
    rng = np.random.default_rng(17)
    a = Param("a", rng.normal(size=(3, 2, 4)))
    b = Param("b", rng.normal(size=(3, 4, 5)))
    w = rng.normal(size=(3, 2, 5))
    err = grad_check(lambda: ad.mul(a.tensor @ b.tensor, Tensor(w)).sum(), [a, b])
    assert err <= 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        axis = int(rng.integers(0, len(shape)))
        out = ad.softmax(Tensor(rng.normal(scale=5, size=shape)), axis=axis)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=axis), 1.0, atol=1e-12)


def test_layer_norm_moments():
    rng = np.random.default_rng(4)
    x = rng.normal(loc=3.0, scale=2.5, size=(6, 32))
    out = ad.layer_norm(Tensor(x), axis=-1).data
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-10)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) <= 1e-8)


def test_unreachable_leaf_gets_exact_zero():
    a = Param("used", np.array([1.0, 2.0]))
    b = Param("unused", np.array([[5.0, 1.0]]))
    loss = ad.mul(a.tensor, a.tensor).sum()
    grads = backward(loss, [a, b])
    assert grads["unused"].shape == (1, 2)
    assert np.all(grads["unused"] == 0.0)
    assert b.tensor.grad is None


def test_backward_accumulates_until_reset():
    p = Param("x", np.array(2.0))
    for expected in (4.0, 8.0):
        loss = ad.mul(p.tensor, p.tensor)
        backward(loss, [p])
        assert np.isclose(p.tensor.grad, expected)
    p.tensor.zero_grad()
    backward(ad.mul(p.tensor, p.tensor), [p])
    assert np.isclose(p.tensor.grad, 4.0)


def test_backward_rejects_non_scalar():
    p = Param("x", np.array([1.0, 2.0]))
    with pytest.raises(ShapeError):
        backward(ad.mul(p.tensor, 2.0))


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(KeyError):
        forward_op("no-such-op", [Tensor(np.ones(2))])


def test_strict_mode_flags_non_finite():
    ad.set_strict_mode(True)
    try:
        with pytest.raises(NonFiniteError):
            ad.add(Tensor(np.array([np.nan])), Tensor(np.array([1.0])))
    finally:
        ad.set_strict_mode(False)


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(7,))
    p = Param("theta", rng.normal(size=(7,)))
    err = grad_check(lambda: ad.mul(p.tensor, Tensor(w)).sum(), [p])
    assert err <= 1e-9


def test_grad_check_flags_planted_fault():
    # a "sigmoid" with the sign of its derivative flipped
    def bad_sigmoid(t):
        x = t.data
        out = 1.0 / (1.0 + np.exp(-x))
        return Tensor(out, op="bad_sigmoid", parents=(t,),
                      grad_fn=lambda g: (-g * out * (1.0 - out),))

    p = Param("x", np.array([0.3, -0.7, 1.1]))
    err = grad_check(lambda: bad_sigmoid(p.tensor).sum(), [p])
    assert err > 1e-1


def test_param_set_rejects_duplicates():
    ps = ParamSet()
    ps.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ps.add("w", np.zeros(3))
    assert ps.names() == ["w"]


def test_deterministic_repeat():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(8, 8))
    a = Param("a", x)

    def run():
        a.tensor.zero_grad()
        loss = ad.layer_norm(ad.softmax(a.tensor @ a.tensor, axis=-1)).sum()
        backward(loss, [a])
        return loss.item(), a.tensor.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)

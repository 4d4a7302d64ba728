import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hnpm import autodiff as ad
from hnpm.autodiff import Tensor
from hnpm.errors import ContractError, DegenerateInputError, DomainError, ShapeError

RTOL = 1e-5


def grad_of(fn, x):
    t = Tensor(x, trainable=True)
    ad.backward(fn(t))
    return t.grad


def fd(fn, x, eps=1e-5):
    return ad.finite_diff_grad(fn, x, eps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- elementwise -------------------------------------------------------------


def test_square_value_and_grad():
    x = Tensor([3.0], trainable=True)
    y = ad.square(x)
    assert y.values.tolist() == [9.0]
    ad.backward(ad.sum(y))
    # central difference of x^2 at 3 with eps=1e-6
    oracle = ((3.0 + 1e-6) ** 2 - (3.0 - 1e-6) ** 2) / 2e-6
    assert x.grad[0] == pytest.approx(oracle, rel=1e-9)
    assert x.grad[0] == 6.0


def test_add_zero_is_identity():
    x = Tensor([1.5, -2.0, 7.25])
    assert np.array_equal(ad.add(x, 0.0).values, x.values)


def test_relu_definition():
    assert ad.relu(Tensor([-1.0, 2.0])).values.tolist() == [0.0, 2.0]


def test_elementwise_dispatch_and_errors():
    a = Tensor([1.0, 2.0])
    assert ad.elementwise("mul", a, Tensor([3.0, 4.0])).values.tolist() == [3.0, 8.0]
    with pytest.raises(ShapeError):
        ad.elementwise("add", a, Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(DomainError):
        ad.elementwise("log", Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-1.0]))
    with pytest.raises(ContractError):
        ad.elementwise("cube", a)


def test_scalar_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert ad.mul(a, Tensor(2.0)).values.sum() == 12.0
    with pytest.raises(ShapeError):
        ad.add(a, Tensor(np.ones(3)))


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_gradients_match_fd(kind, rng):
    b = rng.normal(size=(3, 4))
    x0 = rng.normal(size=(3, 4))

    def f(x):
        return ad.sum(ad.square(ad.elementwise(kind, x, Tensor(b))))

    assert ad.rel_error(grad_of(f, x0), fd(f, x0)) < RTOL

    def g(y):
        return ad.sum(ad.square(ad.elementwise(kind, Tensor(x0), y)))

    assert ad.rel_error(grad_of(g, b), fd(g, b)) < RTOL


@pytest.mark.parametrize("kind", ["square", "log", "relu"])
def test_unary_gradients_match_fd(kind, rng):
    x0 = rng.uniform(0.3, 2.0, size=(4, 3)) * rng.choice([-1, 1], size=(4, 3))
    if kind == "log":
        x0 = np.abs(x0)
    w = rng.normal(size=(4, 3))

    def f(x):
        return ad.sum(ad.mul(ad.elementwise(kind, x), Tensor(w)))

    assert ad.rel_error(grad_of(f, x0), fd(f, x0)) < RTOL


# -- matmul ----------------------------------------------------------------------


def test_matmul_identity_and_hand_case():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(a)).values, a)
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.values.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_fd(rng):
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def fa(a):
        return ad.sum(ad.matmul(a, Tensor(b0)))

    def fb(b):
        return ad.sum(ad.square(ad.matmul(Tensor(a0), b)))

    assert ad.rel_error(grad_of(fa, a0), fd(fa, a0)) < 1e-6
    assert ad.rel_error(grad_of(fb, b0), fd(fb, b0)) < 1e-6


# -- inf-norm normalisation ----------------------------------------------------


def test_inf_norm_examples():
    assert ad.inf_norm_normalize(Tensor([[2.0, -4.0]])).values.tolist() == [[0.5, -1.0]]
    assert ad.inf_norm_normalize(Tensor([[1.0]])).values.tolist() == [[1.0]]
    with pytest.raises(DegenerateInputError):
        ad.inf_norm_normalize(Tensor([[0.0, 0.0]]))


def test_inf_norm_grad_fd(rng):
    x0 = rng.normal(size=(5, 6))
    w = rng.normal(size=(5, 6))

    def f(x):
        return ad.sum(ad.mul(ad.inf_norm_normalize(x), Tensor(w)))

    assert ad.rel_error(grad_of(f, x0), fd(f, x0)) < RTOL


def test_inf_norm_tie_uses_lowest_index():
    x = Tensor([[2.0, -2.0, 1.0]], trainable=True)
    ad.backward(ad.sum(ad.inf_norm_normalize(x)))
    # with the peak fixed at index 0: d/dx0 of (x0 + x1 + x2)/|x0| = (|x0| - sum)/x0^2
    assert x.grad[0, 0] == pytest.approx((2.0 - 1.0) / 4.0)
    assert x.grad[0, 1] == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_inf_norm_rows_bounded(x):
    x = x.copy()
    x[:, 0] += np.where(np.abs(x).max(axis=1) == 0, 1.0, 0.0)
    y = ad.inf_norm_normalize(Tensor(x)).values
    assert np.all(np.abs(y) <= 1.0)
    assert np.all(np.any(np.abs(y) == 1.0, axis=1))


# -- reductions ------------------------------------------------------------------


def test_reduce_examples():
    assert ad.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert ad.reduce("mean", Tensor(np.full((3, 4), 2.5))).item() == 2.5
    x = Tensor(np.arange(6.0).reshape(2, 3), trainable=True)
    ad.backward(ad.reduce("sum", x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.reduce("sum", x, axis=2)


@pytest.mark.parametrize("kind", ["sum", "mean", "max_abs"])
@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reduce_grad_fd(kind, axis, rng):
    x0 = rng.normal(size=(4, 5))
    w = rng.normal(size=np.sum(x0, axis=axis).shape) if axis is not None else 1.7

    def f(x):
        r = ad.reduce(kind, x, axis)
        return ad.sum(ad.mul(r, Tensor(w)))

    assert ad.rel_error(grad_of(f, x0), fd(f, x0)) < RTOL


# -- detach and backward ----------------------------------------------------------


def test_detach_blocks_gradient():
    x = Tensor([1.0, -2.0], trainable=True)
    d = ad.detach(x)
    assert d.values is x.values
    ad.backward(ad.sum(ad.square(d)))
    assert x.grad is None


def test_detach_partial(rng):
    x0, y0 = rng.normal(size=3), rng.normal(size=3)
    x, y = Tensor(x0, trainable=True), Tensor(y0, trainable=True)
    ad.backward(ad.sum(ad.mul(x, ad.detach(y))))
    assert y.grad is None
    oracle = fd(lambda t: ad.sum(ad.mul(t, Tensor(y0))), x0)
    assert ad.rel_error(x.grad, oracle) < RTOL


def test_backward_scalar_contract():
    x = Tensor([3.0], trainable=True)
    ad.backward(ad.square(x))
    assert x.grad[0] == 6.0
    with pytest.raises(ContractError):
        ad.backward(ad.square(Tensor([1.0, 2.0], trainable=True)))


def test_backward_independent_leaf_untouched():
    x = Tensor([3.0], trainable=True)
    y = Tensor([2.0], trainable=True)
    ad.backward(ad.sum(ad.square(y)))
    assert x.grad is None


def test_reuse_accumulates():
    x = Tensor([2.0], trainable=True)
    ad.backward(ad.sum(ad.add(ad.mul(x, x), x)))
    assert x.grad[0] == 5.0


def test_tape_visits_in_reverse_order():
    x = Tensor([1.0, 2.0], trainable=True)
    y = ad.square(x)
    z = ad.add(y, x)
    loss = ad.sum(z)
    tape = ad.Tape.of(loss)
    assert [n.op for n in tape.records] == ["square", "add", "reduce_sum"]
    assert [n.op for n in tape.reverse()] == ["reduce_sum", "add", "square"]
    assert len({id(n) for n in tape.records}) == len(tape)


def test_no_grad_records_nothing():
    x = Tensor([1.0], trainable=True)
    with ad.no_grad():
        y = ad.square(x)
    assert y._node is None


# -- remaining differentiable ops ----------------------------------------------


def test_pairwise_sqdist_grad_fd(rng):
    a0, b0 = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 5))

    def fa(a):
        return ad.sum(ad.mul(ad.pairwise_sqdist(a, Tensor(b0)), Tensor(w)))

    def fb(b):
        return ad.sum(ad.mul(ad.pairwise_sqdist(Tensor(a0), b), Tensor(w)))

    assert ad.rel_error(grad_of(fa, a0), fd(fa, a0)) < RTOL
    assert ad.rel_error(grad_of(fb, b0), fd(fb, b0)) < RTOL


def test_tile_reshape_take_rows_grad(rng):
    v0 = rng.normal(size=(1, 3))
    w = rng.normal(size=(4, 3))

    def f(v):
        return ad.sum(ad.mul(ad.tile_rows(v, 4), Tensor(w)))

    assert ad.rel_error(grad_of(f, v0), fd(f, v0)) < RTOL

    x0 = rng.normal(size=(5, 2))
    w2 = rng.normal(size=(3, 2))

    def g(x):
        return ad.sum(ad.mul(ad.take_rows(x, [4, 0, 4]), Tensor(w2)))

    assert ad.rel_error(grad_of(g, x0), fd(g, x0)) < RTOL

    def h(x):
        return ad.sum(ad.square(ad.reshape(x, (2, 5))))

    assert ad.rel_error(grad_of(h, x0), fd(h, x0)) < RTOL


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_grad_fd(stride, rng):
    x0 = rng.normal(size=(2, 2, 5, 5))
    w0 = rng.normal(size=(3, 2, 3, 3))
    b0 = rng.normal(size=3)

    def out(x, w, b):
        return ad.add_channel_bias(ad.conv2d(x, w, stride=stride), b)

    def fx(x):
        return ad.sum(ad.square(out(x, Tensor(w0), Tensor(b0))))

    def fw(w):
        return ad.sum(ad.square(out(Tensor(x0), w, Tensor(b0))))

    def fb(b):
        return ad.sum(ad.square(out(Tensor(x0), Tensor(w0), b)))

    assert ad.rel_error(grad_of(fx, x0), fd(fx, x0)) < RTOL
    assert ad.rel_error(grad_of(fw, w0), fd(fw, w0)) < RTOL
    assert ad.rel_error(grad_of(fb, b0), fd(fb, b0)) < RTOL


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(1, 2, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), stride=1).values
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 1, 4, 4))
    for i in range(4):
        for j in range(4):
            want[0, 0, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[0])
    assert np.allclose(got, want, atol=1e-12)


# -- softmax cross-entropy -----------------------------------------------------------


def test_softmax_ce_uniform_is_log_k():
    assert ad.softmax_cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7))


def test_softmax_ce_limit():
    losses = [ad.softmax_cross_entropy(Tensor([[m, 0.0, 0.0]]), [0]).item() for m in (1.0, 10.0, 50.0)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-20


def test_softmax_ce_grad_and_labels(rng):
    z0 = rng.normal(size=(6, 4))
    y = [0, 1, 2, 3, 1, 0]

    def f(z):
        return ad.softmax_cross_entropy(z, y)

    assert ad.rel_error(grad_of(f, z0), fd(f, z0)) < RTOL
    with pytest.raises(ContractError):
        ad.softmax_cross_entropy(Tensor(z0), [0, 1, 2, 3, 4, 0])


# -- clipping and finite differences ---------------------------------------------------


def test_clip_examples():
    g = [np.array([1.2, 0.0]), np.array([[1.6]])]  # norm 2.0
    clipped, norm = ad.clip_global_norm(g, 1.0)
    assert norm == pytest.approx(2.0)
    assert np.allclose(clipped[0], [0.6, 0.0]) and np.allclose(clipped[1], [[0.8]])
    small = [np.array([0.3, 0.4])]
    out, _ = ad.clip_global_norm(small, 1.0)
    assert np.array_equal(out[0], small[0])
    zero = [np.zeros(3)]
    assert np.array_equal(ad.clip_global_norm(zero, 1.0)[0][0], zero[0])
    assert ad.clip_global_norm([], 1.0)[0] == []


@settings(max_examples=100, deadline=None)
@given(
    st.lists(arrays(np.float64, 5, elements=st.floats(-1e4, 1e4, allow_nan=False)), min_size=1, max_size=4),
    st.floats(1e-3, 10.0),
)
def test_clip_idempotent_and_bounded(grads, max_norm):
    once, _ = ad.clip_global_norm(grads, max_norm)
    twice, _ = ad.clip_global_norm(once, max_norm)
    assert ad.global_norm(once) <= max_norm
    assert all(np.array_equal(a, b) for a, b in zip(once, twice))


def test_finite_diff_examples():
    g = ad.finite_diff_grad(lambda t: ad.sum(ad.square(t)), np.array([1.0, 2.0]), 1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)
    assert np.array_equal(ad.finite_diff_grad(lambda t: 4.0, np.array([1.0, 2.0]), 1e-5), [0.0, 0.0])
    with pytest.raises(DomainError):
        ad.finite_diff_grad(lambda t: float("inf"), np.array([1.0]), 1e-5)


def test_determinism(rng):
    x0 = rng.normal(size=(6, 5))

    def run():
        x = Tensor(x0, trainable=True)
        loss = ad.sum(ad.square(ad.inf_norm_normalize(ad.matmul(x, Tensor(x0.T)))))
        ad.backward(loss)
        return loss.values.tobytes(), x.grad.tobytes()

    assert run() == run()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from libra_toy import numcore as nc


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal((nc.tensor(np.eye(2)) @ nc.tensor(m)).data, m)


def test_softmax_uniform():
    np.testing.assert_allclose(nc.softmax(nc.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_cross_entropy_uniform_logits():
    ce = nc.cross_entropy(nc.tensor([[0.0, 0.0]]), np.array([0]))
    assert abs(ce.item() - np.log(2)) < 1e-15
    assert abs(ce.item() - 0.6931) < 1e-4


def test_backward_sum_and_square():
    x = nc.tensor([1.0, 2.0, 3.0], requires_grad=True)
    nc.backward(nc.sum_(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    y = nc.tensor(2.0, requires_grad=True)
    nc.backward(y * y)
    assert y.grad == 4.0


def test_backward_rejects_non_scalar():
    x = nc.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nc.ShapeError):
        nc.backward(x * x)


def test_shape_mismatch_names_shapes():
    with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.tensor(np.ones((2, 3))) @ nc.tensor(np.ones((2, 3)))


def test_non_finite_forward_is_an_error():
    with pytest.raises(nc.NonFiniteError), np.errstate(over="ignore"):
        nc.scale(nc.tensor([1e308]), 10.0)


def test_graph_visits_shared_nodes_once():
    x = nc.tensor([3.0], requires_grad=True)
    y = x * x
    z = y + y  # y reached twice
    nc.backward(nc.sum_(z))
    assert x.grad[0] == 12.0


def test_frozen_leaves_get_no_grad():
    w = nc.tensor(np.ones((2, 2)))
    x = nc.tensor(np.ones((1, 2)), requires_grad=True)
    nc.backward(nc.sum_(x @ w))
    assert w.grad is None
    assert x.grad is not None


def test_finite_diff_trivial_cases():
    assert nc.finite_diff_check(lambda x: x * x, [np.array(3.0)], eps=1e-6) < 1e-8
    assert nc.finite_diff_check(lambda x: nc.tensor(5.0) + nc.sum_(nc.scale(x, 0.0)), [np.array([1.0, 2.0])]) == 0.0


def test_finite_diff_rejects_non_finite():
    with pytest.raises(nc.NonFiniteError):
        nc.finite_diff_check(lambda x: nc.log(x), [np.array(-1.0)])


def _mlp(x, w1, w2, w3):
    h = nc.gelu(x @ w1)
    h = nc.silu(h @ w2)
    return nc.sum_(nc.tanh(h @ w3))


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(3, 2))]
    assert nc.finite_diff_check(_mlp, arrays) < 1e-5


# every primitive with a backward, on small random shapes
OPS = {
    "add_broadcast": (lambda a, b: nc.sum_((a + b) * (a + b)), [(2, 3), (3,)]),
    "sub": (lambda a, b: nc.sum_((a - b) * a), [(2, 3), (2, 1)]),
    "mul": (lambda a, b: nc.sum_(a * b * a), [(3, 2), (1, 2)]),
    "matmul_batched": (lambda a, b: nc.sum_(nc.tanh(a @ b)), [(2, 3, 4), (4, 2)]),
    "softmax": (lambda a, w: nc.sum_(nc.softmax(a) * w), [(3, 4), (3, 4)]),
    "softmax_masked": (lambda a, w: nc.sum_(nc.softmax(a, mask=nc.tril_mask(4)) * w), [(4, 4), (4, 4)]),
    "log_softmax": (lambda a, w: nc.sum_(nc.log_softmax(a) * w), [(3, 4), (3, 4)]),
    "rms_norm": (lambda a, g, w: nc.sum_(nc.rms_norm(a, g) * w), [(2, 3, 4), (4,), (2, 3, 4)]),
    "concat_split": (lambda a, b: nc.sum_(nc.tanh(nc.concat([a, b], axis=-1)) * 1.5), [(2, 3), (2, 2)]),
    "split": (lambda a: nc.sum_(nc.split(a, [2, 3])[1] * nc.split(a, [2, 3])[0][:, :1]), [(2, 5)]),
    "transpose_reshape": (lambda a: nc.sum_(nc.tanh(nc.reshape(nc.transpose(a, (1, 0, 2)), (3, 4)))),
                          [(2, 3, 2)]),
    "silu": (lambda a: nc.sum_(nc.silu(a) * a), [(3, 3)]),
    "gelu": (lambda a: nc.sum_(nc.gelu(a) * a), [(3, 3)]),
    "sigmoid": (lambda a: nc.sum_(nc.sigmoid(a) * a), [(3, 3)]),
    "mean": (lambda a: nc.mean(nc.tanh(a), axis=0).sum() * 2.0, [(3, 4)]),
    "where": (lambda a, b: nc.sum_(nc.where(np.array([[True, False, True]]), a, b) * a), [(2, 3), (2, 3)]),
    "rotary": (lambda a, w: nc.sum_(nc.rotary(a, *nc.rotary_tables(3, 4)) * w), [(2, 3, 4), (2, 3, 4)]),
    "getitem": (lambda a: nc.sum_(a[:, 1:3] * a[:, 0:2]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients(name):
    fn, shapes = OPS[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        arrays = [rng.normal(size=s) for s in shapes]
        assert nc.finite_diff_check(fn, arrays) < 1e-5, (name, seed)


@pytest.mark.parametrize("seed", range(20))
def test_embedding_and_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 5, size=(2, 3))
    targets = rng.integers(0, 4, size=(2, 3))
    weights = rng.integers(0, 2, size=(2, 3)).astype(float)

    def f(table, w):
        return nc.cross_entropy(nc.embedding(table, ids) @ w, targets, weights)

    assert nc.finite_diff_check(f, [rng.normal(size=(5, 3)), rng.normal(size=(3, 4))]) < 1e-5


def test_straight_through_is_identity_backward():
    x = nc.tensor([0.3, -0.2], requires_grad=True)
    y = nc.straight_through(x, np.sign)
    assert np.array_equal(y.data, [1.0, -1.0])
    nc.backward(nc.sum_(y * nc.tensor([2.0, 5.0])))
    assert np.array_equal(x.grad, [2.0, 5.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_softmax_rows_sum_to_one_and_masked_zero(n, m, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(n, m))
    mask = rng.random((n, m)) < 0.6
    mask[:, 0] = True
    y = nc.softmax(nc.tensor(x), mask=mask).data
    assert np.all(np.abs(y.sum(-1) - 1) <= 1e-12)
    assert np.all(y[~mask] == 0.0)


def test_softmax_minus_inf_entries_get_zero():
    y = nc.softmax(nc.tensor([[0.0, -np.inf, 1.0]])).data
    assert y[0, 1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2 ** 31))
def test_concat_then_split_is_identity(sizes, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(size=(2, s)) for s in sizes]
    back = nc.split(nc.concat([nc.tensor(p) for p in parts], axis=-1), sizes, axis=-1)
    for a, b in zip(parts, back):
        assert np.array_equal(a, b.data)

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from moenc import autodiff as ad
from moenc.autodiff import Tensor
from moenc.errors import ContractError, DimensionError


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def composite(x, W, b):
    h = ad.tanh(ad.add(ad.matmul(x, W), b))
    p = ad.softmax(h, axis=-1)
    lp = ad.log_softmax(ad.scale(h, 2.0), axis=0)
    top, _ = ad.max_with_index(p, axis=1)
    return ad.add(ad.add(ad.mean(ad.mul(p, lp)), ad.sum(ad.exp(ad.scale(top, 0.5)))),
                  ad.sum(ad.relu(ad.sub(h, 0.1))))


@pytest.mark.parametrize("seed", range(100))
def test_composite_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    n, d, m = r.integers(2, 5, size=3)
    x, W, b = leaf(r.normal(size=(n, d))), leaf(r.normal(size=(d, m))), leaf(r.normal(size=m))
    err = ad.finite_diff_check(lambda: composite(x, W, b), [x, W, b])
    assert err < 1e-6


OPS = {
    "add_broadcast": (lambda a, b: ad.sum(ad.mul(ad.add(a, b), a)), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum(ad.mul(ad.sub(a, b), ad.sub(a, b))), [(2, 3), (2, 3)]),
    "matmul_batched": (lambda a, b: ad.sum(ad.tanh(ad.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "transpose_reshape": (lambda a: ad.sum(ad.mul(ad.reshape(ad.transpose(a), (-1,)), ad.reshape(a, (-1,)))), [(3, 4)]),
    "getitem_repeat": (lambda a: ad.sum(ad.exp(a[np.array([0, 0, 2])])), [(3, 2)]),
    "concat_stack": (lambda a, b: ad.sum(ad.tanh(ad.concat([a, ad.stack([b, b])], axis=0))), [(1, 3), (3,)]),
    "log": (lambda a: ad.sum(ad.log(ad.exp(a))), [(4,)]),
    "mean_keepdims": (lambda a: ad.sum(ad.mul(ad.mean(a, axis=1, keepdims=True), a)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients(name):
    fn, shapes = OPS[name]
    r = np.random.default_rng(len(name))
    xs = [leaf(r.normal(size=s)) for s in shapes]
    assert ad.finite_diff_check(lambda: fn(*xs), xs) < 1e-7


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(a):
    for axis in (0, 1):
        p = ad.softmax(Tensor(a), axis=axis).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)


def test_softmax_survives_huge_logits():
    p = ad.softmax(Tensor(np.array([1e300, 0.0, -1e300])), axis=0).data
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_zero_log_zero_is_zero():
    p = leaf([0.0, 1.0])
    h = ad.sum(ad.mul(p, ad.log(p)))
    assert h.data == 0.0
    ad.backward(h)
    assert np.all(np.isfinite(p.grad))


def test_stop_gradient_blocks_flow():
    x = leaf([1.0, 2.0])
    y = ad.sum(ad.mul(ad.stop_gradient(x), x))
    ad.backward(y)
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_straight_through_value_and_gradient():
    x = leaf([0.3, -1.2])
    hard = Tensor(np.array([7.0, 8.0]))
    y = ad.straight_through(hard, ad.mul(x, x))
    np.testing.assert_array_equal(y.data, [7.0, 8.0])
    ad.backward(ad.sum(y))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_shared_node_accumulates():
    x = leaf(3.0)
    y = ad.mul(x, x)
    ad.backward(ad.add(y, y))
    assert x.grad == pytest.approx(12.0)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.backward(ad.mul(leaf([1.0, 2.0]), 2.0))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_constant_root_is_noop():
    t = Tensor(np.array(2.0))
    ad.backward(t)
    assert t.grad is None


def test_tape_is_topological():
    x = leaf(1.0)
    y = ad.exp(x)
    z = ad.add(ad.mul(y, x), y)
    order = ad.Tape.from_root(z).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]

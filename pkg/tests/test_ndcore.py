import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmm import ndcore as nd
from dmm.ndcore import ContractError, DimensionError, Tape, Tensor
from oracles import REL_TOL, numeric_grad, rel_error


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grad_of(fn, *arrays):
    """Analytic gradients of the scalar ``fn(*tensors)`` for every input."""
    ts = [leaf(a) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    nd.backward(tape, out)
    return [t.grad for t in ts]


def fd_check(fn, *arrays):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = grad_of(fn, *arrays)
    for k, arr in enumerate(arrays):
        def value():
            with nd.no_tape():
                return fn(*[Tensor(a) for a in arrays]).item()
        numeric = numeric_grad(value, arr)
        assert rel_error(analytic[k], numeric) < REL_TOL


def away_from_zero(rng, shape, lo=0.05):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo, x)


# ---------------------------------------------------------------- forward values


def test_matmul_identity_and_hand_example():
    v = np.array([[0.3], [-1.2]])
    assert np.array_equal(nd.matmul(Tensor(np.eye(2)), Tensor(v)).data, v)
    out = nd.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_sigmoid_values():
    assert nd.relu(Tensor([-1.5, 2.0])).data.tolist() == [0.0, 2.0]
    assert nd.sigmoid(Tensor([0.0])).item() == 0.5


def test_sigmoid_is_clamped():
    s = nd.sigmoid(Tensor([-1e4, 1e4], dtype=np.float64)).data
    assert s[0] == pytest.approx(1e-7) and s[1] == pytest.approx(1 - 1e-7)
    assert np.all(np.isfinite(np.log(s)))


def test_reductions():
    assert nd.mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0
    assert nd.sum(Tensor(np.zeros(5))).item() == 0.0
    assert nd.sum(Tensor(np.ones((2, 3))), axis=0).data.tolist() == [2.0, 2.0, 2.0]
    with pytest.raises(DimensionError):
        nd.sum(Tensor(np.ones((2, 3))), axis=2)


def test_broadcasting_is_scalar_or_equal_shape():
    a = Tensor(np.ones((2, 3)))
    assert nd.add(a, 1.0).data.shape == (2, 3)
    assert nd.mul(Tensor([2.0]), a).data.sum() == 12.0
    with pytest.raises(DimensionError):
        nd.add(a, Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        nd.bias_add(a, Tensor(np.ones(2)))


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        nd.log(Tensor([1.0, 0.0]))


# ---------------------------------------------------------------- backward contract


def test_square_grad_and_accumulation():
    assert grad_of(lambda x: nd.square(x), [3.0])[0].tolist() == [6.0]
    assert grad_of(lambda x: nd.add(x, x), [1.5])[0].tolist() == [2.0]


def test_sigmoid_grad_at_zero():
    g = grad_of(lambda x: nd.sigmoid(x), [0.0])[0]
    assert g[0] == pytest.approx(0.25, rel=1e-12)
    fd_check(lambda x: nd.sigmoid(x), [0.0])


def test_mean_grad_is_one_over_n():
    g = grad_of(lambda x: nd.mean(x), np.arange(5.0))[0]
    assert np.allclose(g, 0.2)
    fd_check(lambda x: nd.mean(x), np.arange(5.0))


def test_repeated_backward_doubles_leaf_grads():
    x = leaf([2.0, -1.0])
    with Tape() as tape:
        out = nd.sum(nd.square(x))
    nd.backward(tape, out)
    first = x.grad.copy()
    nd.backward(tape, out)
    assert np.array_equal(x.grad, 2 * first)


def test_backward_requires_scalar_root_on_tape():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = nd.square(x)
    with pytest.raises(ContractError):
        nd.backward(tape, y)
    with pytest.raises(ContractError):
        nd.backward(Tape(), nd.sum(y))


def test_tape_is_topologically_ordered():
    x = leaf(np.ones(3))
    with Tape() as tape:
        nd.sum(nd.relu(nd.mul(x, 2.0)))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.out))


def test_no_recording_without_tape_or_grad():
    x = leaf([1.0])
    with nd.no_tape():
        assert nd.square(x)._node is None
    with Tape() as tape:
        nd.square(Tensor([1.0]))
    assert len(tape) == 0


def test_stop_gradient_blocks_flow():
    x = leaf([1.0, 2.0])
    y = leaf([0.5, 0.5])
    with Tape() as tape:
        out = nd.sum(nd.mul(nd.stop_gradient(x), y))
    nd.backward(tape, out)
    assert x.grad is None
    assert y.grad.tolist() == [1.0, 2.0]


def test_straight_through_copies_gradient():
    z = leaf([0.1, 0.2, 0.3])
    code = np.array([1.0, -1.0, 0.5])
    w = np.array([2.0, 3.0, -4.0])
    with Tape() as tape:
        q = nd.straight_through(z, code)
        out = nd.sum(nd.mul(nd.square(q), Tensor(w)))
    assert np.array_equal(q.data, code)
    nd.backward(tape, out)
    assert np.array_equal(z.grad, 2 * code * w)


# ---------------------------------------------------------------- finite-difference oracles

PRIMITIVES = {
    "add": (lambda a, b: nd.sum(nd.mul(nd.add(a, b), nd.add(a, b))), 2),
    "sub": (lambda a, b: nd.sum(nd.square(nd.sub(a, b))), 2),
    "mul": (lambda a, b: nd.sum(nd.mul(a, b)), 2),
    "relu": (lambda a: nd.sum(nd.mul(nd.relu(a), a)), 1),
    "sigmoid": (lambda a: nd.sum(nd.sigmoid(a)), 1),
    "log": (lambda a: nd.sum(nd.log(nd.add(nd.square(a), 0.5))), 1),
    "square": (lambda a: nd.sum(nd.square(a)), 1),
    "clamp": (lambda a: nd.sum(nd.square(nd.clamp(a, -1.0, 1.0))), 1),
    "mean_axis": (lambda a: nd.sum(nd.square(nd.mean(a, axis=1))), 1),
    "sum_axis": (lambda a: nd.sum(nd.square(nd.sum(a, axis=0))), 1),
    "transpose": (lambda a: nd.sum(nd.mul(nd.transpose(a), Tensor(np.arange(12.0).reshape(4, 3)))), 1),
    "reshape": (lambda a: nd.sum(nd.square(nd.reshape(a, (4, 3)))), 1),
    "log_softmax": (lambda a: nd.sum(nd.pick(nd.log_softmax(a), [0, 3, 1])), 1),
    "normalize_columns": (lambda a: nd.sum(nd.mul(nd.normalize_columns(a), a)), 1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    fn, arity = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    args = [away_from_zero(rng, (3, 4)) for _ in range(arity)]
    if name == "clamp":  # keep clear of the clamp corners
        args = [np.where(np.abs(np.abs(a) - 1) < 0.05, 0.5, a) for a in args]
    fd_check(fn, *args)


def test_matmul_bias_concat_finite_differences():
    rng = np.random.default_rng(1)
    a, b, c = rng.uniform(-2, 2, (3, 3)), rng.uniform(-2, 2, (3, 3)), rng.uniform(-2, 2, 3)
    fd_check(lambda a, b: nd.sum(nd.matmul(a, b)), a, b)
    g = grad_of(lambda a, b: nd.sum(nd.matmul(a, b)), a, b)[0]
    assert np.allclose(g, np.tile(b.sum(axis=1), (3, 1)))
    fd_check(lambda a, c: nd.sum(nd.square(nd.bias_add(a, c))), a, c)
    fd_check(lambda a, b: nd.sum(nd.square(nd.concat([a, b], axis=1))), a, b)


def test_two_layer_network_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.uniform(-2, 2, (5, 4))
    w1, b1 = rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, 6)
    w2, b2 = rng.uniform(-1, 1, (6, 1)), rng.uniform(-1, 1, 1)
    y = (rng.random((5, 1)) > 0.5).astype(np.float64)

    def loss(w1, b1, w2, b2):
        h = nd.relu(nd.bias_add(nd.matmul(Tensor(x), w1), b1))
        p = nd.sigmoid(nd.bias_add(nd.matmul(h, w2), b2))
        obs = nd.add(nd.mul(p, Tensor(2 * y - 1)), Tensor(1 - y))
        return nd.mul(nd.mean(nd.log(obs)), -1.0)

    fd_check(loss, w1, b1, w2, b2)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_add_mul_grads_property(a, b):
    ga, gb = grad_of(lambda a, b: nd.sum(nd.mul(nd.add(a, b), b)), a, b)
    assert np.allclose(ga, b) and np.allclose(gb, a + 2 * b)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-50, 50)))
def test_log_softmax_rows_normalize(x):
    out = nd.log_softmax(Tensor(x[None])).data
    assert np.exp(out).sum() == pytest.approx(1.0, abs=1e-9)


def test_operations_are_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    r1 = nd.log_softmax(nd.matmul(Tensor(a), Tensor(b))).data
    r2 = nd.log_softmax(nd.matmul(Tensor(a), Tensor(b))).data
    assert np.array_equal(r1, r2)

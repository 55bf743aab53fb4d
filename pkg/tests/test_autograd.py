import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeprune import autograd as ag
from moeprune.autograd import Tape, Tensor, grad_check
from moeprune.errors import DimensionError, NumericError


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# -- matmul ---------------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [3.0, 4.25]])
    out = ag.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand_arithmetic():
    assert ag.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(ag.matmul(Tensor(a), Tensor(b)).data - ref)) < 1e-12


def test_matmul_batched_activation_matches_loop():
    rng = np.random.default_rng(8)
    a, w = rng.normal(size=(5, 3, 4)), rng.normal(size=(4, 6))
    out = ag.matmul(Tensor(a), Tensor(w)).data
    for s in range(5):
        assert np.allclose(out[s], a[s] @ w, atol=1e-13)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ag.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


# -- softmax ----------------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(ag.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data, 0.25, atol=0, rtol=0)
    out = ag.softmax(Tensor([math.log(2.0), 0.0])).data
    assert abs(out[0] - 2 / 3) < 1e-15 and abs(out[1] - 1 / 3) < 1e-15
    big = ag.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and 0.0 <= big[1] < 1e-300


def test_softmax_errors():
    with pytest.raises(DimensionError):
        ag.softmax(Tensor(np.zeros(0)))
    with pytest.raises(NumericError):
        ag.softmax(Tensor([np.nan, 0.0]))
    with pytest.raises(DimensionError):
        ag.softmax(Tensor([1.0, 2.0]), mask=np.array([False, False]))


def test_masked_softmax_ignores_excluded_columns():
    out = ag.softmax(Tensor([[math.log(2.0), 0.0, -np.inf, np.inf]]), mask=np.array([True, True, False, False]))
    assert np.allclose(out.data, [[2 / 3, 1 / 3, 0.0, 0.0]], atol=1e-15)
    assert out.data[0, 2] == 0.0 and out.data[0, 3] == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), shift=st.floats(-50, 50))
def test_softmax_sum_and_shift_invariance(seed, n, shift):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=5.0, size=(4, n))
    p = ag.softmax(Tensor(z)).data
    assert np.all(p > 0)
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-12
    assert np.max(np.abs(ag.softmax(Tensor(z + shift)).data - p)) < 1e-12


# -- grad_check itself ----------------------------------------------------------------


def test_grad_check_quadratic():
    x = Tensor([3.0])
    err = grad_check(lambda: ag.total(ag.mul(x, x)), [x], samples=None)
    assert x.grad[0] == 6.0
    assert err < 1e-9


def test_grad_check_constant():
    x = Tensor([1.0, 2.0])
    assert grad_check(lambda: Tensor(4.0), [x], samples=None) == 0.0


def test_grad_check_eps_range_and_nonfinite():
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: ag.total(x), [x], eps=1e-3)
    # log at 0: both perturbed points leave the domain
    y = Tensor([0.0])

    def f():
        with np.errstate(divide="ignore", invalid="ignore"):
            return Tensor(np.log(y.data).sum())

    with pytest.raises(NumericError):
        grad_check(f, [y], samples=None)


# -- every primitive against central differences, over many seeds -------------------------

PRIMITIVES = {
    "matmul": lambda r: (lambda a, b: ag.matmul(a, b), [param(r, 3, 4), param(r, 4, 2)]),
    "matmul_batched": lambda r: (lambda a, b: ag.matmul(a, b), [param(r, 2, 3, 4), param(r, 4, 2)]),
    "add": lambda r: (lambda a, b: ag.add(a, b), [param(r, 3, 2), param(r, 3, 2)]),
    "sub": lambda r: (lambda a, b: ag.sub(a, b), [param(r, 3, 2), param(r, 3, 2)]),
    "mul": lambda r: (lambda a, b: ag.mul(a, b), [param(r, 3, 2), param(r, 3, 2)]),
    "mul_broadcast": lambda r: (lambda a, b: ag.mul(a, b), [param(r, 3, 2), param(r, 1, 2)]),
    "add_bias": lambda r: (lambda a, b: ag.add_bias(a, b), [param(r, 2, 3, 4), param(r, 4)]),
    "scale_rows": lambda r: (lambda a, s: ag.scale_rows(a, s), [param(r, 5, 3), param(r, 5)]),
    "gelu": lambda r: (lambda a: ag.gelu(a), [param(r, 4, 3, scale=2.0)]),
    "relu": lambda r: (lambda a: ag.relu(a), [Tensor(r.choice([-1, 1], size=(4, 3)) * r.uniform(0.1, 2, (4, 3)))]),
    "layer_norm": lambda r: (lambda x, g, b: ag.layer_norm(x, g, b), [param(r, 3, 2, 5), param(r, 5), param(r, 5)]),
    "softmax": lambda r: (lambda a: ag.softmax(a), [param(r, 3, 5)]),
    "softmax_masked": lambda r: (lambda a: ag.softmax(a, mask=np.array([True, False, True, True, False])),
                                 [param(r, 3, 5)]),
    "mean_axis": lambda r: (lambda a: ag.mean(a, axis=1), [param(r, 3, 4, 2)]),
    "mean_all": lambda r: (lambda a: ag.mean(a), [param(r, 3, 4)]),
    "transpose": lambda r: (lambda a: ag.transpose(a), [param(r, 2, 3, 4)]),
    "permute": lambda r: (lambda a: ag.permute(a, (1, 0, 2)), [param(r, 2, 3, 4)]),
    "reshape": lambda r: (lambda a: ag.reshape(a, (6, 2)), [param(r, 3, 4)]),
    "scale": lambda r: (lambda a: ag.scale(a, -1.7), [param(r, 3, 4)]),
    "take_rows": lambda r: (lambda a: ag.take_rows(a, np.array([2, 0, 2])), [param(r, 4, 3)]),
    "pick": lambda r: (lambda a: ag.pick(a, np.array([1, 0, 2, 1])), [param(r, 4, 3)]),
}


def _weighted_sum(out, rng):
    # random projection so every output coordinate matters to the scalar
    w = Tensor(rng.normal(size=out.shape))
    return ag.total(ag.mul(out, w))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_seeds(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        op, params = PRIMITIVES[name](rng)
        w_rng_seed = seed + 1000

        def f():
            return _weighted_sum(op(*params), np.random.default_rng(w_rng_seed))

        worst = max(worst, grad_check(f, params, eps=1e-5, samples=None))
    assert worst < 1e-4, f"{name}: {worst}"


def test_cross_entropy_value_and_gradient():
    logits = Tensor([[math.log(3.0), 0.0], [0.0, 0.0]])
    loss = ag.cross_entropy(logits, np.array([0, 1]))
    # -(log(3/4) + log(1/2)) / 2
    assert abs(loss.item() - (-(math.log(0.75) + math.log(0.5)) / 2)) < 1e-15
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = param(rng, 6, 3, scale=3.0)
        t = rng.integers(3, size=6)
        assert grad_check(lambda: ag.cross_entropy(x, t), [x], samples=None) < 1e-4


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(DimensionError):
        ag.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_stitch_rows_gradient():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = param(rng, 2, 3), param(rng, 3, 3)
        idx = [np.array([4, 1]), np.array([0, 2, 3])]

        def f():
            return _weighted_sum(ag.stitch_rows([a, b], idx, 5), np.random.default_rng(99))

        assert grad_check(f, [a, b], samples=None) < 1e-4


def test_argmax_ties_go_to_lowest_index():
    assert ag.argmax(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])).tolist() == [1, 0]


# -- tape semantics ---------------------------------------------------------------------


def test_backward_order_and_accumulation():
    # x used twice: gradient contributions must add up
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = ag.mul(x, x)
        z = ag.total(ag.add(y, x))
    tape.backward(z)
    assert x.grad.tolist() == [5.0]


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        pass
    ag.mul(x, x)
    assert len(tape) == 0 and not ag.recording()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ag.scale(x, 2.0)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x, w, g, b = rng.normal(size=(4, 5, 6)), rng.normal(size=(6, 6)), rng.normal(size=6), rng.normal(size=6)

    def run():
        h = ag.layer_norm(ag.gelu(ag.matmul(Tensor(x), Tensor(w))), Tensor(g), Tensor(b))
        return ag.softmax(h).data

    assert np.array_equal(run(), run())

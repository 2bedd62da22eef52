import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from entalign import autodiff as ad
from entalign.autodiff import NonFiniteError, ShapeError, Tensor, finite_diff_check
from entalign.gradcheck import _op_cases, check_ops

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# --- elementwise -------------------------------------------------------------

def test_sigmoid_at_zero_is_half():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_at_two_matches_scalar_formula():
    assert ad.sigmoid(Tensor(2.0)).item() == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-15)
    assert ad.sigmoid(Tensor(2.0)).item() == pytest.approx(0.880797, abs=1e-6)


def test_add_zeros_is_identity_with_unit_gradient(rng):
    x = leaf(rng.standard_normal((3, 2)))
    y = ad.add(x, Tensor(np.zeros((3, 2))))
    assert np.array_equal(y.data, x.data)
    ad.tsum(y).backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_elementwise_dispatch_matches_direct_call(kind, rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    direct = getattr(ad, kind)(Tensor(a), Tensor(b)).data
    assert np.array_equal(ad.elementwise(kind, Tensor(a), Tensor(b)).data, direct)


def test_elementwise_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ad.elementwise("tanh", Tensor(1.0))


def test_log_of_non_positive_raises():
    with pytest.raises(ValueError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        ad.log(Tensor([-1.0]))


def test_broadcast_only_over_leading_axes():
    assert ad.add(Tensor(np.ones((2, 3, 4))), Tensor(np.ones(4))).shape == (2, 3, 4)
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((3, 1))), Tensor(np.ones((3, 4))))


def test_non_finite_values_raise_at_op_boundary():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([1000.0]))


def test_scale_by_zero_keeps_graph_and_gives_zero():
    x = leaf([1.0, 2.0])
    y = ad.scale(ad.tsum(x), 0.0)
    y.backward()
    assert y.item() == 0.0 and np.array_equal(x.grad, [0.0, 0.0])


def test_softplus_is_stable_for_large_inputs():
    out = ad.softplus(Tensor([-800.0, 0.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == pytest.approx(math.log(2)) and out[2] == 800.0


# --- matmul --------------------------------------------------------------------

def test_matmul_identity(rng):
    b = rng.standard_normal((3, 4))
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_example():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]])).data
    assert np.array_equal(out, [[3], [7]])


def test_matmul_gradient_is_row_broadcast_of_column_sums(rng):
    a = leaf(rng.standard_normal((3, 4)))
    b = rng.standard_normal((4, 5))
    ad.tsum(ad.matmul(a, Tensor(b))).backward()
    expected = np.tile(b.sum(axis=1), (3, 1))
    assert np.allclose(a.grad, expected, atol=1e-12)
    assert finite_diff_check(lambda x: ad.tsum(ad.matmul(x, Tensor(b))), a.data) < 1e-8


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --- softmax -------------------------------------------------------------------

def test_softmax_examples():
    assert np.array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.array_equal(ad.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    e = np.exp([1.0, 2.0, 3.0])
    oracle = e / e.sum()
    out = ad.softmax(Tensor([1.0, 2.0, 3.0])).data
    assert np.allclose(out, oracle, atol=1e-15)
    assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_ignore_shifts(x, c):
    y = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.allclose(ad.softmax(Tensor(x + c), axis=-1).data, y, atol=1e-9, rtol=0)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.standard_normal((4, 6))
    assert np.allclose(ad.log_softmax(Tensor(x), 1).data, np.log(ad.softmax(Tensor(x), 1).data), atol=1e-13)


# --- reductions ----------------------------------------------------------------

def test_reduce_examples():
    assert ad.reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == 2.0
    value, idx = ad.reduce("max", Tensor([3.0, 1.0, 3.0]))
    assert value.item() == 3.0 and int(idx) == 0
    assert np.array_equal(ad.reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0).data, [4.0, 6.0])


def test_max_gradient_goes_to_first_maximum():
    x = leaf([2.0, 5.0, 5.0, 1.0])
    value, idx = ad.max_with_argmax(x)
    value.backward()
    assert int(idx) == 1 and np.array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])


def test_empty_reduction_raises():
    with pytest.raises(ShapeError):
        ad.max_with_argmax(Tensor(np.zeros((0,))))
    with pytest.raises(ValueError):
        ad.reduce("median", Tensor([1.0]))


# --- layer norm ------------------------------------------------------------------

def test_layer_norm_of_constant_vector_is_bias():
    out = ad.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.array_equal(out, np.zeros((2, 4)))


def test_layer_norm_statistics(rng):
    x = rng.standard_normal((5, 8)) * 3 + 1
    bias = rng.standard_normal(8)
    raw = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(raw.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(raw.var(axis=1), 1, atol=1e-4)
    shifted = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(bias)).data
    assert np.allclose(shifted.mean(axis=1), bias.mean(), atol=1e-12)


# --- conv2d ----------------------------------------------------------------------

def _conv_oracle(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    B, H, W, _ = xp.shape
    k = w.shape[0]
    oh, ow = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((B, oh, ow, w.shape[3]))
    for n in range(B):
        for i in range(oh):
            for j in range(ow):
                patch = xp[n, i * stride:i * stride + k, j * stride:j * stride + k, :]
                for o in range(w.shape[3]):
                    out[n, i, j, o] = np.sum(patch * w[:, :, :, o]) + b[o]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(stride, pad, rng):
    x = rng.standard_normal((2, 7, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    assert np.allclose(out, _conv_oracle(x, w, b, stride, pad), atol=1e-12)


# --- backward --------------------------------------------------------------------

def test_sum_of_squares_gradient(rng):
    x = leaf(rng.standard_normal(5))
    ad.tsum(x * x).backward()
    assert np.allclose(x.grad, 2 * x.data, atol=1e-15)


def test_two_backward_calls_accumulate(rng):
    x = leaf(rng.standard_normal(4))
    ad.tsum(x * x).backward()
    ad.tsum(x * x).backward()
    assert np.allclose(x.grad, 4 * x.data, atol=1e-15)


def test_shared_node_sums_both_consumers(rng):
    x = leaf(rng.standard_normal((2, 3)))
    ad.tsum(x * x + x).backward()
    assert np.allclose(x.grad, 2 * x.data + 1, atol=1e-15)


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * x).backward()


def test_backward_on_graph_without_grad_leaves_raises():
    with pytest.raises(RuntimeError):
        ad.tsum(Tensor([1.0, 2.0])).backward()


def test_every_requires_grad_leaf_gets_a_gradient(rng):
    a, b, unused = leaf(rng.standard_normal(3)), leaf(rng.standard_normal(3)), leaf(np.ones(3))
    ad.tsum(a * b).backward()
    assert np.allclose(a.grad, b.data) and np.allclose(b.grad, a.data)
    assert np.array_equal(unused.grad, np.zeros(3))


def test_tape_visits_each_node_once_and_clears(rng):
    x = leaf(rng.standard_normal(3))
    y = x * x
    loss = ad.tsum(y + y)
    tape = ad.Tape.record(loss)
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    assert tape.nodes[-1] is loss
    loss.backward()
    assert loss._parents == () and y._parents == ()


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad and y.is_leaf


def test_three_layer_composition_matches_finite_differences(rng):
    w1, w2, w3 = (rng.standard_normal(s) for s in [(4, 6), (6, 5), (5, 1)])

    def f(x):
        h = ad.sigmoid(ad.matmul(x, Tensor(w1)))
        h = ad.softplus(ad.matmul(h, Tensor(w2)))
        return ad.tsum(ad.matmul(h, Tensor(w3)))

    assert finite_diff_check(f, rng.standard_normal((3, 4))) < 1e-7


# --- finite-difference harness ----------------------------------------------------

def test_finite_diff_of_sum_is_exact_to_roundoff(rng):
    assert finite_diff_check(ad.tsum, rng.standard_normal((3, 3))) < 1e-9


def test_finite_diff_of_sigmoid_sum(rng):
    err = finite_diff_check(lambda x: ad.tsum(ad.sigmoid(x)), rng.standard_normal(10))
    assert err < 1e-6


def test_finite_diff_detects_a_wrong_gradient():
    def broken(x):
        y = ad.exp(x)
        # Double the analytic gradient, keep the value.
        return ad.tsum(y + ad.scale(y, 1.0) - Tensor(y.data))
    assert finite_diff_check(broken, np.array([0.3, -0.2])) > 0.4


@pytest.mark.parametrize("case", range(len(_op_cases(np.random.default_rng(0)))))
def test_every_op_passes_gradient_check(case):
    result = check_ops(seed=0)[case]
    assert result.max_rel_error < 1e-4, result.line()


# --- purity ---------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_ops_do_not_mutate_inputs(a, b):
    ta, tb = Tensor(a), Tensor(b)
    before = (ta.data.copy(), tb.data.copy())
    for op in (ad.add, ad.sub, ad.mul):
        op(ta, tb)
    for op in (ad.sigmoid, ad.exp, ad.relu, ad.softplus, ad.neg):
        op(ta)
    ad.softmax(ta)
    ad.log_softmax(ta, 0)
    ad.layer_norm(ta, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    ad.transpose(ta)
    ad.take(ta, [1, 0], axis=1)
    assert np.array_equal(ta.data, before[0]) and np.array_equal(tb.data, before[1])


def test_item_requires_single_value():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()

import math

import numpy as np
import pytest

from driftlab.autograd import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    causal_mask,
    embedding,
    gather_index,
    gelu,
    gradcheck,
    layernorm,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    reshape,
    softmax,
    sub,
    texp,
    tmean,
    transpose,
    tsum,
)


def t64(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2, dtype=np.float32))
        x = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(matmul(eye, x).data, x.data)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_matches_finite_difference(self):
        rng = np.random.default_rng(7)
        a = t64(rng.standard_normal((3, 4)), requires_grad=True)
        b = t64(rng.standard_normal((4, 2)), requires_grad=True)
        err = gradcheck(lambda: tsum(matmul(a, b)), [a, b])
        assert err <= 1e-4


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 0.25, atol=1e-7)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        h = rng.standard_normal(6).astype(np.float32)
        for c in (1.0, -3.5, 100.0):
            a = softmax(Tensor(h)).data
            b = softmax(Tensor(h + np.float32(c))).data
            assert np.abs(a - b).max() <= 1e-6

    def test_closed_form(self):
        out = softmax(Tensor([math.log(1.0), math.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-7)

    @pytest.mark.parametrize("seed", range(20))
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 7)) * 5)
        assert np.abs(softmax(x).data.sum(axis=-1) - 1.0).max() <= 1e-6

    def test_exp_log_softmax_consistency(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 9)) * 3)
        assert np.abs(np.exp(log_softmax(x).data) - softmax(x).data).max() <= 1e-6

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NumericError):
            softmax(Tensor([1.0, np.nan]))
        with pytest.raises(NumericError):
            log_softmax(Tensor([np.inf, 1.0]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(5.0), requires_grad=True)
        with Tape():
            backward(tsum(x))
        assert np.array_equal(x.grad, np.ones(5, dtype=np.float32))

    def test_hand_derivative(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape():
            backward(tsum(mul(x, x)))
        assert np.allclose(x.grad, [2.0, -4.0])

    def test_fanout_accumulates_both_paths(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            y = add(mul(x, 3.0), mul(x, x))  # 3x + x^2 -> dx = 3 + 2x = 7
            backward(tsum(y))
        assert np.allclose(x.grad, [7.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = mul(x, x)
            with pytest.raises(ShapeError):
                backward(y)

    def test_non_participating_leaf_zero_filled(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        z = Tensor([5.0], requires_grad=True)
        with Tape():
            dead = mul(z, 2.0)  # never reaches the loss
            loss = tsum(mul(x, x))
            backward(loss)
        assert dead is not None
        assert z.grad is not None and np.array_equal(z.grad, [0.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape():
            backward(tsum(x))
        with Tape():
            backward(tsum(x))
        assert np.allclose(x.grad, [2.0])

    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            with no_grad():
                y = mul(x, x)
        assert not y.requires_grad


def op_cases(seed):
    """(name, fn, wrt) triples for gradcheck, rebuilt per seed.

    Each op output is contracted to a scalar with a weight tensor frozen at
    case-construction time, so repeated fn() calls evaluate one function.
    """
    rng = np.random.default_rng(seed)

    def mk(shape):
        return t64(rng.standard_normal(shape), requires_grad=True)

    a23 = mk((2, 3))
    b23 = mk((2, 3))
    brow = mk((3,))
    m34 = mk((3, 4))
    m42 = mk((4, 2))
    batch = mk((2, 3, 4))
    gain = mk((8,))
    bias = mk((8,))
    ln_x = mk((4, 8))
    emb = mk((6, 4))
    ids = rng.integers(0, 6, size=(2, 5))
    gather_x = mk((3, 7))
    gidx = rng.integers(0, 7, size=(3,))
    sq = mk((2, 4, 4))
    raw = [
        ("add_broadcast", lambda: add(a23, brow), [a23, brow]),
        ("sub", lambda: sub(a23, b23), [a23, b23]),
        ("mul_broadcast", lambda: mul(a23, brow), [a23, brow]),
        ("neg", lambda: neg(a23), [a23]),
        ("exp", lambda: texp(mul(a23, 0.3)), [a23]),
        ("gelu", lambda: gelu(a23), [a23]),
        ("reshape_transpose", lambda: transpose(reshape(batch, (2, 4, 3)), (1, 0, 2)), [batch]),
        ("matmul", lambda: matmul(m34, m42), [m34, m42]),
        ("matmul_batched", lambda: matmul(batch, m42), [batch, m42]),
        ("sum_axis", lambda: tsum(batch, axis=1), [batch]),
        ("mean_axis", lambda: tmean(batch, axis=(0, 2)), [batch]),
        ("softmax", lambda: softmax(a23), [a23]),
        ("log_softmax", lambda: log_softmax(a23), [a23]),
        ("layernorm", lambda: layernorm(ln_x, gain, bias), [ln_x, gain, bias]),
        ("embedding", lambda: embedding(emb, ids), [emb]),
        ("gather_index", lambda: gather_index(gather_x, gidx), [gather_x]),
        ("causal_mask", lambda: softmax(causal_mask(sq)), [sq]),
    ]
    wrng = np.random.default_rng(seed + 1000)
    cases = []
    for name, build, wrt in raw:
        weight = Tensor(wrng.standard_normal(build().shape), dtype=np.float64)
        cases.append((name, lambda b=build, w=weight: tsum(mul(b(), w)), wrt))
    return cases


OP_NAMES = [name for name, _, _ in op_cases(0)]


@pytest.mark.parametrize("name", OP_NAMES)
def test_gradcheck_every_op(name):
    worst = 0.0
    for seed in range(20):
        for case_name, fn, wrt in op_cases(seed):
            if case_name != name:
                continue
            worst = max(worst, gradcheck(fn, wrt, rng=np.random.default_rng(seed)))
    assert worst <= 1e-4, f"{name}: worst relative error {worst}"


def test_gradcheck_linear_is_exact():
    rng = np.random.default_rng(5)
    a = t64(rng.standard_normal((3, 3)), requires_grad=True)
    w = t64(rng.standard_normal((3, 3)))
    err = gradcheck(lambda: tsum(matmul(a, w)), [a])
    assert err <= 1e-9


def test_gradcheck_layernorm_small():
    rng = np.random.default_rng(9)
    x = t64(rng.standard_normal((4, 8)), requires_grad=True)
    g = t64(np.ones(8), requires_grad=True)
    b = t64(np.zeros(8), requires_grad=True)
    w = t64(np.random.default_rng(10).standard_normal((4, 8)))
    err = gradcheck(lambda: tsum(mul(layernorm(x, g, b), w)), [x, g, b])
    assert err <= 1e-4


def test_gradcheck_requires_float64():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        gradcheck(lambda: tsum(x), [x])


def test_tensor_shape_data_consistency():
    t = Tensor(np.zeros((3, 4)))
    assert t.size == 12 and t.shape == (3, 4)
    assert math.prod(t.shape) == t.data.size


def test_dtype_mismatch_rejected():
    with pytest.raises(ShapeError):
        add(Tensor([1.0]), Tensor([1.0], dtype=np.float64))


def test_causal_mask_square_only():
    with pytest.raises(ShapeError):
        causal_mask(Tensor(np.zeros((2, 3))))

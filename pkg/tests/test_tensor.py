import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from moefold.errors import GateError, ShapeError
from moefold.gradcheck import grad_check
from moefold.rng import Rng
from moefold.tensor import (Tensor, attention, count_macs, cross_entropy, embedding,
                            importance_penalty, matmul, mean_all, mul, rmsnorm, silu,
                            slice_cols, softmax, softplus, softplus_t, sum_all,
                            take_rows, put_rows)

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                     elements=st.floats(-50, 50))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_grads_match_finite_differences():
    rng = Rng(42, 0)
    params = {"a": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
              "b": Tensor(rng.standard_normal((4, 2)), requires_grad=True)}

    def f(p):
        y = matmul(p["a"], p["b"])
        return mean_all(mul(y, y))

    report = grad_check(f, params, h=1e-5, tol=1e-6, samples_per_param=None)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# softmax / softplus
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(4)).data, 0.25, atol=1e-15)


def test_softmax_with_sentinels():
    out = softmax(np.array([-np.inf, 3.0, 2.0, -np.inf])).data
    e = math.e
    assert out[0] == 0.0 and out[3] == 0.0
    assert out[1] == pytest.approx(e / (e + 1), abs=1e-12)
    assert out[2] == pytest.approx(1 / (e + 1), abs=1e-12)


def test_softmax_shift_invariance_no_overflow():
    out = softmax(np.array([1000.0, 999.0])).data
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(0.7310585786300049, abs=1e-12)


def test_softmax_all_masked_raises():
    with pytest.raises(GateError):
        softmax(np.array([-np.inf, -np.inf]))
    with pytest.raises(GateError):
        softmax(np.array([[1.0, 2.0]]), mask=np.array([[False, False]]))


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    p = softmax(x).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.isfinite(p).all()


def test_softmax_gradient():
    rng = Rng(3, 0)
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((6, 1)), requires_grad=True)
    mask = np.ones((4, 6), dtype=bool)
    mask[:, 4] = False

    def f(p):
        return mean_all(matmul(softmax(p["x"], mask=mask), p["w"]))

    report = grad_check(f, {"x": x, "w": w}, tol=1e-7, samples_per_param=None)
    assert report.passed, str(report)
    assert np.all(softmax(x.data, mask=mask).data[:, 4] == 0.0)


def test_softplus_values():
    assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert softplus(50.0) == pytest.approx(50.0, abs=1e-12)
    assert softplus(-50.0) == pytest.approx(math.exp(-50), rel=1e-6)


@given(st.floats(-700, 700))
def test_softplus_finite_and_positive(x):
    y = softplus(x)
    assert math.isfinite(y) and y >= 0.0


def test_softplus_tensor_gradient():
    x = Tensor(Rng(5, 0).standard_normal((3, 4)), requires_grad=True)
    report = grad_check(lambda p: sum_all(softplus_t(p["x"])), {"x": x},
                        tol=1e-8, samples_per_param=None)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# composite ops
# ---------------------------------------------------------------------------

def test_rmsnorm_silu_embedding_ce_gradients():
    rng = Rng(11, 0)
    table = Tensor(rng.standard_normal((10, 8)), requires_grad=True)
    gain = Tensor(1.0 + 0.1 * rng.standard_normal(8), requires_grad=True)
    w = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
    ids = np.array([1, 4, 9, 1])
    targets = np.array([0, 2, 4, 1])

    def f(p):
        x = embedding(p["table"], ids)
        return cross_entropy(matmul(silu(rmsnorm(x, p["gain"])), p["w"]), targets)

    report = grad_check(f, {"table": table, "gain": gain, "w": w},
                        tol=1e-6, samples_per_param=None)
    assert report.passed, str(report)


def test_gather_scatter_slice_gradients():
    rng = Rng(13, 0)
    x = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    idx = np.array([1, 3, 5])

    def f(p):
        sub = take_rows(p["x"], idx)
        back = put_rows(mul(sub, sub), idx, 6)
        return sum_all(mul(slice_cols(back, 1, 3), Tensor(np.ones((6, 2)) * 0.5)))

    report = grad_check(f, {"x": x}, tol=1e-8, samples_per_param=None)
    assert report.passed, str(report)


def test_attention_gqa_gradients_with_rotary():
    rng = Rng(17, 0)
    params = {"q": Tensor(rng.standard_normal((8, 8)), requires_grad=True),
              "k": Tensor(rng.standard_normal((8, 4)), requires_grad=True),
              "v": Tensor(rng.standard_normal((8, 4)), requires_grad=True)}

    def f(p):
        y = attention(p["q"], p["k"], p["v"], n_heads=2, n_kv_heads=1, seq_len=4, rotary=True)
        return mean_all(mul(y, y))

    report = grad_check(f, params, tol=1e-6, samples_per_param=None)
    assert report.passed, str(report)


def test_importance_penalty_zero_when_balanced_and_grad():
    gates = Tensor(np.full((6, 4), 0.25), requires_grad=True)
    assert float(importance_penalty(gates).data) == pytest.approx(0.0, abs=1e-15)
    x = Tensor(Rng(19, 0).random((5, 3)) + 0.1, requires_grad=True)
    report = grad_check(lambda p: importance_penalty(p["x"]), {"x": x},
                        tol=1e-7, samples_per_param=None)
    assert report.passed, str(report)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((4, 512)))
    loss = cross_entropy(logits, np.array([0, 5, 100, 511]))
    assert float(loss.data) == pytest.approx(math.log(512), abs=1e-12)


# ---------------------------------------------------------------------------
# forward hygiene and instrumentation
# ---------------------------------------------------------------------------

@given(finite_rows)
def test_ops_stay_finite_on_finite_input(x):
    t = Tensor(x)
    for out in (silu(t), softplus_t(t), rmsnorm(t, Tensor(np.ones(x.shape[1]))), softmax(t)):
        assert np.isfinite(out.data).all()


def test_mac_counter_counts_matmul_and_attention():
    with count_macs() as c:
        matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 2))))
    assert c.macs == 3 * 4 * 2
    with count_macs() as c:
        attention(Tensor(np.zeros((6, 8))), Tensor(np.zeros((6, 8))), Tensor(np.zeros((6, 8))),
                  n_heads=2, n_kv_heads=2, seq_len=3)
    # scores + weighted values: 2 * b * heads * t^2 * d
    assert c.macs == 2 * 2 * 2 * 9 * 4


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2))).backward()


def test_bitwise_reproducibility_of_graph():
    def run():
        rng = Rng(23, 5)
        a = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        out = mean_all(silu(matmul(a, b)))
        out.backward()
        return out.data.copy(), a.grad.copy()

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert g1.tobytes() == g2.tobytes()

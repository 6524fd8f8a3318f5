import math

import numpy as np
import pytest

from hlora_lab import autodiff as ad
from hlora_lab.autodiff import DimensionError, GraphError, Tensor


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    m = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    assert ad.matmul(Tensor([[0.0, 0.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    assert ad.mul(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [3.0, 8.0]
    assert ad.add(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data.tolist() == [1.0, 2.0]
    assert ad.mul(Tensor(2.0), Tensor([3.0, 4.0])).data.tolist() == [6.0, 8.0]


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], rtol=1e-12)


def test_cross_entropy_examples():
    logits = np.full((1, 4), -50.0)
    logits[0, 2] = 50.0
    assert ad.cross_entropy(Tensor(logits), [2], [True]).item() < 1e-6
    assert ad.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3], [True] * 3).item() == pytest.approx(math.log(4), abs=1e-12)
    base = ad.cross_entropy(Tensor(np.zeros((2, 4))), [0, 1], [True, False]).item()
    wrong = ad.cross_entropy(Tensor(np.array([[0.0] * 4, [9.0, -9.0, 0.0, 0.0]])), [0, 1], [True, False]).item()
    assert base == wrong


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.sum_all(x).backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]

    xc = Tensor([[1.0, 2.0]])
    w = Tensor([[0.5], [-1.0]], requires_grad=True)
    ad.sum_all(ad.matmul(xc, w)).backward()
    assert w.grad.ravel().tolist() == [1.0, 2.0]
    assert xc.grad is None


def test_double_backward_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_all(ad.mul(w, w))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_non_scalar_backward_rejected():
    with pytest.raises(GraphError):
        ad.mul(Tensor([1.0, 2.0], requires_grad=True), Tensor([1.0, 1.0])).backward()


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        out = ad.mul(w, w)
    assert not out.requires_grad


def test_gradient_accumulates_over_shared_use():
    w = Tensor([3.0], requires_grad=True)
    ad.sum_all(ad.add(ad.mul(w, w), w)).backward()
    assert w.grad.tolist() == [7.0]


def test_causal_attention_packed_sequences_do_not_mix(rng):
    d, heads = 4, 2
    q, k, v = (Tensor(rng.normal(size=(5, d))) for _ in range(3))
    out = ad.causal_attention(q, k, v, [2, 3], heads).data
    alone = ad.causal_attention(
        Tensor(q.data[2:]), Tensor(k.data[2:]), Tensor(v.data[2:]), [3], heads
    ).data
    np.testing.assert_allclose(out[2:], alone, rtol=1e-12, atol=1e-14)
    # position 0 attends only to itself
    np.testing.assert_allclose(out[0], v.data[0], rtol=1e-12)


def test_gradcheck_reports_mismatch():
    w = Tensor([1.0, 2.0], requires_grad=True)

    assert ad.gradcheck(lambda: ad.sum_all(ad.mul(w, w)), [w]) <= 1.0
    # value depends on w through a constant the graph cannot see
    def broken():
        return ad.add(ad.sum_all(ad.mul(w, Tensor(np.ones(2)))), Tensor(float((w.data ** 3).sum())))

    with pytest.raises(AssertionError):
        ad.gradcheck(broken, [w])

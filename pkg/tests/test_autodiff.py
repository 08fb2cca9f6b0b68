import numpy as np
import pytest
from hypothesis import given, strategies as st

from data2eqn import autodiff as ad
from data2eqn.autodiff import Tensor

from _helpers import gradient_check

R = np.random.default_rng(0)


def rand(*shape):
    return R.standard_normal(shape)


W1, W2 = rand(2, 4, 4), rand(3, 6)

CASES = {
    "add_broadcast": ({"a": rand(3, 4), "b": rand(4)}, lambda p: (p["a"] + p["b"]).sum()),
    "sub_mul": ({"a": rand(3, 4), "b": rand(3, 1)}, lambda p: ((p["a"] - p["b"]) * p["a"]).sum()),
    "div": ({"a": rand(5), "b": rand(5) ** 2 + 1.0}, lambda p: (p["a"] / p["b"]).sum()),
    "exp_log_tanh": ({"a": rand(6)}, lambda p: (ad.log(ad.exp(p["a"]) + 1.0) * ad.tanh(p["a"])).sum()),
    "power": ({"a": np.abs(rand(4)) + 0.5}, lambda p: ad.power(p["a"], 3.0).sum()),
    "gelu": ({"a": rand(7)}, lambda p: ad.gelu(p["a"]).sum()),
    "matmul_batched": ({"a": rand(2, 3, 4), "b": rand(4, 5)}, lambda p: ((p["a"] @ p["b"]) ** 2).sum()),
    "matmul_4d": ({"a": rand(2, 2, 3, 4), "b": rand(2, 2, 4, 3)}, lambda p: (p["a"] @ p["b"]).sum() * 0.5),
    "mean_reshape_transpose": ({"a": rand(2, 3, 4)},
                               lambda p: (p["a"].reshape(6, 4).transpose(1, 0) * 2.0).mean(axis=1).sum()),
    "getitem_concat": ({"a": rand(4, 3), "b": rand(2, 3)},
                       lambda p: (ad.concat([p["a"][1:3], p["b"]], axis=0) ** 2).sum()),
    "softmax_masked": ({"a": rand(2, 4, 4)},
                       lambda p: (ad.softmax(p["a"], mask=np.triu(np.full((4, 4), -np.inf), 1)) * W1).sum()),
    "log_softmax_gather": ({"a": rand(3, 5)},
                           lambda p: ad.gather(ad.log_softmax(p["a"]), np.array([[1], [4], [0]])).sum()),
    "layer_norm": ({"a": rand(3, 6), "g": rand(6), "b": rand(6)},
                   lambda p: (ad.layer_norm(p["a"], p["g"], p["b"]) * W2).sum()),
    "embedding": ({"w": rand(5, 3)}, lambda p: (ad.embedding(p["w"], np.array([[0, 2, 2], [4, 1, 0]])) ** 2).sum()),
    "minimum_clip": ({"a": rand(6) * 2, "b": rand(6)},
                     lambda p: (ad.minimum(p["a"], p["b"]) + ad.clip(p["a"], -0.5, 0.5) * 3.0).sum()),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    params, fn = CASES[name]
    assert gradient_check(params, fn, h=1e-5) < 1e-6


def test_backward_accumulates_through_shared_nodes():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = a * a + a
    (b * b).backward()
    # d/da (a^2 + a)^2 = 2 (a^2 + a)(2a + 1) = 2 * 6 * 5
    assert a.grad[0] == 60.0


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        b = (a * 2.0).sum()
        assert not ad.grad_enabled()
    assert not b.requires_grad and ad.grad_enabled()


def test_custom_op():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = ad.custom(a.data ** 2, (a,), lambda g: (2 * a.data * g,))
    out.sum().backward()
    assert a.grad.tolist() == [2.0, 4.0]


def test_clip_and_minimum_zero_gradient_regions():
    a = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    ad.clip(a, -1.0, 1.0).sum().backward()
    assert a.grad.tolist() == [0.0, 1.0, 0.0]
    x = Tensor(np.array([1.0, 3.0]), requires_grad=True)
    y = Tensor(np.array([2.0, 2.0]), requires_grad=True)
    ad.minimum(x, y).sum().backward()
    assert x.grad.tolist() == [1.0, 0.0] and y.grad.tolist() == [0.0, 1.0]


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_softmax_rows_normalized(b, n, seed):
    z = np.random.default_rng(seed).standard_normal((b, n)) * 30
    p = ad.softmax(Tensor(z)).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12) and np.all(p >= 0)
    assert np.allclose(np.exp(ad.log_softmax(Tensor(z)).data), p, atol=1e-12)

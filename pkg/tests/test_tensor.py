import numpy as np
import pytest
import torch

from loda import functional as F
from loda import tensor as T
from loda.exceptions import ContractError, ShapeError
from loda.gradcheck import OPS, check_op, finite_diff_grad, relative_error
from loda.tensor import Tensor, backward


def test_rng_is_pcg64_and_reproducible():
    a, b = T.rng(7), T.rng(7)
    assert isinstance(a.bit_generator, np.random.PCG64)
    assert np.array_equal(a.normal(size=5), b.normal(size=5))


def test_create_inits():
    g = T.rng(0)
    assert np.all(T.create((2, 3)).data == 0)
    assert np.all(T.create((2,), "ones").data == 1)
    u = T.create((1000,), "uniform", lo=-2, hi=3, generator=g)
    assert u.data.min() >= -2 and u.data.max() < 3
    v = T.create((2, 2), "values", values=[[1, 2], [3, 4]])
    assert v.data.dtype == np.float64 and v.data[1, 0] == 3
    with pytest.raises(ShapeError):
        T.create((0, 3))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_leaf_gradients_accumulate_and_fanout():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(T.sum(x * x + x))
    backward(T.sum(x * 3.0))
    assert np.allclose(x.grad, 2 * x.data + 1 + 3)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and not y._parents


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((2, 3, 4))
    assert np.array_equal(T.unbroadcast(g, (4,)), np.full(4, 6.0))
    assert np.array_equal(T.unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))


@pytest.mark.parametrize("name", OPS)
def test_op_gradients_match_finite_differences(name):
    for seed in range(3):
        assert check_op(name, seed).passed


def test_finite_diff_on_quadratic():
    x = Tensor(np.array([1.0, -2.0, 0.5]))
    g = finite_diff_grad(lambda t: T.sum(t * t), x)
    assert relative_error(g, 2 * x.data) < 1e-9


# forward values against torch as an independent oracle


def test_conv2d_matches_torch():
    g = T.rng(1)
    x, w, b = g.normal(size=(2, 3, 9, 7)), g.normal(size=(5, 3, 3, 3)), g.normal(size=5)
    ours = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    ref = torch.nn.functional.conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b), stride=2, padding=1).numpy()
    assert np.allclose(ours, ref, atol=1e-12)


def test_avgpool_matches_torch_adaptive():
    x = T.rng(2).normal(size=(2, 3, 7, 10))
    ours = F.avgpool2d(Tensor(x), (3, 4)).data
    ref = torch.nn.functional.adaptive_avg_pool2d(torch.tensor(x), (3, 4)).numpy()
    assert np.allclose(ours, ref, atol=1e-14)


def test_layernorm_gelu_softmax_match_torch():
    g = T.rng(3)
    x, gamma, beta = g.normal(size=(4, 6)), g.normal(size=6), g.normal(size=6)
    tx = torch.tensor(x)
    ln = torch.nn.functional.layer_norm(tx, (6,), torch.tensor(gamma), torch.tensor(beta), eps=1e-6).numpy()
    assert np.allclose(F.layernorm(Tensor(x), Tensor(gamma), Tensor(beta), eps=1e-6).data, ln, atol=1e-12)
    assert np.allclose(F.gelu(Tensor(x)).data, torch.nn.functional.gelu(tx).numpy(), atol=1e-14)
    assert np.allclose(F.softmax(Tensor(x), axis=-1).data, torch.softmax(tx, -1).numpy(), atol=1e-14)

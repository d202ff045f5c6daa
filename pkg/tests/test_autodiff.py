"""Finite-difference verification of every primitive in the tensor engine."""

import numpy as np
import pytest

from hyperad import autodiff as ad
from hyperad.autodiff import Tensor
from hyperad.errors import ValidationError


def fd_gradient(fn, x0, eps=1e-6):
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    out = np.zeros_like(x0)
    for i in range(x0.size):
        hi = x0.copy()
        hi[i] += eps
        lo = x0.copy()
        lo[i] -= eps
        out[i] = (float(fn(hi).data) - float(fn(lo).data)) / (2 * eps)
    return out


def check_op(fn, x0, eps=1e-6, tol=1e-6):
    leaf = Tensor(np.asarray(x0, dtype=np.float64).copy(), requires_grad=True)
    out = fn(leaf)
    out.backward()
    analytic = leaf.grad.reshape(-1)
    numeric = fd_gradient(lambda v: fn(Tensor(v.reshape(leaf.data.shape))), x0, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) < tol


@pytest.mark.parametrize("shape", [(3,), (2, 4)])
def test_add_mul_grad(shape):
    rng = np.random.default_rng(10)
    other = rng.normal(size=shape)
    check_op(lambda t: ad.tsum(t * 3.0 + Tensor(other) * t - 0.5), rng.normal(size=shape))


def test_broadcast_grads():
    rng = np.random.default_rng(11)
    col = rng.normal(size=(4, 1))
    check_op(lambda t: ad.tsum((ad.reshape(t, (1, 5)) + Tensor(col)) ** 2.0),
             rng.normal(size=5))


def test_div_grad():
    rng = np.random.default_rng(12)
    x0 = rng.normal(size=6) + 3.0
    check_op(lambda t: ad.tsum(1.0 / t + t / 2.0), x0)


@pytest.mark.parametrize("case", ["mm", "mv", "vm", "vv"])
def test_matmul_grads(case):
    rng = np.random.default_rng(13)
    b2 = rng.normal(size=(3, 2))
    b1 = rng.normal(size=3)
    if case == "mm":
        check_op(lambda t: ad.tsum(ad.matmul(ad.reshape(t, (2, 3)), Tensor(b2))),
                 rng.normal(size=6))
    elif case == "mv":
        check_op(lambda t: ad.tsum(ad.matmul(ad.reshape(t, (2, 3)), Tensor(b1))),
                 rng.normal(size=6))
    elif case == "vm":
        check_op(lambda t: ad.tsum(ad.matmul(t, Tensor(b2))), rng.normal(size=3))
    else:
        check_op(lambda t: ad.matmul(t, Tensor(b1)), rng.normal(size=3))


def test_matmul_second_operand_grad():
    rng = np.random.default_rng(14)
    a = rng.normal(size=(4, 3))
    check_op(lambda t: ad.tsum(ad.matmul(Tensor(a), ad.reshape(t, (3, 2)))),
             rng.normal(size=6))


def test_sum_axis_grads():
    rng = np.random.default_rng(15)
    check_op(lambda t: ad.tsum(ad.tsum(ad.reshape(t, (2, 3)), axis=0) ** 2.0),
             rng.normal(size=6))
    check_op(lambda t: ad.tsum(ad.tsum(ad.reshape(t, (2, 3)), axis=1, keepdims=True) ** 3.0),
             rng.normal(size=6))


def test_mean_grad():
    rng = np.random.default_rng(16)
    check_op(lambda t: ad.tmean(t * t), rng.normal(size=7))


@pytest.mark.parametrize("op", [ad.exp, ad.sigmoid, ad.softplus,
                                lambda t: ad.leaky_relu(t, 0.01), ad.hinge])
def test_unary_grads(op):
    rng = np.random.default_rng(17)
    # Offsets keep inputs away from kinks.
    x0 = rng.normal(size=9) * 0.8 + 0.05
    check_op(lambda t: ad.tsum(op(t)), x0)


def test_log_grad():
    rng = np.random.default_rng(18)
    check_op(lambda t: ad.tsum(ad.log(t)), rng.uniform(0.5, 2.0, size=5))


def test_pow_grad():
    rng = np.random.default_rng(19)
    check_op(lambda t: ad.tsum(t ** 1.7), rng.uniform(0.5, 2.0, size=5))


def test_clip_grad_and_boundaries():
    x0 = np.array([-0.5, 0.2, 0.8, 1.5])
    leaf = Tensor(x0, requires_grad=True)
    out = ad.tsum(ad.clip(leaf, 0.0, 1.0))
    out.backward()
    assert np.allclose(leaf.grad, [0.0, 1.0, 1.0, 0.0])


def test_hinge_subgradient_zero_at_kink():
    leaf = Tensor(np.array([0.0]), requires_grad=True)
    ad.tsum(ad.hinge(leaf)).backward()
    assert leaf.grad[0] == 0.0


def test_normalize_rows_grad():
    rng = np.random.default_rng(20)
    weights = rng.normal(size=(2, 3))
    x0 = np.array([1.2, -0.4, 0.8, -0.9, 1.1, 0.5])  # rows well away from zero norm
    check_op(lambda t: ad.tsum(ad.l2_normalize_rows(ad.reshape(t, (2, 3)))
                               * Tensor(weights)), x0)


def test_normalize_rejects_zero_rows():
    with pytest.raises(ValidationError):
        ad.l2_normalize_rows(Tensor(np.zeros((2, 3))))


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError):
        (t * 2.0).backward()


def test_diamond_graph_accumulates_once():
    # f = (x*2) + (x*3): gradient must be 5, not double-counted.
    x = Tensor(np.array([1.5]), requires_grad=True)
    f = x * 2.0 + x * 3.0
    f.backward(np.ones(1))
    assert np.allclose(x.grad, [5.0])


def test_constant_subgraphs_track_nothing():
    a = Tensor(np.ones(3))
    b = a * 2.0 + 1.0
    assert not b.requires_grad and b._parents == ()

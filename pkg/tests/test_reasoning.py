"""Convolution layers against a dense oracle, equivariance, gradient checks."""

import numpy as np
import pytest

from hyperad import autodiff as ad
from hyperad.autodiff import Tensor
from hyperad.errors import ValidationError
from hyperad.hypergraph import build_query_hypergraph, visual_adjacency_operator
from hyperad.reasoning import ReasoningParams, hg_conv_layer, node_scores, reason
from hyperad.semantic import build_repository


def make_repo(rng, d):
    t_n = rng.normal(size=(2, d))
    t_n /= np.linalg.norm(t_n, axis=1, keepdims=True)
    t_a = rng.normal(size=(2, d))
    t_a /= np.linalg.norm(t_a, axis=1, keepdims=True)
    return build_repository(Tensor(t_n), Tensor(t_a), 0.2)


def leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def test_identity_pipeline_passes_through():
    x = np.random.default_rng(0).normal(size=(3, 4))
    out = hg_conv_layer(x, np.eye(3), np.eye(4), activation="identity")
    assert np.allclose(out.data, x)


def test_two_node_shared_edge_layer():
    a = np.full((2, 2), 0.5)
    out = hg_conv_layer(np.eye(2), a, np.eye(2), activation="identity")
    assert np.allclose(out.data, [[0.5, 0.5], [0.5, 0.5]])


def test_zero_input_zero_output():
    out = hg_conv_layer(np.zeros((3, 2)), np.eye(3), np.ones((2, 2)))
    assert np.allclose(out.data, 0.0)


def test_layer_matches_dense_oracle():
    rng = np.random.default_rng(5)
    a = rng.random((4, 4))
    a = (a + a.T) / 2
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    out = hg_conv_layer(x, a, w)
    assert np.allclose(out.data, leaky(a @ x @ w), atol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValidationError):
        hg_conv_layer(np.zeros((3, 2)), np.eye(4), np.eye(2))
    with pytest.raises(ValidationError):
        hg_conv_layer(np.zeros((3, 2)), np.eye(3), np.eye(5))


def test_reason_single_layer_equals_conv():
    rng = np.random.default_rng(6)
    a = rng.random((4, 4))
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 3))
    params = ReasoningParams([w], np.zeros(3), np.zeros(()))
    assert np.allclose(reason(x, a, params).data, hg_conv_layer(x, a, w).data)


def test_reason_identity_composition():
    x = np.random.default_rng(7).normal(size=(5, 3))
    params = ReasoningParams([np.eye(3), np.eye(3)], np.zeros(3), np.zeros(()),
                             activation="identity")
    assert np.allclose(reason(x, np.eye(5), params).data, x)


def test_reason_matches_stepwise_oracle():
    rng = np.random.default_rng(8)
    tokens = rng.normal(size=(4, 3))
    repo = make_repo(rng, 3)
    hg = build_query_hypergraph(tokens, repo, 2)
    a = visual_adjacency_operator(hg)
    w1, w2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    params = ReasoningParams([w1, w2], np.zeros(3), np.zeros(()))
    expect = leaky(a @ leaky(a @ tokens @ w1) @ w2)
    assert np.allclose(reason(tokens, hg, params).data, expect, atol=1e-12)


def test_node_scores_zero_head_is_half():
    params = ReasoningParams([np.eye(3)], np.zeros(3), np.zeros(()))
    s = node_scores(np.random.default_rng(1).normal(size=(6, 3)), params)
    assert np.allclose(s.data, 0.5)


def test_node_scores_saturation_stays_open():
    params = ReasoningParams([np.eye(2)], np.zeros(2), np.array(20.0))
    s = node_scores(np.zeros((4, 2)), params)
    assert np.all(s.data > 0.999999) and np.all(s.data < 1.0)
    params = ReasoningParams([np.eye(2)], np.zeros(2), np.array(500.0))
    s = node_scores(np.zeros((4, 2)), params)
    assert np.all(s.data < 1.0)


def test_node_scores_forced_logit():
    params = ReasoningParams([np.eye(1)], np.ones(1), np.zeros(()))
    s = node_scores(np.full((1, 1), np.log(3.0)), params)
    assert s.data[0] == pytest.approx(0.75)


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    tokens = rng.normal(size=(6, 4))
    repo = make_repo(rng, 4)
    w = [rng.normal(size=(4, 4)), rng.normal(size=(4, 4))]
    params = ReasoningParams(w, rng.normal(size=4), np.array(0.1))
    out = reason(tokens, visual_adjacency_operator(build_query_hypergraph(tokens, repo, 2)),
                 params).data
    perm = rng.permutation(6)
    out_p = reason(tokens[perm],
                   visual_adjacency_operator(build_query_hypergraph(tokens[perm], repo, 2)),
                   params).data
    assert np.allclose(out_p, out[perm], atol=1e-10)


def test_gradients_match_fd():
    """d(sum of node scores)/dW and /dX0 against central differences."""
    rng = np.random.default_rng(10)
    tokens = rng.normal(size=(4, 3))
    repo = make_repo(rng, 3)
    a = visual_adjacency_operator(build_query_hypergraph(tokens, repo, 2))
    w0 = [rng.normal(size=(3, 3)) * 0.5, rng.normal(size=(3, 3)) * 0.5]
    head_w = rng.normal(size=3)
    head_b = np.array(0.05)

    def loss_given(x0, ws):
        params = ReasoningParams([Tensor(w) if not isinstance(w, Tensor) else w
                                  for w in ws], head_w, head_b)
        xl = reason(x0 if isinstance(x0, Tensor) else Tensor(x0), a, params)
        return ad.tsum(node_scores(xl, params))

    # gradient wrt X0
    leaf = Tensor(tokens.copy(), requires_grad=True)
    loss_given(leaf, w0).backward()
    gx = leaf.grad.copy()
    eps = 1e-5
    for idx in [(0, 0), (1, 2), (3, 1)]:
        hi, lo = tokens.copy(), tokens.copy()
        hi[idx] += eps
        lo[idx] -= eps
        fd = (float(loss_given(hi, w0).data) - float(loss_given(lo, w0).data)) / (2 * eps)
        assert abs(gx[idx] - fd) / max(abs(gx[idx]), abs(fd), 1e-8) < 1e-4

    # gradient wrt each layer
    for layer in range(2):
        leaf_w = Tensor(w0[layer].copy(), requires_grad=True)
        ws = [leaf_w if i == layer else w0[i] for i in range(2)]
        loss_given(tokens, ws).backward()
        gw = leaf_w.grad.copy()
        for idx in [(0, 0), (2, 1)]:
            hi = [w.copy() for w in w0]
            lo = [w.copy() for w in w0]
            hi[layer][idx] += eps
            lo[layer][idx] -= eps
            fd = (float(loss_given(tokens, hi).data) -
                  float(loss_given(tokens, lo).data)) / (2 * eps)
            assert abs(gw[idx] - fd) / max(abs(gw[idx]), abs(fd), 1e-8) < 1e-4


def test_params_validation():
    with pytest.raises(ValidationError):
        ReasoningParams([], np.zeros(3), np.zeros(()))
    with pytest.raises(ValidationError):
        ReasoningParams([np.eye(3), np.eye(4)], np.zeros(4), np.zeros(()))
    with pytest.raises(ValidationError):
        ReasoningParams([np.eye(3)], np.zeros(3), np.zeros(()), activation="tanh")

"""Hypergraph convolution layers and the node-level anomaly head.

Each layer computes sigma(A X W) where A is the precomputed visual
operator; A and the edge weights are held fixed for a whole forward
pass, so gradients flow through X and W only.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, lift
from .errors import ValidationError
from .hypergraph import Hypergraph, visual_adjacency_operator

_OPEN_LO = 1e-300
_OPEN_HI = float(np.nextafter(1.0, 0.0))

ACTIVATIONS = {
    "leaky_relu": lambda x: ad.leaky_relu(x, 0.01),
    "identity": lambda x: x,
}


class ReasoningParams:
    """Per-layer projection matrices plus the scalar-logit anomaly head."""

    def __init__(self, layers, head_weight, head_bias, activation: str = "leaky_relu"):
        self.layers = [lift(w) for w in layers]
        self.head_weight = lift(head_weight)
        self.head_bias = lift(head_bias)
        self.activation = activation
        if len(self.layers) < 1:
            raise ValidationError("need at least one reasoning layer")
        if activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        prev_out = None
        for i, w in enumerate(self.layers):
            if w.data.ndim != 2:
                raise ValidationError(f"layer {i} weight must be 2-D")
            if not np.all(np.isfinite(w.data)):
                raise ValidationError(f"layer {i} weight contains non-finite entries")
            if prev_out is not None and w.data.shape[0] != prev_out:
                raise ValidationError(f"layer {i} input dim {w.data.shape[0]} != previous "
                                      f"output dim {prev_out}")
            prev_out = w.data.shape[1]
        if self.head_weight.data.shape != (prev_out,):
            raise ValidationError("head weight must match the last layer's output dim")

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def _operator_of(hg) -> np.ndarray:
    if isinstance(hg, Hypergraph):
        return visual_adjacency_operator(hg)
    return np.asarray(hg, dtype=np.float64)


def hg_conv_layer(X, A, W, activation: str = "leaky_relu") -> Tensor:
    """One message-passing step: sigma(A X W)."""
    X, W = lift(X), lift(W)
    A = _operator_of(A)
    if X.data.ndim != 2 or A.shape != (X.data.shape[0], X.data.shape[0]):
        raise ValidationError("operator and feature shapes are incompatible")
    if W.data.shape[0] != X.data.shape[1]:
        raise ValidationError("weight input dim must match feature dim")
    if activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    return ACTIVATIONS[activation](ad.matmul(ad.matmul(Tensor(A), X), W))


def reason(X0, hg, params: ReasoningParams) -> Tensor:
    """Stack all layers over one fixed operator."""
    X = lift(X0)
    A = _operator_of(hg)
    if X.data.shape[0] != A.shape[0]:
        raise ValidationError("X0 row count must equal the visual node count")
    for W in params.layers:
        X = hg_conv_layer(X, A, W, params.activation)
    return X


def node_scores(XL, params: ReasoningParams) -> Tensor:
    """Logistic anomaly probability per node, clamped into the open (0, 1)."""
    XL = lift(XL)
    if XL.data.shape[1] != params.head_weight.data.shape[0]:
        raise ValidationError("feature dim must match the anomaly head")
    logits = ad.matmul(XL, params.head_weight) + params.head_bias
    return ad.clip(ad.sigmoid(logits), _OPEN_LO, _OPEN_HI)

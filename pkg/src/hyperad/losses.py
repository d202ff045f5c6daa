"""Training objective: alignment, structural, and segmentation terms.

total = (v2t + tri + eam) + lambda_str * struct + lambda_seg * seg

All terms are differentiable through the autodiff engine; grad_check
compares its reverse-mode gradients against central finite differences
and is the independent oracle for the whole differentiation contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, lift
from .errors import DeterminismError, ValidationError
from .semantic import SemanticRepository, center_similarities

_PROB_EPS = 1e-7


@dataclass
class LossWeights:
    lambda_str: float = 0.02
    lambda_seg: float = 1.0
    xi: float = 0.1
    gamma: float = 0.2
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    tri_margin: float = 0.2

    def __post_init__(self):
        if self.lambda_str < 0 or self.lambda_seg < 0 or self.xi < 0:
            raise ValidationError("loss weights must be nonnegative")
        if self.gamma <= 0:
            raise ValidationError("margin gamma must be positive")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValidationError("focal_alpha must lie in [0, 1]")
        if self.dice_eps <= 0:
            raise ValidationError("dice smoothing must be positive")
        if self.tri_margin <= 0:
            raise ValidationError("triplet margin must be positive")


def _clip_probs(p: Tensor) -> Tensor:
    return ad.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)


def bce(p, y) -> Tensor:
    """Mean binary cross-entropy of probabilities p against labels y."""
    p = _clip_probs(lift(p))
    y = np.asarray(y, dtype=np.float64)
    term = ad.log(p) * y * -1.0 + ad.log(1.0 - p) * (y - 1.0)
    return ad.tmean(term)


def focal(p, y, focal_gamma: float, focal_alpha: float) -> Tensor:
    """Mean focal loss; with focal_gamma=0, focal_alpha=0.5 it is 0.5 * bce."""
    p = _clip_probs(lift(p))
    y = np.asarray(y, dtype=np.float64)
    pos = ad.pow_const(1.0 - p, focal_gamma) * ad.log(p) * (y * -focal_alpha)
    neg = ad.pow_const(p, focal_gamma) * ad.log(1.0 - p) * ((1.0 - y) * -(1.0 - focal_alpha))
    return ad.tmean(pos + neg)


def _label_sims(patches, labels, repo: SemanticRepository):
    patches = lift(patches)
    if patches.data.ndim != 2 or patches.data.shape[0] == 0:
        raise ValidationError("patch batch must be a non-empty matrix")
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != patches.data.shape[0]:
        raise ValidationError("one label per patch required")
    sim_n, sim_a = center_similarities(patches, repo)
    return sim_n, sim_a, y


def loss_v2t(patches, labels, repo: SemanticRepository, temperature: float = 0.07) -> Tensor:
    """Two-class cross-entropy over (sim to C_n, sim to C_a) / temperature."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    sim_n, sim_a, y = _label_sims(patches, labels, repo)
    delta = (sim_a - sim_n) * (1.0 / temperature)
    # -log softmax of the labelled class: softplus(-delta) for anomalous,
    # softplus(delta) for normal.
    ce = ad.softplus(delta * -1.0) * y + ad.softplus(delta) * (1.0 - y)
    return ad.tmean(ce)


def loss_tri(patches, labels, repo: SemanticRepository, tri_margin: float) -> Tensor:
    """Center-anchored hinge: the labelled center must win by tri_margin."""
    if tri_margin <= 0:
        raise ValidationError("triplet margin must be positive")
    sim_n, sim_a, y = _label_sims(patches, labels, repo)
    sim_right = sim_a * y + sim_n * (1.0 - y)
    sim_wrong = sim_n * y + sim_a * (1.0 - y)
    return ad.tmean(ad.hinge(sim_wrong - sim_right + tri_margin))


def loss_eam(patches, repo: SemanticRepository) -> Tensor:
    """Explicit anomaly margin over a normal-only batch; kernel matches
    margin_violation averaged across the batch."""
    patches = lift(patches)
    if patches.data.ndim != 2 or patches.data.shape[0] == 0:
        raise ValidationError("patch batch must be a non-empty matrix")
    sim_n, sim_a = center_similarities(patches, repo)
    return ad.tmean(ad.hinge(sim_a - sim_n + repo.gamma))


def loss_struct(s_q, y_node, L_H, weights: LossWeights) -> Tensor:
    """Node supervision (0.5 focal + 0.5 bce) plus the Laplacian smoothness
    quadratic xi * s^T L s."""
    s = lift(s_q)
    y = np.asarray(y_node, dtype=np.float64).reshape(-1)
    if s.data.ndim != 1 or s.data.shape[0] != y.shape[0]:
        raise ValidationError("scores and node labels must be same-length vectors")
    L = np.asarray(L_H, dtype=np.float64)
    if L.shape != (y.shape[0], y.shape[0]):
        raise ValidationError("Laplacian shape must match the node count")
    l_int = focal(s, y, weights.focal_gamma, weights.focal_alpha) * 0.5 + bce(s, y) * 0.5
    quad = ad.matmul(s, ad.matmul(Tensor(L), s))
    if float(quad.data) < -1e-8:
        raise ValidationError("Laplacian quadratic form is negative; matrix is not PSD")
    return l_int + quad * weights.xi


def loss_seg(m_star, y_mask, m_txt, weights: LossWeights) -> Tensor:
    """Dice + focal segmentation loss with a semantic-weighted background
    penalty (1 - Y) * (1 + (1 - m_txt)) * m_star."""
    m = lift(m_star)
    t = lift(m_txt)
    y = np.asarray(y_mask, dtype=np.float64)
    if m.data.shape != y.shape or t.data.shape != y.shape:
        raise ValidationError("map and mask shapes must match")
    inter = ad.tsum(m * y)
    dice = 1.0 - (inter * 2.0 + weights.dice_eps) * \
        ad.pow_const(ad.tsum(m) + float(y.sum()) + weights.dice_eps, -1.0)
    foc = focal(m, y, weights.focal_gamma, weights.focal_alpha)
    w_sem = 2.0 - t
    penalty = ad.tmean(m * w_sem * (1.0 - y))
    return dice + foc + penalty


@dataclass
class LossParts:
    v2t: Tensor
    tri: Tensor
    eam: Tensor
    struct: Tensor
    seg: Tensor


def loss_total(parts: LossParts, weights: LossWeights) -> Tensor:
    """Compound objective: alignment + lambda_str * struct + lambda_seg * seg."""
    align = parts.v2t + parts.tri + parts.eam
    return align + parts.struct * weights.lambda_str + parts.seg * weights.lambda_seg


def grad_check(loss_thunk, params: np.ndarray, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    loss_thunk takes a parameter Tensor and returns a scalar Tensor; it must
    be deterministic (two evaluations at the same point are compared
    bit-for-bit). Relative error uses denominator max(|a|, |b|, 1e-8).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValidationError("epsilon must lie in [1e-6, 1e-3]")
    params = np.asarray(params, dtype=np.float64).reshape(-1)

    first = float(loss_thunk(Tensor(params)).data)
    second = float(loss_thunk(Tensor(params)).data)
    if first != second:
        raise DeterminismError(f"loss thunk is not deterministic: {first} != {second}")

    leaf = Tensor(params.copy(), requires_grad=True)
    out = loss_thunk(leaf)
    if out.data.size != 1:
        raise ValidationError("loss thunk must return a scalar")
    out.backward()
    analytic = np.zeros_like(params) if leaf.grad is None else leaf.grad.reshape(-1)

    max_err = 0.0
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += epsilon
        f_hi = float(loss_thunk(Tensor(bumped)).data)
        bumped[i] = params[i] - epsilon
        f_lo = float(loss_thunk(Tensor(bumped)).data)
        fd = (f_hi - f_lo) / (2.0 * epsilon)
        denom = max(abs(analytic[i]), abs(fd), 1e-8)
        max_err = max(max_err, abs(analytic[i] - fd) / denom)
    return max_err

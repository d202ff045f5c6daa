"""Support-conditioned semantic induction.

The support set's aggregated global feature is projected into a context
vector which modulates the pre-encoded prompt templates element-wise.
Modulated rows are renormalized, averaged into normal/abnormal centers,
and the margin constraint keeps normal patches anchored to the normal
center.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, lift
from .errors import DegenerateEmbeddingError, ValidationError
from .feature_io import PromptBank


class Mapper:
    """Learnable affine projector from global support features to context tokens."""

    def __init__(self, weight, bias):
        self.weight = lift(weight)
        self.bias = lift(bias)
        w, b = self.weight.data, self.bias.data
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError("mapper weight must be square in d")
        if b.shape != (w.shape[0],):
            raise ValidationError("mapper bias must be a length-d vector")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("mapper parameters must be finite")

    @property
    def d(self) -> int:
        return self.weight.data.shape[0]


class SemanticRepository:
    """Induced prompt rows plus their class centers and the margin."""

    def __init__(self, T_n: Tensor, T_a: Tensor, C_n: Tensor, C_a: Tensor, gamma: float):
        self.T_n = T_n
        self.T_a = T_a
        self.C_n = C_n
        self.C_a = C_a
        self.gamma = float(gamma)

    @property
    def d(self) -> int:
        return self.T_n.data.shape[1]

    def prompt_rows(self) -> np.ndarray:
        """Detached (n_tpl_n + n_tpl_a, d) matrix, normal rows first."""
        return np.vstack([self.T_n.data, self.T_a.data])


def induce_context(global_support, mapper: Mapper) -> Tensor:
    """Project the aggregated support feature through the mapper."""
    g = lift(global_support)
    if g.data.ndim != 1 or g.data.shape[0] != mapper.d:
        raise ValidationError("global support feature must be a length-d vector")
    if not np.all(np.isfinite(g.data)):
        raise ValidationError("global support feature must be finite")
    return ad.matmul(mapper.weight, g) + mapper.bias


def induce_prompts(bank: PromptBank, context) -> tuple[Tensor, Tensor]:
    """Modulate each template row by (1 + context) and renormalize.

    Zero context leaves row directions unchanged, so an untrained mapper
    reduces to the raw template bank.
    """
    context = lift(context)
    if context.data.shape != (bank.d,):
        raise ValidationError("context dimension must match the bank")
    scale = 1.0 + context

    def modulate(rows: np.ndarray) -> Tensor:
        mod = lift(rows) * scale
        norms = np.linalg.norm(mod.data, axis=1)
        if np.any(norms < 1e-12):
            raise DegenerateEmbeddingError("modulation produced a zero-norm prompt row")
        return ad.l2_normalize_rows(mod)

    return modulate(bank.normal), modulate(bank.abnormal)


def build_repository(T_n, T_a, gamma: float) -> SemanticRepository:
    """Average induced rows into class centers (centers stay un-normalized)."""
    T_n, T_a = lift(T_n), lift(T_a)
    if gamma <= 0:
        raise ValidationError("margin gamma must be strictly positive")
    for name, t in (("T_n", T_n), ("T_a", T_a)):
        if t.data.ndim != 2 or t.data.shape[0] == 0:
            raise ValidationError(f"{name} must be a non-empty matrix")
        norms = np.linalg.norm(t.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError(f"{name} rows must be unit-normalized")
    if T_n.data.shape[1] != T_a.data.shape[1]:
        raise ValidationError("prompt matrices must share d")
    C_n = ad.tmean(T_n, axis=0)
    C_a = ad.tmean(T_a, axis=0)
    return SemanticRepository(T_n=T_n, T_a=T_a, C_n=C_n, C_a=C_a, gamma=gamma)


def center_similarities(patches, repo: SemanticRepository) -> tuple[Tensor, Tensor]:
    """Cosine similarity of each patch row to C_n and C_a (both L2-normalized)."""
    p = lift(patches)
    mat = p if p.data.ndim == 2 else ad.reshape(p, (1, p.data.size))
    if mat.data.shape[1] != repo.d:
        raise ValidationError("patch dimension must match the repository")
    norms = np.linalg.norm(mat.data, axis=1)
    if np.any(norms < 1e-12):
        raise ValidationError("zero-norm patch cannot be compared by cosine similarity")
    pn = ad.l2_normalize_rows(mat)
    cn = ad.l2_normalize_rows(repo.C_n)
    ca = ad.l2_normalize_rows(repo.C_a)
    sim_n = ad.matmul(pn, ad.reshape(cn, (repo.d,)))
    sim_a = ad.matmul(pn, ad.reshape(ca, (repo.d,)))
    return sim_n, sim_a


def margin_violation(patch, repo: SemanticRepository) -> Tensor:
    """Hinge max(0, sim(p, C_a) - sim(p, C_n) + gamma); 0 means the margin holds."""
    sim_n, sim_a = center_similarities(patch, repo)
    out = ad.hinge(sim_a - sim_n + repo.gamma)
    return ad.reshape(out, ())

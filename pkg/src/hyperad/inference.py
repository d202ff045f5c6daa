"""Anomaly map construction and the image-level scoring head.

The semantic alignment branch fuses a text-driven map (two-way softmax
over center similarities) with a visual 1-NN map against the support
gallery. The hypergraph branch contributes a centered residual that is
added with weight eta and clamped back into [0, 1]. Image-level logits
come from a soft histogram of the final map fed through a small MLP.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, lift
from .errors import ValidationError, WriteError
from .feature_io import FeatureGrid, _interp_weights
from .semantic import SemanticRepository, center_similarities

_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    key = (n_src, n_dst)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_weights(n_src, n_dst)
    return _INTERP_CACHE[key]


def _grid_tokens(query) -> tuple[np.ndarray, int, int]:
    if isinstance(query, FeatureGrid):
        return query.tokens, query.h_p, query.w_p
    raise ValidationError("expected a FeatureGrid")


@dataclass
class AnomalyMaps:
    """The full map family for one query, all at output resolution."""

    m_txt: Tensor
    m_vis: Tensor
    m_base: Tensor
    m_hg: Tensor
    m_res: Tensor
    m_star: Tensor


def text_map(query, repo: SemanticRepository, temperature: float = 0.07) -> Tensor:
    """Two-way softmax over center similarities, per patch; high means anomalous."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    tokens, h_p, w_p = _grid_tokens(query)
    sim_n, sim_a = center_similarities(tokens, repo)
    scores = ad.sigmoid((sim_a - sim_n) * (1.0 / temperature))
    return ad.reshape(scores, (h_p, w_p))


def visual_map(query, support_gallery) -> np.ndarray:
    """1-NN cosine distance to the support gallery, rescaled into [0, 1]."""
    tokens, h_p, w_p = _grid_tokens(query)
    if not support_gallery:
        raise ValidationError("support gallery must be non-empty")
    gallery = np.vstack([g.tokens for g in support_gallery])
    if gallery.shape[1] != tokens.shape[1]:
        raise ValidationError("gallery dimension must match the query")
    qn = np.linalg.norm(tokens, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    if np.any(qn < 1e-12) or np.any(gn < 1e-12):
        raise ValidationError("zero-norm tokens cannot enter cosine matching")
    sims = (tokens / qn) @ (gallery / gn).T
    best = sims.max(axis=1)
    return np.clip((1.0 - best) / 2.0, 0.0, 1.0).reshape(h_p, w_p)


def fuse_base(m_txt, m_vis, alpha: float) -> Tensor:
    """Convex blend alpha * m_txt + (1 - alpha) * m_vis."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must lie in [0, 1]")
    m_txt, m_vis = lift(m_txt), lift(m_vis)
    if m_txt.data.shape != m_vis.data.shape:
        raise ValidationError("map shapes must match")
    return m_txt * alpha + m_vis * (1.0 - alpha)


def upsample(node_values, H: int, W: int) -> Tensor:
    """Bilinear resize with the pixel-center convention (no corner alignment)."""
    if H <= 0 or W <= 0:
        raise ValidationError("target resolution must be positive")
    values = lift(node_values)
    if values.data.ndim != 2:
        raise ValidationError("node values must be a 2-D grid")
    h_p, w_p = values.data.shape
    rh = Tensor(_interp_matrix(h_p, H))
    rw = Tensor(_interp_matrix(w_p, W).T)
    return ad.matmul(ad.matmul(rh, values), rw)


def residual_map(m_hg, mu: float, beta: float) -> Tensor:
    """Centered residual beta * (m_hg - mu); beta must keep it inside [-1, 1]."""
    if beta <= 0:
        raise ValidationError("beta must be positive")
    if beta * max(abs(1.0 - mu), abs(mu)) > 1.0 + 1e-12:
        raise ValidationError("beta would push the residual outside [-1, 1]")
    return (lift(m_hg) - mu) * beta


def final_map(m_base, m_res, eta: float) -> Tensor:
    """Clamped fusion min(1, max(0, m_base + eta * m_res))."""
    if eta < 0:
        raise ValidationError("eta must be nonnegative")
    m_base, m_res = lift(m_base), lift(m_res)
    if m_base.data.shape != m_res.data.shape:
        raise ValidationError("map shapes must match")
    return ad.clip(m_base + m_res * eta, 0.0, 1.0)


class ImageHead:
    """Soft histogram pooling over the final map plus a two-layer MLP."""

    def __init__(self, bin_centers, bandwidth, w1, b1, w2, b2):
        self.bin_centers = lift(bin_centers)
        self.bandwidth = lift(bandwidth)
        self.w1, self.b1, self.w2, self.b2 = lift(w1), lift(b1), lift(w2), lift(b2)
        c = self.bin_centers.data
        if c.ndim != 1 or c.size < 1:
            raise ValidationError("need at least one histogram bin")
        if np.any(np.diff(c) < 0) or c.min() < 0.0 or c.max() > 1.0:
            raise ValidationError("bin centers must be ascending within [0, 1]")
        if float(self.bandwidth.data) <= 0:
            raise ValidationError("bandwidth must be positive")
        B = c.size
        if self.w1.data.shape != (B, B) or self.b1.data.shape != (B,):
            raise ValidationError("first MLP layer must be B x B")
        if self.w2.data.shape != (B,):
            raise ValidationError("second MLP layer must map B to a scalar")

    @property
    def n_bins(self) -> int:
        return self.bin_centers.data.size


def default_image_head(B: int = 16, bandwidth: float = 0.05) -> ImageHead:
    """Expectation-readout initialization: the logit starts as a monotone
    function of the map's histogram mean, so untrained logits already rank
    images by anomaly mass."""
    centers = np.linspace(0.0, 1.0, B) if B > 1 else np.array([0.5])
    return ImageHead(bin_centers=centers, bandwidth=np.array(bandwidth),
                     w1=np.eye(B), b1=np.zeros(B),
                     w2=2.0 * (centers - 0.5), b2=np.array(0.0))


def soft_histogram(m_star, head: ImageHead) -> Tensor:
    """Gaussian soft assignment of pixels to bins, averaged over the map.

    The kernel is shifted by each pixel's closest squared distance before
    exponentiation, which cancels in the normalization and keeps the
    denominator at least 1.
    """
    values = lift(m_star)
    flat = ad.reshape(values, (values.data.size, 1))
    centers = ad.reshape(head.bin_centers, (1, head.n_bins))
    diff = flat - centers
    inv = ad.pow_const(head.bandwidth * head.bandwidth * 2.0, -1.0)
    d2 = diff * diff * inv
    shift = d2.data.min(axis=1, keepdims=True)  # detached; cancels exactly
    weights = ad.exp((d2 - shift) * -1.0)
    hist_rows = weights * ad.pow_const(ad.tsum(weights, axis=1, keepdims=True), -1.0)
    return ad.tmean(hist_rows, axis=0)


def image_score(m_star, head: ImageHead) -> Tensor:
    """Scalar image-level logit from the pooled histogram."""
    hist = soft_histogram(m_star, head)
    hidden = ad.leaky_relu(ad.matmul(head.w1, hist) + head.b1, 0.01)
    return ad.matmul(head.w2, hidden) + head.b2


def write_heatmap_pgm(m_star: np.ndarray, path) -> None:
    """8-bit grayscale PGM (P5); pixel = round(255 * score)."""
    m = np.asarray(m_star, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError("heatmap must be 2-D")
    if m.min() < -1e-9 or m.max() > 1.0 + 1e-9:
        raise ValidationError("heatmap values must lie in [0, 1]")
    h, w = m.shape
    body = np.rint(255.0 * np.clip(m, 0.0, 1.0)).astype(np.uint8).tobytes(order="C")
    try:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)
    except OSError as exc:
        raise WriteError(f"failed to write {path}: {exc}") from exc


def write_score_sidecar(path, image_id: str, logit: float) -> None:
    prob = 1.0 / (1.0 + np.exp(-logit)) if logit >= 0 else \
        np.exp(logit) / (1.0 + np.exp(logit))
    doc = {"image_id": image_id, "image_logit": float(logit), "image_prob": float(prob)}
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", "utf-8")
    except OSError as exc:
        raise WriteError(f"failed to write {path}: {exc}") from exc


def write_score_csv(path, rows: list[dict]) -> None:
    """Score table with columns image_id,label,logit,prob."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image_id", "label", "logit", "prob"])
            for row in rows:
                writer.writerow([row["image_id"], row["label"],
                                 repr(float(row["logit"])), repr(float(row["prob"]))])
    except OSError as exc:
        raise WriteError(f"failed to write {path}: {exc}") from exc

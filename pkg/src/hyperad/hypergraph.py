"""Heterogeneous cross-modal hypergraph construction.

Two hyperedge families are built over one query image:

* structural: each visual patch anchors an edge over itself plus its
  top-K cosine neighbors among the other patches (weight 1);
* semantic: each induced prompt row anchors an edge over the prompt
  node plus its top-K most affine patches, weighted by
  (mean member affinity + 1) / 2 so weights stay in (0, 1].

Prompt nodes appear in the incidence matrix but are dropped when the
visual message-passing operator and the Laplacian are formed; they
influence reasoning only through edge membership and weights. Ties in
every top-K selection break toward the lowest patch index, which makes
construction fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGraphError, ValidationError
from .feature_io import FeatureGrid
from .semantic import SemanticRepository

STRUCTURAL = "structural"
SEMANTIC = "semantic"


@dataclass(frozen=True)
class Hyperedge:
    members: tuple[int, ...]
    weight: float
    kind: str


@dataclass
class Hypergraph:
    n_visual: int
    n_prompt: int
    edges: list[Hyperedge]
    incidence: np.ndarray  # (n_visual + n_prompt, n_edges) float64 in {0, 1}
    theta: np.ndarray      # (n_edges,)
    d_v: np.ndarray        # visual node degrees, over all edges
    d_e: np.ndarray        # hyperedge degrees counted over visual members only


def _tokens_of(query) -> np.ndarray:
    tokens = query.tokens if isinstance(query, FeatureGrid) else np.asarray(query, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValidationError("query tokens must be a 2-D matrix")
    return tokens


def _normalize_rows(tokens: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(tokens, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("zero-norm token rows cannot enter cosine similarity")
    return tokens / norms


def _top_k_desc(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties resolve to the lowest index."""
    return np.argsort(-values, kind="stable")[:k]


def build_structural_hyperedges(query, K: int) -> list[Hyperedge]:
    """One edge per patch: the anchor plus its top-K cosine neighbors."""
    tokens = _tokens_of(query)
    n = tokens.shape[0]
    if K < 1:
        raise ValidationError("structural K must be at least 1")
    if K >= n:
        raise ValidationError(f"K={K} must be smaller than the node count {n}")
    normed = _normalize_rows(tokens)
    sims = normed @ normed.T
    np.fill_diagonal(sims, -np.inf)
    edges = []
    for anchor in range(n):
        neighbors = _top_k_desc(sims[anchor], K)
        members = tuple(sorted({anchor, *neighbors.tolist()}))
        edges.append(Hyperedge(members=members, weight=1.0, kind=STRUCTURAL))
    return edges


def build_semantic_hyperedges(query, repo: SemanticRepository, K: int) -> list[Hyperedge]:
    """One edge per prompt row over its top-K most affine patches.

    The prompt node id for row r is n_visual + r, normal rows first.
    """
    tokens = _tokens_of(query)
    n = tokens.shape[0]
    if K < 1:
        raise ValidationError("semantic K must be at least 1")
    if K > n:
        raise ValidationError(f"K={K} exceeds the patch count {n}")
    normed = _normalize_rows(tokens)
    prompts = _normalize_rows(repo.prompt_rows())
    affinities = normed @ prompts.T  # (n, n_prompt)
    edges = []
    for r in range(prompts.shape[0]):
        top = _top_k_desc(affinities[:, r], K)
        theta = (float(affinities[top, r].mean()) + 1.0) / 2.0
        members = tuple(sorted(top.tolist()) + [n + r])
        edges.append(Hyperedge(members=members, weight=theta, kind=SEMANTIC))
    return edges


def assemble(structural: list[Hyperedge], semantic: list[Hyperedge],
             n_visual: int, n_prompt: int) -> Hypergraph:
    """Populate the incidence matrix, edge weights, and both degree vectors."""
    edges = list(structural) + list(semantic)
    if not edges:
        raise ValidationError("cannot assemble an empty hypergraph")
    n_total = n_visual + n_prompt
    incidence = np.zeros((n_total, len(edges)))
    theta = np.zeros(len(edges))
    for e, edge in enumerate(edges):
        if edge.weight <= 0:
            raise ValidationError(f"edge {e} has non-positive weight {edge.weight}")
        if not edge.members:
            raise ValidationError(f"edge {e} has no members")
        for node in edge.members:
            if not 0 <= node < n_total:
                raise ValidationError(f"edge {e} member {node} out of range")
            if edge.kind == STRUCTURAL and node >= n_visual:
                raise ValidationError(f"structural edge {e} contains prompt node {node}")
            incidence[node, e] = 1.0
        theta[e] = edge.weight
    d_v = incidence[:n_visual].sum(axis=1)
    d_e = incidence[:n_visual].sum(axis=0)
    return Hypergraph(n_visual=n_visual, n_prompt=n_prompt, edges=edges,
                      incidence=incidence, theta=theta, d_v=d_v, d_e=d_e)


def build_query_hypergraph(query, repo: SemanticRepository, K: int,
                           semantic_K: int | None = None) -> Hypergraph:
    """Convenience wrapper: dual-guidance construction for one query image."""
    structural = build_structural_hyperedges(query, K)
    semantic = build_semantic_hyperedges(query, repo, semantic_K if semantic_K else K)
    tokens = _tokens_of(query)
    return assemble(structural, semantic, tokens.shape[0], repo.prompt_rows().shape[0])


def visual_adjacency_operator(hg: Hypergraph) -> np.ndarray:
    """Normalized message-passing operator restricted to visual nodes.

    A = D_v^{-1/2} H diag(theta) D_e^{-1} H^T D_v^{-1/2} over the visual
    rows of the incidence matrix. Symmetric, entrywise nonnegative.
    """
    if np.any(hg.d_v <= 0):
        raise DegenerateGraphError("a visual node has zero degree")
    if np.any(hg.d_e <= 0):
        raise DegenerateGraphError("a hyperedge has zero visual degree")
    hv = hg.incidence[:hg.n_visual]
    dv_isqrt = 1.0 / np.sqrt(hg.d_v)
    scaled = hv * dv_isqrt[:, None]
    return (scaled * (hg.theta / hg.d_e)) @ scaled.T


def laplacian(hg: Hypergraph) -> np.ndarray:
    """Normalized hypergraph Laplacian L = I - A over visual nodes."""
    a = visual_adjacency_operator(hg)
    return np.eye(hg.n_visual) - a


def dump_edges_jsonl(hg: Hypergraph) -> str:
    """Edge list as JSON lines (kind, members, weight), for debugging and goldens."""
    import json

    lines = [json.dumps({"kind": e.kind, "members": list(e.members), "theta": e.weight},
                        sort_keys=True) for e in hg.edges]
    return "\n".join(lines) + "\n"

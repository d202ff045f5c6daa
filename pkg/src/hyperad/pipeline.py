"""Glue between loaded tasks, the semantic repository, and per-query inference.

Graph construction is deliberately detached from the autodiff graph:
edge membership is discrete, and edge weights are refreshed from the
current (detached) repository at the start of every step, so within one
loss evaluation the operator A is a constant. Gradients reach the
mapper through the repository and the maps, and reach the reasoning
stack through the X W paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .feature_io import (FeatureGrid, PromptBank, TaskManifest, downsample_mask_max,
                         read_feature_grid, read_mask_grid, read_prompt_bank)
from .hypergraph import (Hyperedge, assemble, build_semantic_hyperedges,
                         build_structural_hyperedges, visual_adjacency_operator)
from .inference import (AnomalyMaps, final_map, fuse_base, image_score, residual_map,
                        text_map, upsample, visual_map)
from .params import ModelParams
from .reasoning import node_scores, reason
from .semantic import SemanticRepository, build_repository, induce_context, induce_prompts


@dataclass
class QueryData:
    image_id: str
    grid: FeatureGrid
    label: int
    mask: np.ndarray | None           # (H, W) uint8 or None
    resolution: tuple[int, int]
    y_node: np.ndarray | None = None  # max-pooled mask at node resolution
    m_vis: np.ndarray | None = None   # constant visual branch, node resolution
    structural: list[Hyperedge] = field(default_factory=list)


@dataclass
class TaskData:
    support: list[FeatureGrid]
    queries: list[QueryData]
    bank: PromptBank
    bank_kind: str
    resolution: tuple[int, int]
    global_support: np.ndarray = field(init=False)

    def __post_init__(self):
        globals_ = [g.global_feature if g.global_feature is not None
                    else g.tokens.mean(axis=0) for g in self.support]
        self.global_support = np.mean(np.stack(globals_), axis=0)

    @property
    def d(self) -> int:
        return self.support[0].d


def load_task_data(manifest: TaskManifest) -> TaskData:
    support = [read_feature_grid(p) for p in manifest.support_paths()]
    bank, bank_kind = read_prompt_bank(manifest.prompt_bank_path())
    queries = []
    for feat_path, mask_path, label in manifest.query_paths():
        grid = read_feature_grid(feat_path)
        mask = read_mask_grid(mask_path).values if mask_path is not None else None
        y_node = downsample_mask_max(mask, grid.h_p, grid.w_p) if mask is not None else None
        queries.append(QueryData(image_id=Path(feat_path).stem, grid=grid, label=label,
                                 mask=mask, resolution=manifest.resolution, y_node=y_node))
    task = TaskData(support=support, queries=queries, bank=bank,
                    bank_kind=bank_kind, resolution=manifest.resolution)
    for q in task.queries:
        q.m_vis = visual_map(q.grid, task.support)
    return task


def prepare_structural_edges(task: TaskData, K: int) -> None:
    """Structural edges depend only on the tokens, so cache them once per task."""
    for q in task.queries:
        q.structural = build_structural_hyperedges(q.grid, K)


def make_repository(params: ModelParams, task: TaskData, gamma: float) -> SemanticRepository:
    """Induce the repository from the current mapper, or pass through
    already-induced prompt files (kind "prompts")."""
    if task.bank_kind == "prompts":
        t_n = task.bank.normal / np.linalg.norm(task.bank.normal, axis=1, keepdims=True)
        t_a = task.bank.abnormal / np.linalg.norm(task.bank.abnormal, axis=1, keepdims=True)
        return build_repository(Tensor(t_n), Tensor(t_a), gamma)
    context = induce_context(task.global_support, params.mapper())
    t_n, t_a = induce_prompts(task.bank, context)
    return build_repository(t_n, t_a, gamma)


def detach_repository(repo: SemanticRepository) -> SemanticRepository:
    return SemanticRepository(Tensor(repo.T_n.data), Tensor(repo.T_a.data),
                              Tensor(repo.C_n.data), Tensor(repo.C_a.data), repo.gamma)


def build_query_operator(q: QueryData, repo: SemanticRepository, K: int) -> np.ndarray:
    """Visual operator from cached structural edges plus fresh semantic edges."""
    if not q.structural:
        raise ValidationError("structural edges not prepared; call prepare_structural_edges")
    detached = detach_repository(repo)
    semantic_edges = build_semantic_hyperedges(q.grid, detached, K)
    hg = assemble(q.structural, semantic_edges, q.grid.n_patches,
                  detached.prompt_rows().shape[0])
    return visual_adjacency_operator(hg)


@dataclass
class QueryForward:
    maps: AnomalyMaps
    s_q: Tensor
    logit: Tensor
    laplacian: np.ndarray


def forward_query(q: QueryData, repo: SemanticRepository, operator: np.ndarray,
                  params: ModelParams, *, alpha: float, eta: float, mu: float,
                  beta: float, temperature: float) -> QueryForward:
    """Full inference for one query: SAB maps, HRB residual, fusion, image logit."""
    H, W = q.resolution
    m_txt = upsample(text_map(q.grid, repo, temperature), H, W)
    if q.m_vis is None:
        raise ValidationError("visual map missing; task not loaded through load_task_data")
    m_vis = upsample(Tensor(q.m_vis), H, W)
    m_base = fuse_base(m_txt, m_vis, alpha)

    reasoning = params.reasoning()
    xl = reason(Tensor(q.grid.tokens), operator, reasoning)
    s_q = node_scores(xl, reasoning)
    m_hg = upsample(ad.reshape(s_q, (q.grid.h_p, q.grid.w_p)), H, W)
    m_res = residual_map(m_hg, mu, beta)
    m_star = final_map(m_base, m_res, eta)
    logit = image_score(m_star, params.image_head())
    lap = np.eye(operator.shape[0]) - operator
    maps = AnomalyMaps(m_txt=m_txt, m_vis=m_vis, m_base=m_base,
                       m_hg=m_hg, m_res=m_res, m_star=m_star)
    return QueryForward(maps=maps, s_q=s_q, logit=logit, laplacian=lap)

"""SGD training over few-shot tasks, checkpointing, and AUROC evaluation.

One epoch is one plain SGD step over the whole task: the repository is
re-induced differentiably, per-query operators are refreshed from the
detached repository, alignment losses draw a deterministic subsample of
at most batch_patches patches, and the structural/segmentation terms
average over the queries that carry masks. Everything downstream of
(seed, config, data) is bit-reproducible.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, UndefinedMetricError, ValidationError, WriteError
from .feature_io import TaskManifest, load_manifest
from .inference import write_heatmap_pgm, write_score_csv, write_score_sidecar
from .losses import LossParts, LossWeights, loss_eam, loss_seg, loss_struct, loss_total, \
    loss_tri, loss_v2t
from .params import ModelParams
from .pipeline import TaskData, build_query_operator, forward_query, load_task_data, \
    make_repository, prepare_structural_edges

CHECKPOINT_MAGIC = b"H2VC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 2e-3
    batch_patches: int = 400
    K: int = 8
    L: int = 2
    alpha: float = 0.5
    eta: float = 0.4
    temperature: float = 0.07
    mu: float = 0.5
    beta: float = 1.0
    bins: int = 16
    bandwidth: float = 0.05
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_decay_every: int = 0  # 0 disables the step decay
    lr_decay_factor: float = 0.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 0:
            raise ValidationError("epochs must be nonnegative")
        if self.lr <= 0 or self.batch_patches <= 0 or self.K < 1 or self.L < 1:
            raise ValidationError("lr, batch_patches, K, and L must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if self.eta < 0:
            raise ValidationError("eta must be nonnegative")
        if self.lr_decay_every < 0 or not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValidationError("invalid step-decay configuration")

    def lr_at(self, epoch: int) -> float:
        """Constant lr, or flag-gated step decay every lr_decay_every epochs."""
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        doc = asdict(self)
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**doc)


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    epoch: int
    rng_state: dict


@dataclass
class EvalReport:
    i_auc: float
    p_auc: float | None
    rows: list[dict]
    runtime_seconds: float
    star_maps: dict = field(default_factory=dict, repr=False)

    def to_dict(self, include_runtime: bool = False) -> dict:
        doc = {"i_auc": self.i_auc, "p_auc": self.p_auc, "per_image": self.rows}
        if include_runtime:
            doc["runtime_seconds"] = self.runtime_seconds
        return doc

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), sort_keys=True, indent=2) + "\n"


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(random positive outscores random negative),
    ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have equal length")
    if scores.size == 0 or not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be a non-empty 0/1 vector")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    new_group = np.r_[True, s[1:] != s[:-1]]
    group = np.cumsum(new_group) - 1
    counts = np.bincount(group)
    start = np.cumsum(counts) - counts
    avg_rank = start + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(scores.size)
    ranks[order] = avg_rank[group]
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _alignment_pool(task: TaskData) -> tuple[np.ndarray, np.ndarray]:
    """Patch/label pool: supports are normal; masked queries use node labels;
    unmasked anomalous queries are excluded (their patch labels are unknown)."""
    mats, labs = [], []
    for g in task.support:
        mats.append(g.tokens)
        labs.append(np.zeros(g.n_patches))
    for q in task.queries:
        if q.y_node is not None:
            mats.append(q.grid.tokens)
            labs.append(q.y_node.reshape(-1).astype(np.float64))
        elif q.label == 0:
            mats.append(q.grid.tokens)
            labs.append(np.zeros(q.grid.n_patches))
    return np.vstack(mats), np.concatenate(labs)


def build_operators(task: TaskData, params: ModelParams, cfg: TrainConfig) -> list:
    """Per-query visual operators from the current detached repository.

    Held fixed for one optimization step so the step's loss is an exactly
    differentiable function of the parameters.
    """
    repo = make_repository(params, task, cfg.weights.gamma)
    return [build_query_operator(q, repo, cfg.K) if q.y_node is not None else None
            for q in task.queries]


def task_losses(task: TaskData, params: ModelParams, cfg: TrainConfig,
                batch_idx: np.ndarray, pool: tuple[np.ndarray, np.ndarray],
                operators: list) -> LossParts:
    """All loss parts for one step, with the hypergraph operators as constants."""
    repo = make_repository(params, task, cfg.weights.gamma)
    patches, labels = pool[0][batch_idx], pool[1][batch_idx]

    v2t = loss_v2t(patches, labels, repo, cfg.temperature)
    tri = loss_tri(patches, labels, repo, cfg.weights.tri_margin)
    normal = patches[labels == 0]
    if normal.shape[0] == 0:
        normal = np.vstack([g.tokens for g in task.support])
    eam = loss_eam(normal, repo)

    struct_terms, seg_terms = [], []
    for q, operator in zip(task.queries, operators):
        if q.y_node is None or operator is None:
            continue
        fwd = forward_query(q, repo, operator, params, alpha=cfg.alpha, eta=cfg.eta,
                            mu=cfg.mu, beta=cfg.beta, temperature=cfg.temperature)
        struct_terms.append(loss_struct(fwd.s_q, q.y_node.reshape(-1),
                                        fwd.laplacian, cfg.weights))
        seg_terms.append(loss_seg(fwd.maps.m_star, q.mask, fwd.maps.m_txt, cfg.weights))

    def _mean(terms):
        if not terms:
            return Tensor(np.zeros(()))
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc * (1.0 / len(terms))

    return LossParts(v2t=v2t, tri=tri, eam=eam,
                     struct=_mean(struct_terms), seg=_mean(seg_terms))


def train(manifest, cfg: TrainConfig, out_dir=None,
          resume: "Checkpoint | None" = None) -> tuple[Checkpoint, list[dict]]:
    """Run SGD for cfg.epochs steps; returns the final checkpoint and the
    per-epoch loss log. Writes checkpoint_final/checkpoint_best plus
    loss_log.csv under out_dir when given."""
    if not isinstance(manifest, TaskManifest):
        manifest = load_manifest(manifest)
    task = load_task_data(manifest)
    prepare_structural_edges(task, cfg.K)

    if resume is not None:
        _check_dims(resume, task.d, cfg)
        params = resume.params.clone()
        rng = np.random.default_rng(cfg.seed)
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        rng = np.random.default_rng(cfg.seed)
        params = ModelParams.init(task.d, cfg.L, cfg.bins, cfg.bandwidth, rng)
        start_epoch = 0

    pool = _alignment_pool(task)
    pool_size = pool[0].shape[0]
    log: list[dict] = []
    best_total = np.inf
    best_params = params.clone()
    best_epoch = start_epoch
    velocity: dict[str, np.ndarray] = {}

    for epoch in range(start_epoch, cfg.epochs):
        take = min(cfg.batch_patches, pool_size)
        batch_idx = rng.choice(pool_size, size=take, replace=False)
        params.zero_grads()
        operators = build_operators(task, params, cfg)
        parts = task_losses(task, params, cfg, batch_idx, pool, operators)
        total = loss_total(parts, cfg.weights)
        total.backward()
        velocity = params.sgd_step(cfg.lr_at(epoch), cfg.momentum, cfg.weight_decay,
                                   velocity)
        entry = {"epoch": epoch + 1, "total": float(total.data),
                 "v2t": float(parts.v2t.data), "tri": float(parts.tri.data),
                 "eam": float(parts.eam.data), "struct": float(parts.struct.data),
                 "seg": float(parts.seg.data)}
        log.append(entry)
        if entry["total"] < best_total:
            best_total = entry["total"]
            best_params = params.clone()
            best_epoch = epoch + 1

    final = Checkpoint(params=params, config=cfg, epoch=cfg.epochs,
                       rng_state=rng.bit_generator.state)
    best = Checkpoint(params=best_params, config=cfg, epoch=best_epoch,
                      rng_state=rng.bit_generator.state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(final, out_dir / "checkpoint_final.h2vc")
        save_checkpoint(best if log else final, out_dir / "checkpoint_best.h2vc")
        _write_loss_log(out_dir / "loss_log.csv", log)
    return final, log


def _write_loss_log(path: Path, log: list[dict]) -> None:
    cols = ["epoch", "total", "v2t", "tri", "eam", "struct", "seg"]
    lines = [",".join(cols)]
    for entry in log:
        lines.append(",".join(repr(entry[c]) if c != "epoch" else str(entry[c])
                              for c in cols))
    try:
        path.write_text("\n".join(lines) + "\n", "utf-8")
    except OSError as exc:
        raise WriteError(f"failed to write {path}: {exc}") from exc


def _check_dims(ckpt: Checkpoint, d: int, cfg: TrainConfig) -> None:
    if ckpt.params.d != d:
        raise ValidationError(f"checkpoint d={ckpt.params.d} does not match task d={d}")
    if ckpt.params.n_layers != cfg.L:
        raise ValidationError("checkpoint layer count does not match the configuration")
    if ckpt.params.n_bins != cfg.bins:
        raise ValidationError("checkpoint bin count does not match the configuration")


def _run_inference(manifest, ckpt: Checkpoint, eta: float | None = None):
    """Forward every query of a manifest; returns rows, final maps, and the
    pixel pools of masked queries."""
    if not isinstance(manifest, TaskManifest):
        manifest = load_manifest(manifest)
    task = load_task_data(manifest)
    cfg = ckpt.config
    _check_dims(ckpt, task.d, cfg)
    prepare_structural_edges(task, cfg.K)
    use_eta = cfg.eta if eta is None else eta
    repo = make_repository(ckpt.params, task, cfg.weights.gamma)
    rows, star_maps = [], {}
    pixel_scores, pixel_labels = [], []
    for q in task.queries:
        operator = build_query_operator(q, repo, cfg.K)
        fwd = forward_query(q, repo, operator, ckpt.params, alpha=cfg.alpha,
                            eta=use_eta, mu=cfg.mu, beta=cfg.beta,
                            temperature=cfg.temperature)
        rows.append({"image_id": q.image_id, "label": q.label,
                     "logit": float(fwd.logit.data)})
        star_maps[q.image_id] = fwd.maps.m_star.data
        if q.mask is not None:
            pixel_scores.append(fwd.maps.m_star.data.reshape(-1))
            pixel_labels.append(q.mask.reshape(-1))
    return rows, star_maps, pixel_scores, pixel_labels


def evaluate(manifest, ckpt: Checkpoint, per_image_pauc: bool = False,
             eta: float | None = None) -> EvalReport:
    """Full inference over a manifest: image AUROC over logits, pixel AUROC
    over pooled masked-query pixels. P-AUC is None when no masks exist."""
    start = time.perf_counter()
    rows, star_maps, pixel_scores, pixel_labels = _run_inference(manifest, ckpt, eta)
    i_auc = auroc([r["logit"] for r in rows], [r["label"] for r in rows])
    if not pixel_scores:
        p_auc = None
    elif per_image_pauc:
        per_image = [auroc(s, m) for s, m in zip(pixel_scores, pixel_labels)
                     if m.any() and not m.all()]
        p_auc = float(np.mean(per_image)) if per_image else None
    else:
        p_auc = auroc(np.concatenate(pixel_scores), np.concatenate(pixel_labels))
    return EvalReport(i_auc=i_auc, p_auc=p_auc, rows=rows,
                      runtime_seconds=time.perf_counter() - start,
                      star_maps=star_maps)


def infer_task(manifest, ckpt: Checkpoint, out_dir) -> EvalReport:
    """Write one PGM heatmap + JSON sidecar per query plus a scores.csv.

    Works on unlabeled or single-class manifests; metrics are NaN/None then.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rows, star_maps, _, _ = _run_inference(manifest, ckpt)
    csv_rows = []
    for row in rows:
        logit = row["logit"]
        prob = float(1.0 / (1.0 + np.exp(-logit))) if logit >= 0 else \
            float(np.exp(logit) / (1.0 + np.exp(logit)))
        write_heatmap_pgm(star_maps[row["image_id"]], out_dir / f"{row['image_id']}.pgm")
        write_score_sidecar(out_dir / f"{row['image_id']}.json", row["image_id"], logit)
        csv_rows.append({"image_id": row["image_id"], "label": row["label"],
                         "logit": logit, "prob": prob})
    write_score_csv(out_dir / "scores.csv", csv_rows)
    return EvalReport(i_auc=float("nan"), p_auc=None, rows=rows,
                      runtime_seconds=time.perf_counter() - start,
                      star_maps=star_maps)


# Checkpoint serialization ----------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blocks = ckpt.params.blocks()
    header = {
        "d": ckpt.params.d,
        "L": ckpt.params.n_layers,
        "B": ckpt.params.n_bins,
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_dict(),
        "rng_state": ckpt.rng_state,
        "blocks": [{"name": n, "shape": list(t.data.shape)} for n, t in blocks.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(t.data.astype("<f4").tobytes(order="C") for t in blocks.values())
    blob = CHECKPOINT_MAGIC + struct.pack("<B", CHECKPOINT_VERSION) + \
        struct.pack("<I", len(header_bytes)) + header_bytes + payload
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise WriteError(f"failed to write {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 9 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if blob[4] != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob[4]}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    cfg = TrainConfig.from_dict(header["config"])
    params = ModelParams.init(header["d"], header["L"], header["B"], cfg.bandwidth)
    flat = np.frombuffer(blob[9 + header_len:], dtype="<f4").astype(np.float64)
    expected = params.flatten().size
    if flat.size != expected:
        raise FormatError(f"{path}: payload has {flat.size} floats, expected {expected}")
    params.load_flat(flat)
    return Checkpoint(params=params, config=cfg, epoch=int(header["epoch"]),
                      rng_state=header["rng_state"])

"""Per-parameter-block finite-difference verification of the full objective.

The checked function is one training step's loss with the hypergraph
operators, the patch subsample, and all other blocks frozen, exactly as
the trainer computes it. Parameters are perturbed away from their
near-identity initialization first so every gradient path is live.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import grad_check, loss_total
from .params import ModelParams
from .pipeline import load_task_data, prepare_structural_edges
from .train import TrainConfig, build_operators, task_losses, _alignment_pool
from .feature_io import TaskManifest, load_manifest


def randomize_params(params: ModelParams, rng: np.random.Generator,
                     scale: float = 0.05) -> None:
    """Nudge every block off its initialization so no path is dead.

    The node head gets entries bounded away from zero: the W-layer
    gradient tail scales with the head magnitudes, and the FD oracle
    needs that tail above its rounding floor.
    """
    for name, t in params.blocks().items():
        if name == "bin_centers":
            # Keep centers strictly inside [0, 1]: FD perturbation must not
            # push them past the domain check.
            centers = np.clip(t.data + rng.normal(0, 1e-3, t.data.shape), 0.01, 0.99)
            t.data = np.sort(centers)
        elif name == "bandwidth":
            t.data = t.data * (1.0 + 0.1 * abs(float(rng.normal())))
        elif name == "head_weight":
            signs = np.where(rng.random(t.data.shape) < 0.5, -1.0, 1.0)
            t.data = signs * rng.uniform(0.2, 0.5, t.data.shape) / np.sqrt(t.data.size)
        else:
            t.data = t.data + rng.normal(0, scale, t.data.shape)


def _full_gradient(task, params, cfg, batch_idx, pool, operators) -> np.ndarray:
    params.zero_grads()
    total = loss_total(task_losses(task, params, cfg, batch_idx, pool, operators),
                       cfg.weights)
    total.backward()
    grads = []
    for name in params.block_names():
        g = params[name].grad
        grads.append(np.zeros(params[name].data.size) if g is None else g.reshape(-1))
    return np.concatenate(grads)


def block_gradient_errors(manifest, cfg: TrainConfig, epsilon: float = 1e-5,
                          n_queries: int = 2, seed: int = 0,
                          margin_factor: float = 10.0,
                          grad_floor: float = 5e-7) -> dict[str, float]:
    """Max relative FD error of d(loss_total)/d(block), per block.

    Central differences are only a valid oracle where (a) the loss is
    smooth across the whole FD stencil and (b) each checked derivative
    rises above the FD rounding floor (about ulp(loss) / (2 eps)). The
    parameter randomization is therefore resampled until every hinge,
    clamp, and leaky-rectifier input sits margin_factor * epsilon away
    from its kink, and every coordinate that has any gradient at all has
    one above grad_floor. Kink subgradients and clamp boundaries get
    their own dedicated op-level tests.
    """
    if not isinstance(manifest, TaskManifest):
        manifest = load_manifest(manifest)
    task = load_task_data(manifest)
    supervised = [q for q in task.queries if q.y_node is not None]
    task.queries = supervised[:max(1, n_queries)]
    prepare_structural_edges(task, cfg.K)

    threshold = margin_factor * epsilon
    rng = np.random.default_rng(seed)
    pool = _alignment_pool(task)
    take = min(cfg.batch_patches, pool[0].shape[0])

    best: tuple[float, ModelParams, np.ndarray, list] | None = None
    for _ in range(256):
        params = ModelParams.init(task.d, cfg.L, cfg.bins, cfg.bandwidth, rng)
        randomize_params(params, rng)
        batch_idx = rng.choice(pool[0].shape[0], size=take, replace=False)
        operators = build_operators(task, params, cfg)
        with ad.kink_probe() as margins:
            task_losses(task, params, cfg, batch_idx, pool, operators)
        kink_margin = min(margins) if margins else np.inf
        grad = _full_gradient(task, params, cfg, batch_idx, pool, operators)
        nonzero = np.abs(grad[grad != 0.0])
        grad_margin = nonzero.min() if nonzero.size else np.inf
        score = min(kink_margin / threshold, grad_margin / grad_floor)
        if best is None or score > best[0]:
            best = (score, params, batch_idx, operators)
        if score > 1.0:
            break
    _, params, batch_idx, operators = best

    errors: dict[str, float] = {}
    for block in params.block_names():
        shape = params[block].data.shape

        def thunk(vec: Tensor, _block=block, _shape=shape):
            blocks = {}
            for name in params.block_names():
                if name == _block:
                    blocks[name] = ad.reshape(vec, _shape)
                else:
                    blocks[name] = Tensor(params[name].data)
            model = ModelParams(blocks)
            parts = task_losses(task, model, cfg, batch_idx, pool, operators)
            return loss_total(parts, cfg.weights)

        errors[block] = grad_check(thunk, params[block].data.reshape(-1), epsilon)
    return errors

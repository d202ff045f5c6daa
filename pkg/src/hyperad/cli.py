"""Command-line surface: synth, train, eval, infer, gradcheck, dump-graph.

--config accepts a JSON file mirroring TrainConfig; explicit flags
override config values. Validation failures exit 1, usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import EngineError
from .feature_io import SynthConfig, generate_synthetic_task, load_manifest
from .train import TrainConfig, evaluate, infer_task, load_checkpoint, train


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file mirroring TrainConfig")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-patches", type=int, dest="batch_patches")
    p.add_argument("--k", type=int, dest="K")
    p.add_argument("--layers", type=int, dest="L")
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--lr-decay-every", type=int, dest="lr_decay_every")
    p.add_argument("--lr-decay-factor", type=float, dest="lr_decay_factor")
    p.add_argument("--lambda-str", type=float, dest="lambda_str")
    p.add_argument("--lambda-seg", type=float, dest="lambda_seg")
    p.add_argument("--xi", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tri-margin", type=float, dest="tri_margin")


_WEIGHT_KEYS = ("lambda_str", "lambda_seg", "xi", "gamma", "tri_margin")


def _build_config(args, seed: int | None = None) -> TrainConfig:
    doc: dict = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text("utf-8"))
    weights = dict(doc.get("weights", {}))
    for key in _WEIGHT_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            weights[key] = val
    doc["weights"] = weights
    for key in ("epochs", "lr", "batch_patches", "K", "L", "alpha", "eta",
                "temperature", "mu", "beta", "bins", "bandwidth", "momentum",
                "weight_decay", "lr_decay_every", "lr_decay_factor"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if seed is not None:
        doc["seed"] = seed
    return TrainConfig.from_dict(doc)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperad",
                                     description="Few-shot anomaly detection engine over "
                                                 "precomputed feature grids")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic task directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--h-p", type=int, default=8, dest="h_p")
    p.add_argument("--w-p", type=int, default=8, dest="w_p")
    p.add_argument("--n-support", type=int, default=1, dest="n_support")
    p.add_argument("--n-query", type=int, default=20, dest="n_query")
    p.add_argument("--n-heldout", type=int, default=0, dest="n_heldout")
    p.add_argument("--anomaly-rate", type=float, default=0.5, dest="anomaly_rate")
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--n-templates", type=int, default=4, dest="n_templates")
    p.add_argument("--noise-scale", type=float, default=0.15, dest="noise_scale")

    p = sub.add_parser("train", help="train on a task manifest")
    p.add_argument("--task", type=Path, required=True,
                   help="task directory or manifest.json path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, help="directory for checkpoints and the loss log")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--task", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, dest="out_dir")
    p.add_argument("--per-image-pauc", action="store_true", dest="per_image_pauc")
    p.add_argument("--eta-override", type=float, dest="eta_override")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--timing", action="store_true",
                   help="include runtime_seconds in the report JSON")

    p = sub.add_parser("infer", help="write heatmaps and scores for one manifest")
    p.add_argument("--task", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, help="optional; untrained defaults otherwise")
    p.add_argument("--figures", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--task", type=Path, help="synthetic task to check on; generated "
                                             "in a temp directory when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--queries", type=int, default=2,
                   help="number of queries contributing to the checked loss")
    _add_config_flags(p)

    p = sub.add_parser("dump-graph", help="dump one query's hyperedges as JSON lines")
    p.add_argument("--task", type=Path, required=True)
    p.add_argument("--query-index", type=int, default=0, dest="query_index")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    return parser


def _manifest_path(task: Path) -> Path:
    return task / "manifest.json" if task.is_dir() else task


def _cmd_synth(args) -> int:
    cfg = SynthConfig(d=args.d, h_p=args.h_p, w_p=args.w_p, n_support=args.n_support,
                      n_query=args.n_query, anomaly_rate=args.anomaly_rate,
                      shift_magnitude=args.shift, n_templates=args.n_templates,
                      noise_scale=args.noise_scale,
                      resolution=tuple(args.resolution) if args.resolution else None,
                      n_heldout=args.n_heldout)
    manifest = generate_synthetic_task(cfg, args.seed, args.out)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args, seed=args.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, log = train(_manifest_path(args.task), cfg, out_dir=args.out, resume=resume)
    if log:
        print(f"epoch 1 total={log[0]['total']:.6f}  "
              f"epoch {log[-1]['epoch']} total={log[-1]['total']:.6f}")
    if args.out and log and not args.no_figures:
        from .plots import save_loss_curve
        save_loss_curve(log, Path(args.out) / "loss_curve.png")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    report = evaluate(_manifest_path(args.task), ckpt,
                      per_image_pauc=args.per_image_pauc, eta=args.eta_override)
    payload = report.to_json(include_runtime=args.timing)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(payload, "utf-8")
        from .inference import write_score_csv
        rows = []
        for r in report.rows:
            logit = r["logit"]
            prob = float(1.0 / (1.0 + np.exp(-logit))) if logit >= 0 else \
                float(np.exp(logit) / (1.0 + np.exp(logit)))
            rows.append({**r, "prob": prob})
        write_score_csv(out_dir / "scores.csv", rows)
        if not args.no_figures:
            from .plots import save_eval_figures
            save_eval_figures(report, out_dir / "figures")
    else:
        sys.stdout.write(payload)
    print(f"runtime: {report.runtime_seconds:.3f}s", file=sys.stderr)
    return 0


def _cmd_infer(args) -> int:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
    else:
        # Untrained defaults sized to the task's feature dimension.
        from .params import ModelParams
        from .train import Checkpoint
        cfg = _build_config(args)
        manifest = load_manifest(_manifest_path(args.task))
        from .feature_io import read_feature_grid
        d = read_feature_grid(manifest.support_paths()[0]).d
        rng = np.random.default_rng(cfg.seed)
        params = ModelParams.init(d, cfg.L, cfg.bins, cfg.bandwidth, rng)
        ckpt = Checkpoint(params=params, config=cfg, epoch=0,
                          rng_state=rng.bit_generator.state)
    report = infer_task(_manifest_path(args.task), ckpt, args.out)
    if args.figures:
        from .plots import save_heatmap
        fig_dir = Path(args.out) / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        for image_id, m_star in report.star_maps.items():
            save_heatmap(m_star, fig_dir / f"{image_id}.png", image_id)
    print(f"wrote {len(report.rows)} heatmaps to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    import tempfile

    from .gradsuite import block_gradient_errors

    cfg = _build_config(args, seed=args.seed)
    if args.task:
        manifest = _manifest_path(args.task)
        errors = block_gradient_errors(manifest, cfg, epsilon=args.epsilon,
                                       n_queries=args.queries, seed=args.seed)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            synth = SynthConfig(d=8, h_p=4, w_p=4, n_query=4, n_heldout=0)
            manifest = generate_synthetic_task(synth, args.seed, tmp)
            errors = block_gradient_errors(manifest, cfg, epsilon=args.epsilon,
                                           n_queries=args.queries, seed=args.seed)
    width = max(len(n) for n in errors)
    print(f"{'block':<{width}}  max_rel_err")
    failed = False
    for name, err in errors.items():
        flag = "" if err < args.tolerance else "  FAIL"
        print(f"{name:<{width}}  {err:.3e}{flag}")
        failed = failed or err >= args.tolerance
    return 1 if failed else 0


def _cmd_dump_graph(args) -> int:
    from .hypergraph import build_query_hypergraph, dump_edges_jsonl
    from .params import ModelParams
    from .pipeline import load_task_data, make_repository

    cfg = _build_config(args)
    manifest = load_manifest(_manifest_path(args.task))
    task = load_task_data(manifest)
    if not 0 <= args.query_index < len(task.queries):
        raise EngineError(f"query index {args.query_index} out of range")
    if args.ckpt:
        params = load_checkpoint(args.ckpt).params
    else:
        params = ModelParams.init(task.d, cfg.L, cfg.bins, cfg.bandwidth,
                                  np.random.default_rng(cfg.seed))
    repo = make_repository(params, task, cfg.weights.gamma)
    from .pipeline import detach_repository
    hg = build_query_hypergraph(task.queries[args.query_index].grid,
                                detach_repository(repo), cfg.K)
    payload = dump_edges_jsonl(hg)
    if args.out:
        Path(args.out).write_text(payload, "utf-8")
    else:
        sys.stdout.write(payload)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "gradcheck": _cmd_gradcheck,
    "dump-graph": _cmd_dump_graph,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

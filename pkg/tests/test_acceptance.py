"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with `pytest tests/test_acceptance.py -s` to see the lines as they
pass; every tolerance is pinned here, not configured elsewhere.
"""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from hyperad import autodiff as ad
from hyperad.autodiff import Tensor
from hyperad.feature_io import SynthConfig, generate_synthetic_task, load_manifest
from hyperad.gradsuite import block_gradient_errors
from hyperad.hypergraph import build_query_hypergraph, laplacian, visual_adjacency_operator
from hyperad.inference import default_image_head, final_map, fuse_base, residual_map, \
    soft_histogram
from hyperad.losses import LossWeights, bce, focal
from hyperad.reasoning import ReasoningParams, hg_conv_layer
from hyperad.semantic import build_repository
from hyperad.train import TrainConfig, auroc, evaluate, train
from hyperad.cli import main as cli_main


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def unit_rows(mat):
    mat = np.asarray(mat, dtype=np.float64)
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def make_repo(rng, d, n_rows=2):
    return build_repository(Tensor(unit_rows(rng.normal(size=(n_rows, d)))),
                            Tensor(unit_rows(rng.normal(size=(n_rows, d)))), 0.2)


def test_gradient_suite(tmp_path):
    """Reverse-mode vs central differences on 5 random synthetic tasks."""
    start = time.perf_counter()
    worst = 0.0
    for seed in (300, 301, 302, 303, 304):
        task_dir = tmp_path / f"task_{seed}"
        cfg_s = SynthConfig(d=16, h_p=8, w_p=8, n_query=4, anomaly_rate=1.0,
                            shift_magnitude=1.0)
        manifest = generate_synthetic_task(cfg_s, seed, task_dir)
        # eta/beta keep the final-map clamp inactive at the checked point;
        # the FD oracle is only valid where the stencil avoids every kink.
        cfg = TrainConfig(K=4, L=2, seed=seed, eta=0.1, beta=0.5)
        errors = block_gradient_errors(manifest, cfg, epsilon=1e-5,
                                       n_queries=2, seed=seed)
        worst = max(worst, max(errors.values()))
    elapsed = time.perf_counter() - start
    report("gradient suite", worst < 1e-4 and elapsed < 120.0,
           f"max rel err {worst:.3e} (< 1e-4) over 5 tasks in {elapsed:.1f}s (< 120s)")


def test_hypergraph_oracle_suite():
    """Builder vs exhaustive brute-force construction on 100 small graphs."""
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    layer_worst = 0.0
    quad_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 13))
        d = int(rng.integers(2, 6))
        K = int(rng.integers(1, max(2, min(4, n))))
        K = min(K, n - 1)
        tokens = rng.normal(size=(n, d))
        repo = make_repo(rng, d)
        hg = build_query_hypergraph(tokens, repo, K)

        # membership oracle
        normed = unit_rows(tokens)
        prompts = unit_rows(repo.prompt_rows())
        sims = normed @ normed.T
        for anchor in range(n):
            order = sorted((j for j in range(n) if j != anchor),
                           key=lambda j: (-sims[anchor, j], j))
            expect = tuple(sorted({anchor, *order[:K]}))
            assert hg.edges[anchor].members == expect
        affin = normed @ prompts.T
        for r in range(prompts.shape[0]):
            order = sorted(range(n), key=lambda j: (-affin[j, r], j))
            expect = tuple(sorted(order[:K]) + [n + r])
            edge = hg.edges[n + r]
            assert edge.members == expect
            assert edge.weight == (np.mean([affin[j, r] for j in order[:K]]) + 1.0) / 2.0

        # degree oracle (exact integers)
        hv = hg.incidence[:n]
        assert np.array_equal(hg.d_v, hv.sum(axis=1))
        assert np.array_equal(hg.d_e, hv.sum(axis=0))

        # Laplacian quadratic form vs the per-edge formula
        lap = laplacian(hg)
        s = rng.normal(size=n)
        direct = s @ lap @ s
        z = s / np.sqrt(hg.d_v)
        per_edge = s @ s - sum(
            hg.theta[e] / hg.d_e[e] * float(np.sum(z * hv[:, e])) ** 2
            for e in range(len(hg.edges)))
        quad_worst = max(quad_worst, abs(direct - per_edge))

        # Eq-style layer output vs dense matrix-chain oracle
        a = visual_adjacency_operator(hg)
        dv_m = np.diag(1.0 / np.sqrt(hg.d_v))
        chain = dv_m @ hv @ np.diag(hg.theta) @ np.diag(1.0 / hg.d_e) @ hv.T @ dv_m
        x = rng.normal(size=(n, d))
        w = rng.normal(size=(d, d))
        got = hg_conv_layer(x, a, w).data
        expect = np.where(chain @ x @ w > 0, chain @ x @ w, 0.01 * (chain @ x @ w))
        layer_worst = max(layer_worst, float(np.max(np.abs(got - expect))))
    elapsed = time.perf_counter() - start
    report("hypergraph oracle suite",
           layer_worst < 1e-10 and quad_worst < 1e-10 and elapsed < 30.0,
           f"membership/degrees exact, quad form diff {quad_worst:.1e}, "
           f"layer diff {layer_worst:.1e} (< 1e-10), {elapsed:.1f}s (< 30s)")


def test_spectral_properties():
    """Symmetry and PSD of the operator over 1000 fuzzed instances."""
    rng = np.random.default_rng(777)
    asym_worst = 0.0
    quad_min = np.inf
    for _ in range(1000):
        n = int(rng.integers(3, 14))
        d = int(rng.integers(2, 7))
        K = int(rng.integers(1, n))
        tokens = rng.normal(size=(n, d))
        repo = make_repo(rng, d, n_rows=int(rng.integers(1, 4)))
        hg = build_query_hypergraph(tokens, repo, min(K, n - 1))
        a = visual_adjacency_operator(hg)
        asym_worst = max(asym_worst, float(np.max(np.abs(a - a.T))))
        lap = np.eye(n) - a
        for _ in range(3):
            s = rng.normal(size=n)
            quad_min = min(quad_min, float(s @ lap @ s))
    report("spectral properties", asym_worst < 1e-10 and quad_min > -1e-8,
           f"max asymmetry {asym_worst:.1e} (< 1e-10), "
           f"min quadratic form {quad_min:.2e} (>= -1e-8) over 1000 instances")


def test_reduction_identities():
    rng = np.random.default_rng(5)
    m_txt = Tensor(rng.random((6, 6)))
    m_vis = Tensor(rng.random((6, 6)))
    m_hg = Tensor(rng.random((6, 6)))

    base = fuse_base(m_txt, m_vis, 0.5)
    res = residual_map(m_hg, 0.5, 1.0)
    eta_zero = np.array_equal(final_map(base, res, 0.0).data, base.data)
    alpha_one = np.array_equal(fuse_base(m_txt, m_vis, 1.0).data, m_txt.data)
    alpha_zero = np.array_equal(fuse_base(m_txt, m_vis, 0.0).data, m_vis.data)

    head1 = default_image_head(B=1)
    hist_one = np.array_equal(soft_histogram(Tensor(rng.random((5, 5))), head1).data,
                              np.array([1.0]))

    p = rng.uniform(0.05, 0.95, size=128)
    y = (rng.random(128) > 0.7).astype(np.float64)
    focal_is_half_bce = float(focal(Tensor(p), y, 0.0, 0.5).data) == \
        float(0.5 * bce(Tensor(p), y).data)

    ok = eta_zero and alpha_one and alpha_zero and hist_one and focal_is_half_bce
    report("reduction identities", ok,
           f"eta0->base {eta_zero}, alpha1->txt {alpha_one}, alpha0->vis {alpha_zero}, "
           f"B1->[1.0] {hist_one}, focal(0,.5)=bce/2 {focal_is_half_bce} (all exact)")


def test_auroc_oracle():
    """All labelings of up to 12 samples against pairwise counting."""

    def oracle(scores, labels):
        pos = [s for s, y in zip(scores, labels) if y == 1]
        neg = [s for s, y in zip(scores, labels) if y == 0]
        hits = sum(1.0 if p > q else (0.5 if p == q else 0.0)
                   for p, q in itertools.product(pos, neg))
        return hits / (len(pos) * len(neg))

    rng = np.random.default_rng(11)
    checked = 0
    worst = 0.0
    for n in range(2, 13):
        # tied-heavy and generic score vectors
        vectors = [np.round(rng.random(n) * 3) / 3, rng.random(n), np.full(n, 0.4)]
        for scores in vectors:
            for bits in range(1, 2 ** n - 1):
                labels = np.array([(bits >> i) & 1 for i in range(n)])
                got = auroc(scores, labels)
                expect = oracle(scores.tolist(), labels.tolist())
                worst = max(worst, abs(got - expect))
                checked += 1
    ties_half = auroc(np.full(8, 1.23), np.array([1, 0, 1, 0, 1, 0, 1, 0])) == 0.5
    report("auroc oracle", worst < 1e-12 and ties_half,
           f"{checked} labelings checked, max diff {worst:.1e}, constant scores -> 0.5")


def test_synthetic_end_to_end(tmp_path):
    """Train with paper defaults; held-out I-AUC and P-AUC; HRB non-decrease."""
    start = time.perf_counter()
    task_dir = tmp_path / "main"
    cfg_s = SynthConfig(d=16, h_p=8, w_p=8, n_support=1, n_query=20,
                        anomaly_rate=0.5, shift_magnitude=1.0, n_heldout=20)
    generate_synthetic_task(cfg_s, 7, task_dir)
    cfg = TrainConfig(epochs=100, lr=2e-3, K=8, L=2, alpha=0.5, eta=0.4,
                      seed=7, weights=LossWeights(lambda_str=0.02, lambda_seg=1.0))
    ckpt, log = train(task_dir / "manifest.json", cfg)
    rep = evaluate(task_dir / "heldout_manifest.json", ckpt)
    trend_ok = min(e["total"] for e in log) < log[0]["total"]

    means = {}
    for eta in (0.0, 0.4):
        aucs = []
        for seed in (101, 102, 103, 104, 105):
            seed_dir = tmp_path / f"seed_{seed}_{eta}"
            generate_synthetic_task(cfg_s, seed, seed_dir)
            cfg_eta = TrainConfig(epochs=100, lr=2e-3, K=8, L=2, alpha=0.5,
                                  eta=eta, seed=seed,
                                  weights=LossWeights(lambda_str=0.02, lambda_seg=1.0))
            ck, _ = train(seed_dir / "manifest.json", cfg_eta)
            aucs.append(evaluate(seed_dir / "heldout_manifest.json", ck).i_auc)
        means[eta] = float(np.mean(aucs))
    elapsed = time.perf_counter() - start
    ok = (rep.i_auc >= 0.90 and rep.p_auc is not None and rep.p_auc >= 0.90
          and means[0.4] >= means[0.0] and trend_ok and elapsed < 300.0)
    report("synthetic end-to-end", ok,
           f"I-AUC {rep.i_auc:.4f} (>= 0.90), P-AUC {rep.p_auc:.4f} (>= 0.90), "
           f"mean I-AUC eta=0.4 {means[0.4]:.4f} >= eta=0 {means[0.0]:.4f}, "
           f"loss trend down {trend_ok}, {elapsed:.0f}s (< 300s)")


def test_determinism(tmp_path):
    """(seed, config, data) -> bit-identical checkpoints, reports, heatmaps."""
    artifacts = {}
    for run in ("a", "b"):
        root = tmp_path / run
        rc = cli_main(["synth", "--seed", "7", "--out", str(root / "task"),
                       "--n-query", "6", "--n-heldout", "4"])
        assert rc == 0
        rc = cli_main(["train", "--task", str(root / "task"), "--seed", "7",
                       "--epochs", "10", "--out", str(root / "run"), "--no-figures"])
        assert rc == 0
        rc = cli_main(["eval", "--task", str(root / "task" / "heldout_manifest.json"),
                       "--ckpt", str(root / "run" / "checkpoint_final.h2vc"),
                       "--out-dir", str(root / "eval"), "--no-figures"])
        assert rc == 0
        rc = cli_main(["infer", "--task", str(root / "task" / "heldout_manifest.json"),
                       "--ckpt", str(root / "run" / "checkpoint_final.h2vc"),
                       "--out", str(root / "maps")])
        assert rc == 0
        blobs = {}
        for rel in ("run/checkpoint_final.h2vc", "run/checkpoint_best.h2vc",
                    "run/loss_log.csv", "eval/report.json", "eval/scores.csv"):
            blobs[rel] = (root / rel).read_bytes()
        for p in sorted((root / "maps").iterdir()):
            blobs[f"maps/{p.name}"] = p.read_bytes()
        artifacts[run] = blobs
    same = artifacts["a"].keys() == artifacts["b"].keys() and all(
        artifacts["a"][k] == artifacts["b"][k] for k in artifacts["a"])
    report("determinism", same,
           f"{len(artifacts['a'])} artifacts byte-identical across two runs")

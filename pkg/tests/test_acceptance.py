"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict in ``conftest.ACCEPTANCE_LINES`` before
asserting, so the terminal summary lists every criterion even when some fail.
Expensive artifacts (analytic dataset, trained scorer, trained denoiser,
refinement grid) are session fixtures shared across criteria.
"""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np
import pytest

import conftest
from fidelity_lab import cli
from fidelity_lab.cfm_scorer import TrainConfig, load_manifest_groups, score_images, train_scorer_arrays
from fidelity_lab.cfr import DEFAULT_KAPPA, DEFAULT_LAMBDA, MODES, mode_field, refine_batch
from fidelity_lab.color_stats import mean_saturation
from fidelity_lab.dataset_builder import BuildConfig, DatasetManifest, build_dataset
from fidelity_lab.numerics import GradTape, Tensor
from fidelity_lab.rank_metrics import kendall_tau_b, pearson, spearman
from fidelity_lab.softrank import pairwise_probs, soft_ranks, softrank_loss_tensor, softrank_loss_value
from fidelity_lab.toy_diffusion import DenoiserParams, cfg_predict, predict_pair, sample_batch
from oracles.brute import brute_kendall_b, brute_pearson, brute_spearman, decimal_softrank_grad

pytestmark = pytest.mark.acceptance

ANALYTIC_GROUPS = 480
REFINE_S0 = 7.5
REFINE_SELECT = 0.05
NUM_CONDS = 8
SEEDS_PER_COND = 8


def record(cid: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES.append((str(cid), bool(ok), detail))


# shared artifacts


@pytest.fixture(scope="session")
def analytic(tmp_path_factory):
    root = tmp_path_factory.mktemp("analytic")
    manifest = build_dataset(BuildConfig(str(root), groups=ANALYTIC_GROUPS, seed=0))
    train = load_manifest_groups(manifest, root, "train")
    test = load_manifest_groups(manifest, root, "test")
    return train, test


@pytest.fixture(scope="session")
def test_scores(analytic):
    (gtr, idtr, _), (gte, idte, _) = analytic
    params, _ = train_scorer_arrays(gtr, idtr, TrainConfig())
    G, K = gte.shape[:2]
    S = score_images(gte.reshape((G * K,) + gte.shape[2:]), np.repeat(idte, K), params).reshape(G, K)
    return params, S


@pytest.fixture(scope="session")
def denoiser(tmp_path_factory):
    out = tmp_path_factory.mktemp("denoiser") / "denoiser.ckpt"
    assert cli.main(["train", "denoiser", "--out", str(out), "--seed", "0", "--log-level", "WARNING"]) == 0
    return DenoiserParams.load(out)


@pytest.fixture(scope="session")
def refine_grid(denoiser, test_scores):
    scorer, _ = test_scores
    conds = [c for c in range(NUM_CONDS) for _ in range(SEEDS_PER_COND)]
    seeds = list(range(len(conds)))
    first = sample_batch(denoiser, conds, seeds, REFINE_S0)
    reports = {m: refine_batch(denoiser, scorer, conds, seeds, REFINE_S0, DEFAULT_LAMBDA, DEFAULT_KAPPA,
                               m, first_pass=first).reports for m in MODES}
    keep = [i for i, r in enumerate(reports["baseline"]) if r.delta_sat_before >= REFINE_SELECT]
    return {m: [rs[i] for i in keep] for m, rs in reports.items()}


def accuracies(S: np.ndarray) -> tuple[float, float]:
    return float(np.mean(S[:, :-1] > S[:, 1:])), float(np.mean(S[:, 0] > S[:, -1]))


# criteria


def test_criterion_1_softrank_correctness():
    # Central differences run in 50-digit decimal arithmetic, so float64
    # roundoff in the oracle cannot mask or fake an error in the tape gradient.
    rng = np.random.default_rng(1)
    worst = worst_component = 0.0
    for _ in range(100):
        K = int(rng.integers(2, 8))
        tau = float(rng.uniform(0.05, 1.0))
        r = rng.standard_normal(K)
        p = Tensor(r, requires_grad=True)
        with GradTape() as tape:
            loss = softrank_loss_tensor(p, tau)
        (a,) = tape.gradient(loss, [p])
        n = np.array(decimal_softrank_grad(r, tau))
        worst = max(worst, float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n))))
        worst_component = max(worst_component, float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8))))

    hard_err = 0.0
    for _ in range(50):
        K = int(rng.integers(2, 8))
        r = rng.permutation(K) * 0.1 + rng.uniform(0, 0.01, K)
        expected = np.empty(K)
        expected[np.argsort(-r)] = np.arange(1, K + 1)
        hard_err = max(hard_err, float(np.abs(soft_ranks(pairwise_probs(r, 1e-4)) - expected).max()))

    equal_ok = True
    for K in range(2, 8):
        for c in (-3.0, 0.0, 2.5):
            hand = sum((1 + (K - 1) / 2 - i) ** 2 for i in range(1, K + 1)) / K
            equal_ok &= softrank_loss_value(np.full(K, c), 0.1) == hand

    ok = worst < 1e-5 and worst_component < 1e-5 and hard_err < 1e-3 and equal_ok
    record(1, ok, f"max grad rel err {worst:.2e} (componentwise, floor 1e-8: {worst_component:.1e}); "
                  f"hard-sort err {hard_err:.1e}; equal-score loss exact={equal_ok}")
    assert worst < 1e-5 and worst_component < 1e-5
    assert hard_err < 1e-3
    assert equal_ok


def test_criterion_2_rank_metric_oracles():
    mismatches = 0
    pairs = 0
    for n in range(2, 7):
        perms = [list(p) for p in itertools.permutations(range(n))]
        for p, q in itertools.product(perms, perms):
            pairs += 1
            mismatches += (spearman(p, q) != brute_spearman(p, q)) + (pearson(p, q) != brute_pearson(p, q)) \
                + (kendall_tau_b(p, q) != brute_kendall_b(p, q))
    record(2, mismatches == 0, f"{pairs} permutation pairs (n=2..6), {mismatches} mismatches")
    assert mismatches == 0


def test_criterion_3_cfg_identities(denoiser):
    rng = np.random.default_rng(3)
    exact = True
    field_err = 0.0
    for t in (1, 10, 25, 50):
        z = rng.standard_normal((4, 32, 32, 3))
        conds = [0, 3, 5, 7]
        eps_u, eps_c = predict_pair(denoiser, z, t, conds)
        exact &= np.array_equal(cfg_predict(denoiser, z, t, conds, 0.0), eps_u)
        exact &= np.array_equal(cfg_predict(denoiser, z, t, conds, 1.0), eps_c)
        for s in (2.0, 7.5, 15.0):
            scalar = cfg_predict(denoiser, z, t, conds, s)
            field = cfg_predict(denoiser, z, t, conds, np.full((4, 32, 32), s))
            field_err = max(field_err, float(np.abs(scalar - field).max()))
    ok = exact and field_err <= 1e-12
    record(3, ok, f"s=0/1 bit-exact={exact}; constant-field max diff {field_err:.1e}")
    assert exact
    assert field_err <= 1e-12


def test_criterion_4_scorer_discrimination(analytic, test_scores):
    (gtr, _, _), (gte, _, _) = analytic
    _, S = test_scores
    adj, ext = accuracies(S)
    rng = np.random.default_rng(4)
    draws = np.array([accuracies(rng.random(S.shape)) for _ in range(1000)])
    r_adj, r_ext = draws.mean(axis=0)
    ok = (gtr.shape[0] >= 400 and adj >= 0.95 and ext >= 0.95
          and abs(r_adj - 0.5) <= 0.03 and abs(r_ext - 0.5) <= 0.03)
    record(4, ok, f"train groups {gtr.shape[0]}, held-out {gte.shape[0]}: adjacent {adj:.4f}, ref-vs-lowest "
                  f"{ext:.4f}; random control {r_adj:.4f} / {r_ext:.4f} (mean of 1000 draws)")
    assert gtr.shape[0] >= 400
    assert adj >= 0.95 and ext >= 0.95
    assert abs(r_adj - 0.5) <= 0.03 and abs(r_ext - 0.5) <= 0.03


def test_criterion_5_scorer_correlation(test_scores):
    _, S = test_scores
    m = cli.group_metrics(S)
    ok = m["spearman"] >= 0.90 and m["kendall"] >= 0.75
    record(5, ok, f"pooled spearman {m['spearman']:.4f}, kendall {m['kendall']:.4f} "
                  f"(per-group means {m['spearman_group_mean']:.4f} / {m['kendall_group_mean']:.4f})")
    assert m["spearman"] >= 0.90
    assert m["kendall"] >= 0.75


def test_criterion_6_loss_ablation(tmp_path):
    # Near-threshold gains and few training groups, where the losses differ.
    manifest = build_dataset(BuildConfig(str(tmp_path), groups=ANALYTIC_GROUPS, seed=6,
                                         gains=(1.01, 1.02, 1.03, 1.04, 1.05, 1.06)))
    gtr, idtr, _ = load_manifest_groups(manifest, tmp_path, "train")
    gte, idte, _ = load_manifest_groups(manifest, tmp_path, "test")
    gtr, idtr = gtr[:48], idtr[:48]
    G, K = gte.shape[:2]
    flat, ids = gte.reshape((G * K,) + gte.shape[2:]), np.repeat(idte, K)
    rows = []
    for seed in (0, 1, 2):
        acc = {}
        for loss in ("softrank", "pairwise"):
            params, _ = train_scorer_arrays(gtr, idtr, TrainConfig(loss=loss, seed=seed))
            acc[loss] = accuracies(score_images(flat, ids, params).reshape(G, K))[0]
        rows.append((seed, acc["softrank"], acc["pairwise"]))
    ok = all(s > p for _, s, p in rows)
    record(6, ok, "adjacent-pair accuracy softrank vs pairwise: "
           + ", ".join(f"seed {sd} {s:.4f} vs {p:.4f}" for sd, s, p in rows))
    for _, s, p in rows:
        assert s > p


def test_criterion_7_saturation_drift(denoiser):
    scales = (1.0, 7.5, 15.0, 30.0)
    conds = [c for c in range(NUM_CONDS) for _ in range(SEEDS_PER_COND)]
    seeds = list(range(len(conds)))
    sat = np.array([[mean_saturation(img) for img in sample_batch(denoiser, conds, seeds, s)] for s in scales])
    monotone = float(np.mean(np.all(np.diff(sat, axis=0) >= 0, axis=0)))
    gap = float(sat[3].mean() - sat[1].mean())
    ok = monotone >= 0.70 and gap >= 0.02
    record(7, ok, f"{len(seeds)} (condition, seed) pairs, non-decreasing in {monotone:.3f}; "
                  f"means {' / '.join(f'{v:.3f}' for v in sat.mean(axis=1))}; s30 - s7.5 = {gap:.3f}")
    assert monotone >= 0.70
    assert gap >= 0.02


def test_criterion_8_refinement_effect(refine_grid):
    base, full = refine_grid["baseline"], refine_grid["full"]
    d_base = np.mean([r.delta_sat_after for r in base])
    d_full = np.mean([r.delta_sat_after for r in full])
    p_base = np.mean([r.palette_distance_after for r in base])
    p_full = np.mean([r.palette_distance_after for r in full])
    reduction = 1.0 - d_full / d_base
    degradation = p_full / p_base - 1.0

    rng = np.random.default_rng(8)
    bounds_ok = True
    for _ in range(20):
        s0, lam = float(rng.uniform(0.5, 30)), float(rng.uniform(0, 1))
        a = rng.random((2, 32, 32))
        for mode in MODES:
            f = mode_field(mode, s0, lam, 50, a)
            for k in range(51):
                v = f.at(k)
                bounds_ok &= bool(np.all(v >= s0 * (1 - lam)) and np.all(v <= s0))
    ok = len(base) > 0 and reduction >= 0.30 and degradation <= 0.05 and bounds_ok
    record(8, ok, f"{len(base)} jobs with pass-1 dSat >= {REFINE_SELECT}: dSat {d_base:.4f} -> {d_full:.4f} "
                  f"({reduction:.1%} lower); palette distance {degradation:+.2%}; field bounds {bounds_ok}")
    assert len(base) > 0
    assert reduction >= 0.30
    assert degradation <= 0.05
    assert bounds_ok


def test_criterion_9_ablation_ordering(refine_grid):
    d = {m: float(np.mean([r.delta_sat_after for r in refine_grid[m]])) for m in MODES}
    ok = d["full"] <= d["spatial_only"] < d["baseline"] <= d["temporal_only"]
    record(9, ok, "mean dSat " + ", ".join(f"{m} {v:.4f}" for m, v in d.items())
           + "; need full <= spatial_only < baseline <= temporal_only")
    assert d["full"] <= d["spatial_only"]
    assert d["spatial_only"] < d["baseline"]
    assert d["temporal_only"] >= d["baseline"]


def _pipeline(workdir: Path) -> None:
    common = ["--seed", "5", "--log-level", "WARNING"]
    steps = [
        ["build", "--out", "ana", "--groups", "12"],
        ["train", "scorer", "--manifest", "ana/manifest.json", "--out", "scorer.ckpt", "--epochs", "2"],
        ["train", "denoiser", "--out", "den.ckpt", "--references", "16", "--epochs", "2", "--hidden", "32",
         "--steps", "8"],
        ["build", "--out", "dif", "--mode", "diffusion", "--groups", "4", "--denoiser", "den.ckpt"],
        ["eval", "--manifest", "ana/manifest.json", "--scorer", "scorer.ckpt", "--out", "metrics.csv",
         "--levels-csv", "levels.csv", "--categories-csv", "categories.csv"],
        ["refine", "--denoiser", "den.ckpt", "--scorer", "scorer.ckpt", "--seeds", "1", "--conds", "0,3",
         "--out", "refine.csv"],
        ["report", "levels.csv", "categories.csv", "refine.summary.csv", "--out-dir", "charts"],
    ]
    for argv in steps:
        assert cli.main(argv + common) == 0, argv


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_reproducibility(tmp_path, monkeypatch):
    trees = []
    for name in ("a", "b"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        _pipeline(work)
        trees.append(_tree(work))
    a, b = trees
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = sorted({Path(k).suffix for k in a})
    ok = not differ and DatasetManifest.read(tmp_path / "a" / "dif" / "manifest.json").mode == "diffusion"
    record(10, ok, f"{len(a)} files ({', '.join(kinds)}) compared across two runs, {len(differ)} differ")
    assert not differ, differ[:10]

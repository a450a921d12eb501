"""End-to-end acceptance checks, one test per criterion, at the stated tolerances.

Criteria 5 and 6 are known to fail; see the decisions ledger for the analysis.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from pirm.envgen import EnvWeights, FeatureSpec, homogeneous_spec, sample_dataset
from pirm.graphdist import CommunityGraph, distance_matrix, graph_embedding, laplacian, overlap_matrix
from pirm.harness import (
    conditional_risk_run,
    gamma_check,
    ingest_tabular,
    lemma1_run,
    summarize_conditional,
    suppression_run,
    tabular_run,
)
from pirm.learn import TrainConfig, grad_objective, grad_penalty_closed_form, grad_penalty_empirical, objective
from pirm.oracle import exact_error_prob, normalized_error, ratio_bound_p

pytestmark = pytest.mark.acceptance

HOUSING_ENV = "PIRM_HOUSING_CSV"


def test_c01_identity_env_recovers_invariant_feature(criterion):
    start = time.perf_counter()
    runs = [lemma1_run(seed) for seed in range(5)]
    elapsed = time.perf_counter() - start
    worst_noninv = max(r["irm_max_noninvariant"] for r in runs)
    worst_inv = max(r["irm_invariant_error"] for r in runs)
    ok = worst_noninv < 0.05 and worst_inv < 0.05 and elapsed < 60 and all(len(r["env_weights"]) == 4 for r in runs)
    detail = f"max|phi_2,3|={worst_noninv:.4f} max|phi_1-1|={worst_inv:.4f} time={elapsed:.1f}s"
    assert criterion(1, "IRM recovers the invariant feature, 5 seeds", ok, detail)


def test_c02_closed_form_penalty(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        d = int(rng.integers(2, 6))
        phi = rng.normal(size=d)
        w = EnvWeights(rng.normal(size=d))
        ds = sample_dataset(w, 1_000_000, 0.0, seed=rng)
        closed = grad_penalty_closed_form(phi, w)
        emp = grad_penalty_empirical(phi, ds, "norm")
        worst = max(worst, abs(emp - closed) / (1 + closed))
    assert criterion(2, "empirical vs closed-form penalty, 50 pairs", worst < 0.02, f"max rel={worst:.4f}")


def test_c03_gradient_check(criterion):
    rng = np.random.default_rng(3)
    variants = ("erm", "irm", "pirm-part", "pirm-cond")
    worst = 0.0
    for i in range(100):
        variant = variants[i % 4]
        d = int(rng.integers(1, 6))
        envs = [sample_dataset(EnvWeights(rng.normal(size=d)), 60, 0.3, rng) for _ in range(4)]
        part = envs[:2]
        lam = float(rng.uniform(0.1, 10))
        form = "squared-norm" if i % 8 < 4 else "norm"
        risk, pen, lam = {
            "erm": (envs, envs, 0.0),
            "irm": (envs, envs, lam),
            "pirm-part": (part, part, lam),
            "pirm-cond": (envs, part, lam),
        }[variant]
        phi = rng.normal(size=d)
        h = 1e-5
        num = np.array([
            (objective(phi + h * e, risk, pen, lam, form) - objective(phi - h * e, risk, pen, lam, form)) / (2 * h)
            for e in np.eye(d)
        ])
        ana = grad_objective(phi, risk, pen, lam, form)
        worst = max(worst, np.linalg.norm(num - ana) / max(np.linalg.norm(ana), 1e-8))
    assert criterion(3, "analytic gradient vs central differences, 100 instances", worst < 1e-5, f"max rel={worst:.2e}")


def _brute(spec, delta, fi):
    ref = [s[0] for s in spec.sets]
    mass = 1.0 / math.prod(len(s) for s in spec.sets[1:])
    p1 = p2 = 0.0
    for combo in itertools.product(*spec.sets[1:]):
        w = (ref[0],) + combo
        dist = sum(a != b for a, b in zip(w, ref))
        if 1 <= dist <= delta:
            if w[fi] == ref[fi]:
                p1 += mass
            else:
                p2 += mass
    return p1, p2


def test_c04_theorem_bound_grid(criterion):
    start = time.perf_counter()
    ok = True
    min_margin = math.inf
    for c, delta, k, alpha in itertools.product([6, 12, 24], [1, 2], [2, 4], [2, 4]):
        spec = homogeneous_spec(c, k, alpha * k)
        p1, p2 = exact_error_prob(spec, delta, 1)
        p = ratio_bound_p(c, delta, alpha)
        ok &= p1 / p2 >= p and normalized_error(p1, p2) <= 1 / (p + 1)
        min_margin = min(min_margin, p1 / p2 / p)
    worst_dp = 0.0
    rng = np.random.default_rng(4)
    for c in range(3, 9):
        for _ in range(3):
            sets = [[1.0]] + [list(range(int(rng.integers(2, 4)))) for _ in range(c - 1)]
            spec = FeatureSpec(sets)
            for delta in range(1, c):
                for fi in range(1, c):
                    got, want = exact_error_prob(spec, delta, fi), _brute(spec, delta, fi)
                    worst_dp = max(worst_dp, abs(got[0] - want[0]), abs(got[1] - want[1]))
    elapsed = time.perf_counter() - start
    ok = ok and worst_dp < 1e-12 and elapsed < 10
    detail = f"min ratio/p={min_margin:.3f} dp err={worst_dp:.1e} time={elapsed:.2f}s"
    assert criterion(4, "exact error ratio bound on grid + DP vs enumeration", ok, detail)


@pytest.fixture(scope="module")
def gamma_result():
    spec = homogeneous_spec(10, k=2, set_size=4)
    ref = EnvWeights([s[0] for s in spec.sets], "ref")
    return gamma_check(spec, ref, delta=2, feature_index=1, d=10, r=5, epsilon=0.05, draws=100_000, trials=2000,
                       seed=5)


def test_c05_gamma_lower_bound(criterion, gamma_result):
    g = gamma_result
    ok = g["oracle_frequency"] >= g["gamma"] - 3 * g["oracle_frequency_se"]
    detail = f"gamma={g['gamma']:.4f} freq={g['oracle_frequency']:.5f} se={g['oracle_frequency_se']:.5f}"
    assert criterion(5, "gamma lower-bounds the oracle frequency", ok, detail)


def test_c06_partition_cardinality(criterion, gamma_result):
    g = gamma_result
    ok = g["cardinality_probability"] >= 0.95 - 3 * g["cardinality_se"]
    detail = f"t={g['required_envs']} m={g['m']} P={g['cardinality_probability']:.4f}"
    assert criterion(6, "partition reaches the required size", ok, detail)


def test_c07_feature_suppression(criterion):
    runs = [suppression_run(seed) for seed in range(3)]
    irm = [r["models"]["irm"]["ratio_block2"] for r in runs]
    pirm = [r["models"]["pirm-part"]["ratio_block2"] for r in runs]
    ok = max(irm) < 0.3 and min(pirm) > 0.7
    detail = "irm=" + ",".join(f"{x:.3f}" for x in irm) + " pirm=" + ",".join(f"{x:.3f}" for x in pirm)
    assert criterion(7, "IRM suppresses block 2, P-IRM keeps it (3 seeds)", ok, detail)


def test_c08_conditional_risk(criterion):
    summary = summarize_conditional([conditional_risk_run(seed) for seed in range(5)])
    detail = (f"gap={summary['mean_gap']:.3f}+-{summary['se']:.3f} target>={0.5 * summary['analytic_gap']:.2f} "
              "per seed=" + ",".join(f"{x:.2f}" for x in summary["per_seed_gap"]))
    assert criterion(8, "P-IRM lowers conditional risk by half the analytic gap", summary["pass"], detail)


def test_c09_housing_table(criterion):
    path = os.environ.get(HOUSING_ENV)
    if not path:
        criterion(9, "housing decade benchmark", None, f"dataset not supplied; set {HOUSING_ENV}")
        pytest.skip(f"housing CSV not supplied ({HOUSING_ENV})")
    envset = ingest_tabular(path, "YearBuilt", list(range(1910, 2011, 10)), "SalePrice", 1970, ["Id"])
    part = envset.labels_in_range(1930, 1970)
    rows = (("IRM", "irm", "full"), ("P-IRM (partitioned)", "pirm-part", "partition"))
    table = tabular_run(envset, [0, 1, 2], TrainConfig(), part, rows)
    irm, pp = table
    avg_pp, avg_irm = pp["avg_mse"]["mean"], irm["avg_mse"]["mean"]
    wg_pp, wg_irm = pp["worst_group_mse"]["mean"], irm["worst_group_mse"]["mean"]
    ok = abs(avg_pp - 0.427) <= 0.05 and avg_pp < avg_irm and wg_pp < wg_irm
    detail = f"P-IRM avg={avg_pp:.3f} wg={wg_pp:.3f}; IRM avg={avg_irm:.3f} wg={wg_irm:.3f}"
    assert criterion(9, "housing decade benchmark", ok, detail)


def _components(W):
    n = W.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(*np.nonzero(W)):
        if i != j:
            parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def test_c10_graph_module(criterion):
    rng = np.random.default_rng(10)
    lap_ok = True
    metric_ok = True
    for _ in range(100):
        n = int(rng.integers(2, 15))
        G = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < rng.uniform(0.05, 0.8))
        G = np.triu(G, 1)
        G = G + G.T + np.eye(n)
        g = CommunityGraph(tuple(range(n)), G)
        L = laplacian(g)
        vals = np.linalg.eigvalsh(L)
        lap_ok &= np.abs(L @ np.ones(n)).max() < 1e-12 and vals.min() >= -1e-10
        lap_ok &= int((vals < 1e-9).sum()) == _components(G)
        D = distance_matrix(graph_embedding(g, int(rng.integers(1, n + 1))))
        metric_ok &= (D >= 0).all() and np.allclose(np.diag(D), 0) and np.array_equal(D, D.T)
        metric_ok &= bool((D[:, None, :] <= D[:, :, None] + D[None, :, :] + 1e-9).all())

    overlap_ok = True
    for _ in range(50):
        comms = [set(rng.choice(30, size=int(rng.integers(1, 12)), replace=False).tolist()) for _ in range(6)]
        got = overlap_matrix(comms).G
        for i, j in itertools.product(range(6), repeat=2):
            want = len([x for x in comms[i] if x in comms[j]]) / min(len(comms[i]), len(comms[j]))
            overlap_ok &= got[i, j] == want
    ok = bool(lap_ok and metric_ok and overlap_ok)
    detail = f"laplacian={bool(lap_ok)} overlap={bool(overlap_ok)} pseudo-metric={bool(metric_ok)}"
    assert criterion(10, "graph Laplacian, overlap and distance properties", ok, detail)

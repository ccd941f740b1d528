"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The simulation criteria take minutes and carry the ``slow`` marker; they are
part of the default run.
"""

import os
import time

import numpy as np
import pytest

from rtnm.bootstrap import bootstrap_covariance
from rtnm.distance import DistanceMatrix
from rtnm.errors import Infeasible
from rtnm.estimate import AttVector, GtIndex, estimate_att
from rtnm.homogeneity import contrast_inverse, project_null, wald_statistic
from rtnm.matching import FullMatchProblem, MatchBounds, solve_full_match
from rtnm.nested import run_rtnm, verify_nested
from rtnm.simulate import DgpConfig, EffectMap, applied_scale_config, simulate
from rtnm.study import StudySettings, run_study

from helpers import run_pipeline
from oracles import bootstrap_variance_enumerated, brute_force_exact

REPS = 200


def test_c1_matching_matches_enumeration(verdict):
    rng = np.random.default_rng(20240601)
    sizes = [None, 2, 3, 4]
    checked, mismatches, infeasible = 0, [], 0
    feasible = 0
    start = time.perf_counter()
    while feasible < 120:
        n_t = int(rng.integers(1, 5))
        n_c = int(rng.integers(1, 10 - n_t))
        d = rng.uniform(0, 5, size=(n_t, n_c))
        if rng.random() < 0.3:
            d = np.round(d)  # exercise ties
        size = sizes[int(rng.integers(0, 4))]
        bounds = MatchBounds(max_stratum_size=size)
        a = int(min(n_c, np.inf if size is None else size - 1))
        b = int(min(n_t, np.inf if size is None else size - 1))
        expected = brute_force_exact(np.rint(d * 1e6).astype(np.int64), 1, a, b)
        dm = DistanceMatrix(tuple(range(n_t)), tuple(range(n_c)), d)
        try:
            got = solve_full_match(FullMatchProblem(dm, bounds), seed=checked).scaled_objective
        except Infeasible:
            got = None
        if expected is None:
            infeasible += 1
        else:
            feasible += 1
        if got != expected:
            mismatches.append((n_t, n_c, size, got, expected))
        checked += 1
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 10
    verdict(1, ok, f"{feasible} feasible and {infeasible} infeasible instances, {len(mismatches)} mismatches, {elapsed:.1f}s")
    assert not mismatches
    assert elapsed < 10


@pytest.mark.slow
def test_c2_nested_structure(verdict):
    rng = np.random.default_rng(7)
    failures = []
    sizes = rng.integers(300, 2001, size=50)
    for r, n in enumerate(sizes):
        data = simulate(DgpConfig(n_units=int(n), seed=1000 + r)).data
        bounds = MatchBounds(max_stratum_size=10) if r % 2 else MatchBounds()
        design = run_rtnm(data.without_outcomes(), [1, 2, 3, 4], bounds=bounds, seed=r)
        diag = verify_nested(design)
        if not diag.ok:
            failures.append((r, int(n), diag.summary()))
    verdict(2, not failures, f"50 panels with {sizes.min()}-{sizes.max()} units, {len(failures)} with violations")
    assert not failures


def test_c3_estimator_identity_and_injection(verdict):
    sim = simulate(DgpConfig(n_units=2000, seed=3))
    design = run_rtnm(sim.data.without_outcomes(), seed=3)
    gaps = []
    for adjust in ("none", "linear"):
        att = estimate_att(sim.data, design, adjust=adjust)
        gaps.append(np.abs(att.block_contributions.mean(axis=0) - att.values).max())
    base = estimate_att(sim.data, design)
    worst = 0.0
    for g, t in base.index:
        y = sim.data.outcomes.copy()
        y[sim.data.adoption == g, t - sim.data.t0] += 0.8
        moved = estimate_att(sim.data.with_outcomes(y), design)
        expected = base.values.copy()
        expected[base.index.position(g, t)] += 0.8
        worst = max(worst, np.abs(moved.values - expected).max())
    ok = max(gaps) <= 1e-10 and worst <= 1e-12
    verdict(3, ok, f"identity gap {max(gaps):.1e}, injection error {worst:.1e}")
    assert max(gaps) <= 1e-10
    assert worst <= 1e-12


@pytest.mark.slow
def test_c4_bias_reduction(verdict):
    config = DgpConfig(confounding=0.5, seed=4)
    adjusted = run_study(config, REPS, StudySettings(adjust="linear", B_cov=2, tests=False))
    plain = run_study(config, REPS, StudySettings(adjust="none", B_cov=2, tests=False))
    ratio = adjusted.bias_ratio()
    verdict(4, ratio <= 0.5, f"bias ratio {ratio:.3f} with regression adjustment "
                             f"(unadjusted contrast: {plain.bias_ratio():.3f}), {REPS} replicates")
    assert ratio <= 0.5


@pytest.fixture(scope="module")
def homogeneous_study():
    config = DgpConfig(effect=EffectMap("constant", 2.0), seed=5)
    return run_study(config, REPS, StudySettings(B_cov=1000, B_test=1000))


@pytest.mark.slow
def test_c5_bootstrap_coverage(verdict, homogeneous_study):
    cov = homogeneous_study.cells()["coverage"]
    ok = bool(cov.between(0.90, 0.99).all())
    verdict(5, ok, f"coverage {cov.min():.3f}-{cov.max():.3f} over 18 cells, {REPS} replicates, B=1000")
    assert ok


@pytest.mark.slow
def test_c6_size_and_power(verdict, homogeneous_study):
    size = homogeneous_study.rejection().set_index("hypothesis")["rejection_rate"]
    size_ok = bool(size.between(0.02, 0.10).all())

    effect = EffectMap("cohort", 2.0, {2: 0.4, 3: 0.8, 4: 1.2})
    varying = run_study(DgpConfig(effect=effect, seed=6), REPS, StudySettings(B_cov=500, B_test=500))
    spread = max(effect(g, 6) for g in range(1, 5)) - min(effect(g, 6) for g in range(1, 5))
    mean_se = varying.cells()["mean_se"].median()
    power = varying.rejection().set_index("hypothesis")["rejection_rate"]
    targeted = power[[h for h in power.index if h.startswith(("H0,t=", "H0,e="))]]
    power_ok = bool((targeted >= 0.5).all()) and spread >= 2 * mean_se
    verdict(6, size_ok and power_ok,
            f"size {size.min():.3f}-{size.max():.3f} over 10 hypotheses; power {targeted.min():.3f}-"
            f"{targeted.max():.3f} on time/lag families (spread {spread:.1f} = {spread / mean_se:.1f} SE)")
    assert size_ok
    assert power_ok


def test_c7_two_block_bootstrap_variance(verdict):
    exact = bootstrap_variance_enumerated([0.0, 2.0])
    rows = np.array([[0.0], [2.0]])
    att = AttVector(GtIndex(((1, 1),)), rows.mean(axis=0), rows)
    est = bootstrap_covariance(att, B=10_000, seed=0).sigma[0, 0]
    ok = exact == 0.5 and abs(est - exact) < 0.05
    verdict(7, ok, f"bootstrap variance {est:.4f} vs enumerated {exact}")
    assert ok


def test_c8_algebraic_checks(verdict):
    rng = np.random.default_rng(8)
    worst_proj, worst_scale = 0.0, 0.0
    for _ in range(200):
        K, q = int(rng.integers(2, 19)), None
        q = int(rng.integers(1, K))
        R = rng.normal(size=(q, K))
        R -= R.mean(axis=1, keepdims=True)
        if np.linalg.matrix_rank(R) < q:
            continue
        tau = rng.normal(size=K)
        L = rng.normal(size=(K, K))
        sigma = L @ L.T + 0.1 * np.eye(K)
        worst_proj = max(worst_proj, np.abs(R @ project_null(tau, R)).max())
        D = np.diag(rng.uniform(0.1, 10, size=q))
        w1 = wald_statistic(R @ tau, contrast_inverse(R, sigma)[0])
        w2 = wald_statistic(D @ R @ tau, contrast_inverse(D @ R, sigma)[0])
        worst_scale = max(worst_scale, abs(w1 - w2) / max(1.0, abs(w1)))
    R = np.array([[1.0, -1.0]])
    hand = wald_statistic(R @ np.array([1.0, 3.0]), contrast_inverse(R, np.eye(2))[0])
    ok = worst_proj <= 1e-10 and worst_scale <= 1e-10 and hand == 2.0
    verdict(8, ok, f"max |R tau0| {worst_proj:.1e}, rescaling drift {worst_scale:.1e}, hand W = {hand}")
    assert ok


@pytest.mark.slow
def test_c9_pipeline_is_byte_identical(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    a = run_pipeline(tmp_path / "a", n_units=2000, boot=1000)
    b = run_pipeline(tmp_path / "b", n_units=2000, boot=1000)
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    verdict(9, not differ, f"{len(a)} artifacts compared, differing: {differ or 'none'}")
    assert not differ


@pytest.mark.slow
def test_c10_scale_smoke(verdict):
    data = simulate(applied_scale_config(seed=10)).data
    start = time.perf_counter()
    design = run_rtnm(data.without_outcomes(), [1, 2, 3, 4], bounds=MatchBounds(max_stratum_size=10), seed=0)
    att = estimate_att(data, design)
    sigma = bootstrap_covariance(att, B=1000, seed=0, threads=os.cpu_count() or 1)
    elapsed = time.perf_counter() - start
    clean = verify_nested(design).ok
    ok = elapsed < 600 and clean and np.all(np.isfinite(sigma.se))
    verdict(10, ok, f"{data.n_units} units, match + estimate + B=1000 bootstrap in {elapsed:.1f}s")
    assert ok

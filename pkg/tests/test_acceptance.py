"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The Monte-Carlo studies behind the table criteria are computed once per
module and shared; their per-replication records also feed the global
descent-contract check.
"""

import math
import sys
import time

import numpy as np
import pytest
from scipy import linalg, stats

from mcapreg.components import ComponentSet, dfd
from mcapreg.data import HierarchicalDataset, UnitData
from mcapreg.estimator import FitConfig, solve_working_direction, update_gamma_i
from mcapreg.inference import profile_information
from mcapreg.likelihood import (
    direction_quadratic,
    grad_beta0i,
    grad_beta1,
    grad_beta2i,
    hess_beta0i,
    hess_beta1,
    hess_beta2i,
    neg_hlik,
)
from mcapreg.simulation import SimConfig, StudyConfig, run_study
from mcapreg.vmf import VmfParams, estimate_vmf, mean_resultant_ratio, sample_vmf

from conftest import FIXTURES, make_dataset, random_params
from test_likelihood import _with_beta0i, _with_beta1, _with_beta2i, central_diff, second_diff, transcribe_neg_hlik
from test_inference import _brute_force_profile


def banner(num, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] acceptance criterion {num}: {detail}", file=sys.__stdout__, flush=True)
    assert ok, detail


def _row(report, method):
    return next(r for r in report.table1_rows if r["method"] == method)


@pytest.fixture(scope="module")
def study_p5_small():
    study = StudyConfig(
        sim=SimConfig(p=5, m=20, n_mean=100, t_mean=100, seed=100, keep_observations=False),
        reps=100,
        fit=FitConfig(seed=101),
    )
    t0 = time.time()
    report = run_study(study)
    report.elapsed = time.time() - t0
    return report


@pytest.fixture(scope="module")
def study_p20():
    study = StudyConfig(
        sim=SimConfig(p=20, m=20, n_mean=100, t_mean=100, seed=200, keep_observations=False),
        reps=50,
        fit=FitConfig(seed=201),
        with_scap=True,
    )
    t0 = time.time()
    report = run_study(study)
    report.elapsed = time.time() - t0
    return report


@pytest.fixture(scope="module")
def study_p5_large():
    study = StudyConfig(
        sim=SimConfig(p=5, m=20, n_mean=500, t_mean=500, seed=300, keep_observations=False),
        reps=25,
        fit=FitConfig(seed=301),
    )
    t0 = time.time()
    report = run_study(study)
    report.elapsed = time.time() - t0
    return report


@pytest.fixture(scope="module")
def study_coverage():
    study = StudyConfig(
        sim=SimConfig(p=5, m=20, n_mean=500, t_mean=500, seed=400, keep_observations=False),
        reps=100,
        fit=FitConfig(seed=401),
        bootstrap_B=200,
        with_asymptotic=True,
    )
    t0 = time.time()
    report = run_study(study)
    report.elapsed = time.time() - t0
    return report


def test_criterion_01_table1_small_sample(study_p5_small):
    row = _row(study_p5_small, "MCAP")
    sim = row["gamma_similarity_mean"]
    bias = abs(row["beta11_bias"])
    mse2 = row["beta2_mse"]
    ok = sim >= 0.85 and bias <= 0.45 and mse2 <= 0.10
    banner(1, ok, f"p=5 n=T=100, 100 reps: gamma similarity {sim:.3f} (>=0.85), "
                  f"|bias(beta11)| {bias:.3f} (<=0.45), MSE(beta2) {mse2:.4f} (<=0.10), "
                  f"{study_p5_small.elapsed:.0f}s")


def test_criterion_02_table1_ordering(study_p20):
    mcap = _row(study_p20, "MCAP")
    scap = _row(study_p20, "SCAP")
    gap = mcap["gamma_similarity_mean"] - scap["gamma_similarity_mean"]
    bias_m = abs(mcap["beta11_bias"])
    bias_s = abs(scap["beta11_bias"])
    ok = gap >= 0.15 and bias_m <= 0.5 * bias_s
    banner(2, ok, f"p=20 n=T=100, 50 reps: similarity MCAP {mcap['gamma_similarity_mean']:.3f} vs "
                  f"SCAP {scap['gamma_similarity_mean']:.3f} (gap {gap:.3f} >= 0.15); "
                  f"|bias| MCAP {bias_m:.3f} vs SCAP {bias_s:.3f}, {study_p20.elapsed:.0f}s")


def test_criterion_03_table1_large_sample(study_p5_large):
    sim = _row(study_p5_large, "MCAP")["gamma_similarity_mean"]
    ok = sim >= 0.93
    banner(3, ok, f"p=5 n=T=500, 25 reps: gamma similarity {sim:.3f} (>=0.93), "
                  f"{study_p5_large.elapsed:.0f}s")


def test_criterion_04_bootstrap_coverage(study_coverage):
    cov = {(r["method"], r["param"]): r["coverage_pct"] for r in study_coverage.coverage_rows}
    boot = cov[("bootstrap", "beta1_1")]
    asym = cov[("asymptotic", "beta1_1")]
    ok = 85.0 <= boot <= 100.0
    banner(4, ok, f"p=5 n=T=500, B=200, 100 reps: bootstrap coverage(beta11) {boot:.1f}% "
                  f"(in [85, 100]); asymptotic {asym:.1f}% reported alongside, "
                  f"{study_coverage.elapsed:.0f}s")


def test_criterion_05_likelihood_oracle():
    worst = {"transcription": 0.0, "grad": 0.0, "hess": 0.0}
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        p = int(rng.integers(2, 6))
        q1 = int(rng.integers(1, 3))
        q2 = int(rng.integers(1, 3))
        m = int(rng.integers(2, 4))
        ds = make_dataset(rng, m=m, n=3, t=5, p=p, q1=q1, q2=q2)
        params = random_params(rng, m=m, p=p, q1=q1, q2=q2)
        value = neg_hlik(params, ds)
        oracle = transcribe_neg_hlik(params, ds)
        worst["transcription"] = max(worst["transcription"], abs(value - oracle) / max(1.0, abs(oracle)))
        i = int(rng.integers(0, m))

        f0 = lambda v: neg_hlik(_with_beta0i(params, i, v), ds)
        worst["grad"] = max(worst["grad"], abs(grad_beta0i(params, ds, i) - central_diff(f0, params.beta0i[i])))
        h = hess_beta0i(params, ds, i)
        worst["hess"] = max(worst["hess"], abs(h - second_diff(f0, params.beta0i[i])) / abs(h))

        g1 = grad_beta1(params, ds)
        h1 = hess_beta1(params, ds)
        for k in range(q1):
            def fk(v, k=k):
                vec = params.beta1.copy()
                vec[k] = v
                return neg_hlik(_with_beta1(params, vec), ds)
            worst["grad"] = max(worst["grad"], abs(g1[k] - central_diff(fk, params.beta1[k])))
            worst["hess"] = max(worst["hess"], abs(h1[k, k] - second_diff(fk, params.beta1[k])) / abs(h1[k, k]))

        g2 = grad_beta2i(params, ds, i)
        h2 = hess_beta2i(params, ds, i)
        for k in range(q2):
            def fk2(v, k=k):
                vec = params.beta2i[i].copy()
                vec[k] = v
                return neg_hlik(_with_beta2i(params, i, vec), ds)
            worst["grad"] = max(worst["grad"], abs(g2[k] - central_diff(fk2, params.beta2i[i, k])))
            worst["hess"] = max(worst["hess"], abs(h2[k, k] - second_diff(fk2, params.beta2i[i, k])) / abs(h2[k, k]))

    ok = worst["transcription"] < 1e-10 and worst["grad"] < 1e-6 and worst["hess"] < 1e-4
    banner(5, ok, f"50 instances: transcription {worst['transcription']:.1e} (<1e-10 rel), "
                  f"gradient-vs-FD {worst['grad']:.1e} (<1e-6 abs), hessian-vs-FD {worst['hess']:.1e} (<1e-4 rel)")


def _angle(u, v):
    # small angles via the orthogonal component; acos cannot resolve < 1.5e-8
    sign = 1.0 if float(u @ v) >= 0 else -1.0
    return float(np.linalg.norm(u - sign * v))


def test_criterion_06_direction_subproblem():
    # exact generalized eigenpair at kappa = 0, on pencils with a simple
    # (separated) smallest eigenvalue
    worst_angle = 0.0
    rng = np.random.default_rng(2000)
    for _ in range(10):
        qa, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        a = qa @ np.diag(np.sort(rng.uniform(0.2, 3.0, 5)) + np.arange(5) * 0.4) @ qa.T
        qh, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        h = qh @ np.diag(rng.uniform(0.5, 2.0, 5)) @ qh.T
        tilde, _ = solve_working_direction(a, h, 0.0, np.zeros(5))
        got = tilde / np.linalg.norm(tilde)
        _, vecs = linalg.eigh(a, h)
        ref = vecs[:, 0] / np.linalg.norm(vecs[:, 0])
        worst_angle = max(worst_angle, _angle(got, ref))
    for seed in range(3):
        rng2 = np.random.default_rng(2100 + seed)
        ds = make_dataset(rng2, m=2, n=4, t=40, p=4, scales=np.array([3.0, 1.4, 0.6, 0.15]))
        params = random_params(rng2, m=2, p=4, kappa=0.0)
        from mcapreg.data import compute_normalizers

        normalizers = compute_normalizers(ds)
        i = int(rng2.integers(0, 2))
        out = update_gamma_i(params, ds, i)
        a = direction_quadratic(params, ds, i)
        _, vecs = linalg.eigh(a, normalizers[i].matrix)
        ref = vecs[:, 0] / np.linalg.norm(vecs[:, 0])
        worst_angle = max(worst_angle, _angle(out.gammas[i], ref))

    # mesh brute force in the perturbative regime
    sobol = stats.qmc.Sobol(d=4, scramble=True, seed=61)
    z = stats.norm.ppf(np.clip(sobol.random(2**20), 1e-12, 1 - 1e-12))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    worst_gap = 0.0
    rng = np.random.default_rng(3000)
    for _ in range(5):
        q1m, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        a = q1m @ np.diag([0.3, 1.0, 1.7, 2.4]) @ q1m.T
        q2m, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        h = q2m @ np.diag(rng.uniform(0.8, 1.25, 4)) @ q2m.T
        g = rng.standard_normal(4)
        g /= np.linalg.norm(g)
        kappa = float(rng.uniform(0.005, 0.02))
        _, val = solve_working_direction(a, h, kappa, g)
        w, v = np.linalg.eigh(h)
        pts = z @ ((v / np.sqrt(w)) @ v.T)
        quad = np.einsum("np,pq,nq->n", pts, a, pts)
        lin = kappa * (pts @ g)
        mesh_val = float(min((quad - lin).min(), (quad + lin).min()))
        worst_gap = max(worst_gap, abs(val - mesh_val))

    ok = worst_angle < 1e-8 and worst_gap <= 1e-3
    banner(6, ok, f"kappa=0 eigenpair angle {worst_angle:.1e} (<1e-8 rad); "
                  f"kappa>0 mesh gap {worst_gap:.1e} (<=1e-3, 2^20-point mesh, p=4)")


def test_criterion_07_dfd_exactness():
    # common diagonalizer
    clusters = []
    rng = np.random.default_rng(7)
    for i in range(3):
        units = [UnitData(i, j, x1=[0.0], x2=[0.0],
                          sample_cov=np.diag(rng.uniform(0.5, 3.0, 4)), n_samples=int(rng.integers(2, 9)))
                 for j in range(3)]
        clusters.append(units)
    ds = HierarchicalDataset(clusters)
    comp = ComponentSet(projections=[np.eye(4)[:, :3].copy() for _ in range(3)])
    diag_err = abs(dfd(ds, comp, 3) - 1.0)

    s = np.array([[1.0, 0.6], [0.6, 1.0]])
    unit = UnitData(0, 0, x1=[0.0], x2=[0.0], sample_cov=s, n_samples=4)
    hand = dfd(HierarchicalDataset([[unit]]), ComponentSet(projections=[np.eye(2)]), 2)

    floor_ok = True
    worst_floor = 1.0
    for seed in range(1000):
        r = np.random.default_rng(10_000 + seed)
        p = int(r.integers(2, 6))
        k = int(r.integers(1, p + 1))
        a = r.standard_normal((p + 2, p))
        cov = a.T @ a / (p + 2)
        gamma, _ = np.linalg.qr(r.standard_normal((p, k)))
        u = UnitData(0, 0, x1=[0.0], x2=[0.0], sample_cov=cov, n_samples=int(r.integers(1, 7)))
        val = dfd(HierarchicalDataset([[u]]), ComponentSet(projections=[gamma]), k)
        worst_floor = min(worst_floor, val)
        floor_ok &= val >= 1.0 - 1e-10

    ok = diag_err <= 1e-10 and hand == pytest.approx(1.5625, rel=1e-12) and floor_ok
    banner(7, ok, f"common-diagonalizer |DfD-1| {diag_err:.1e} (<=1e-10); hand 2x2 {hand!r} "
                  f"(=1.5625); min over 1000 random fixtures {worst_floor:.12f} (>=1-1e-10)")


def test_criterion_08_descent_contract(study_p5_small, study_p20, study_p5_large, study_coverage):
    records = (study_p5_small.records + study_p20.records
               + study_p5_large.records + study_coverage.records)
    violations = sum(not r.trace_monotone for r in records)
    ok = violations == 0
    banner(8, ok, f"objective trace non-increasing on every fit: {violations} violations "
                  f"across {len(records)} simulation fits")


def test_criterion_09_vmf_round_trip():
    worst = 0.0
    for p in range(2, 101):
        for kappa in (1e-3, 1.0, 10.0, 100.0):
            rbar = mean_resultant_ratio(p, kappa)
            c = rbar
            s = math.sqrt(1.0 - c * c)
            d = np.zeros((2, p))
            d[0, 0] = c
            d[0, 1] = s
            d[1, 0] = c
            d[1, 1] = -s
            est = estimate_vmf(d, exact=True)
            worst = max(worst, abs(mean_resultant_ratio(p, est.concentration) - rbar))

    mu = np.zeros(5)
    mu[3] = 1.0
    draws = sample_vmf(VmfParams(mu, 20.0), 2000, np.random.default_rng(90))
    est = estimate_vmf(draws, exact=True)
    angle = math.acos(min(1.0, abs(float(est.mean_direction @ mu))))
    kappa_err = abs(est.concentration - 20.0) / 20.0
    ok = worst < 1e-8 and angle <= 0.1 and kappa_err <= 0.1
    banner(9, ok, f"A_p inversion residual {worst:.1e} (<1e-8) over p in [2,100]; "
                  f"recovery at kappa=20, 2000 draws: angle {angle:.3f} rad (<=0.1), "
                  f"kappa error {100 * kappa_err:.1f}% (<=10%)")


def test_criterion_10_profile_information():
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(5):
        ds = make_dataset(rng, m=3, n=4, t=6, p=3, q1=2, q2=2)
        params = random_params(rng, m=3, p=3, q1=2, q2=2)
        info = profile_information(ds, params)
        oracle = _brute_force_profile(ds, params)
        worst = max(worst, float(np.abs(info.j_n - oracle).max()))

    # limit (a): within-cluster-centered fixed covariates
    clusters = []
    for i in range(3):
        units = [UnitData(i, j, x1=[x], x2=np.zeros(0), sample_cov=np.eye(2), n_samples=6)
                 for j, x in enumerate([1.0, -0.5, -0.5])]
        clusters.append(units)
    ds_a = HierarchicalDataset(clusters)
    params_a = random_params(rng, m=3, p=2, q1=1, q2=0)
    info_a = profile_information(ds_a, params_a)
    err_a = float(np.abs(info_a.j_n - info_a.h11).max())

    # limit (b): cluster-constant covariates, q2=0, T large
    xbars = np.array([[1.0, 0.5], [-0.3, 1.2], [0.7, -0.9]])
    clusters = []
    for i in range(3):
        units = [UnitData(i, j, x1=xbars[i], x2=np.zeros(0), sample_cov=np.eye(2), n_samples=10_000)
                 for j in range(2)]
        clusters.append(units)
    ds_b = HierarchicalDataset(clusters)
    params_b = random_params(rng, m=3, p=2, q1=2, q2=0)
    info_b = profile_information(ds_b, params_b)
    target = 3.0 * sum(np.outer(x, x) for x in xbars) / 3.0 / params_b.sigma2
    err_b = float(np.abs(info_b.j_n - target).max() / np.abs(target).max())

    ok = worst < 1e-10 and err_a < 1e-12 and err_b < 0.01
    banner(10, ok, f"Schur oracle {worst:.1e} (<1e-10); centered-covariate limit {err_a:.1e}; "
                   f"cluster-constant limit at T=1e4 within {100 * err_b:.2f}% (<1%)")


def test_criterion_11_cli_determinism(tmp_path):
    import mcapreg.cli as cli

    base = ["--obs", f"{FIXTURES}/toy_obs.csv", "--cov", f"{FIXTURES}/toy_cov.csv",
            "--seed", "5", "--starts", "3"]
    outs = []
    for name, extra in [("f1", []), ("f2", []), ("f3", ["--threads", "4"])]:
        out = tmp_path / name
        assert cli.main(["fit", *base, "--out", str(out), *extra]) == 0
        outs.append(out)
    fit_ok = all(
        (outs[0] / f).read_bytes() == (o / f).read_bytes()
        for o in outs[1:]
        for f in ("params.json", "trace.csv", "summary.txt")
    )
    sims = []
    for name, extra in [("s1", []), ("s2", ["--threads", "3"])]:
        out = tmp_path / name
        args = ["simulate", "--out", str(out), "--m", "4", "--n-mean", "10", "--t-mean", "15",
                "--reps", "2", "--seed", "9", "--starts", "2", "--scap", "--B", "5", "--asymptotic"]
        assert cli.main(args + extra) == 0
        sims.append(out)
    sim_ok = all(
        (sims[0] / f).read_bytes() == (sims[1] / f).read_bytes()
        for f in ("table1.csv", "coverage.csv", "similarity_detail.csv", "truth.json")
    )
    ok = fit_ok and sim_ok
    banner(11, ok, f"byte-identical reruns across thread counts: fit {fit_ok}, simulate {sim_ok}")

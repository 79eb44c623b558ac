import numpy as np
import pytest
from scipy import optimize

import mcapreg.inference as inference
from mcapreg.data import HierarchicalDataset, UnitData
from mcapreg.errors import EstimatorError, InferenceError
from mcapreg.estimator import FitConfig, fit
from mcapreg.inference import (
    asymptotic_ci,
    bootstrap,
    commutation_matrix,
    profile_information,
    reduced_fit,
)
from mcapreg.simulation import SimConfig, generate

from conftest import make_dataset, random_params


def _fitted(ds, seed=3):
    return fit(ds, FitConfig(n_starts=3, max_iters=150, seed=seed))


class TestReducedFit:
    def test_no_covariate_scalar_oracle(self, rng):
        ds = make_dataset(rng, m=3, n=5, t=40, p=3, q1=0, q2=0)
        gammas = np.tile(np.array([0.0, 1.0, 0.0]), (3, 1))
        rf = reduced_fit(ds, gammas, config=FitConfig(rel_tol=1e-13, max_iters=2000))
        pk = ds.packed
        s = np.einsum("npq,np,nq->n", pk.S, gammas[pk.cl], gammas[pk.cl])
        for i in range(3):
            sl = slice(int(pk.starts[i]), int(pk.starts[i + 1]))

            def score(b, sl=sl):
                return float(np.sum(0.5 * pk.T[sl] * (1.0 - s[sl] * np.exp(-b)))) + (b - rf.beta0) / rf.sigma2

            root = optimize.brentq(score, -20.0, 20.0, xtol=1e-13)
            assert rf.beta0i[i] == pytest.approx(root, abs=1e-7)

    def test_degenerate_design_raises(self, rng):
        clusters = []
        for i in range(2):
            units = [
                UnitData(i, j, x1=np.zeros(1), x2=np.zeros(0), sample_cov=np.eye(2), n_samples=4)
                for j in range(3)
            ]
            clusters.append(units)
        ds = HierarchicalDataset(clusters)
        gammas = np.tile(np.array([1.0, 0.0]), (2, 1))
        with pytest.raises(EstimatorError, match="rank-deficient"):
            reduced_fit(ds, gammas, config=FitConfig(max_iters=20))

    def test_objective_trace_non_increasing(self, rng):
        ds = make_dataset(rng, m=3, n=4, t=20, p=3)
        gammas = np.tile(np.array([1.0, 0.0, 0.0]), (3, 1))
        rf = reduced_fit(ds, gammas)
        assert np.all(np.diff(rf.objective_trace) <= 0)

    def test_wrong_gamma_count(self, rng):
        ds = make_dataset(rng, m=3, n=2, t=10, p=3)
        with pytest.raises(InferenceError):
            reduced_fit(ds, np.eye(3)[:2])


class TestBootstrap:
    @pytest.fixture(scope="class")
    def fitted_ds(self):
        sim = SimConfig(m=6, n_mean=25, t_mean=30, noise_sd=0.3, seed=9, keep_observations=False)
        ds, _ = generate(sim)
        return ds, _fitted(ds)

    def test_single_replicate_degenerate(self, fitted_ds):
        ds, result = fitted_ds
        with pytest.warns(UserWarning, match="degenerate"):
            boot = bootstrap(ds, result, B=1, seed=0)
        assert np.all(boot.se == 0.0)
        assert boot.degenerate

    def test_deterministic_replicates(self, fitted_ds):
        ds, result = fitted_ds
        a = bootstrap(ds, result, B=12, seed=5)
        b = bootstrap(ds, result, B=12, seed=5)
        c = bootstrap(ds, result, B=12, seed=5, threads=3)
        np.testing.assert_array_equal(a.replicates, b.replicates)
        np.testing.assert_array_equal(a.replicates, c.replicates)
        d = bootstrap(ds, result, B=12, seed=6)
        assert not np.array_equal(a.replicates, d.replicates)

    def test_ci_ordering_and_se(self, fitted_ds):
        ds, result = fitted_ds
        boot = bootstrap(ds, result, B=25, seed=1)
        assert np.all(boot.ci[:, 0] <= boot.ci[:, 1])
        assert np.all(boot.se >= 0)
        assert boot.replicates.shape == (25, 1 + ds.q1 + ds.q2)

    def test_resampling_preserves_hierarchy(self, fitted_ds, monkeypatch):
        ds, result = fitted_ds
        captured = []
        original = inference._run_reduced

        def spy(s, T, X1, X2, starts, config):
            captured.append((s.copy(), starts.copy()))
            return original(s, T, X1, X2, starts, config)

        monkeypatch.setattr(inference, "_run_reduced", spy)
        bootstrap(ds, result, B=4, seed=2)
        pk = ds.packed
        from mcapreg.estimator import _proj_var_flat

        src = _proj_var_flat(pk.S, pk.cl, result.params.gammas)
        src_clusters = [
            set(src[int(a):int(b)].tolist()) for a, b in zip(pk.starts[:-1], pk.starts[1:])
        ]
        sizes = {len(c) for c in map(lambda ab: range(int(ab[0]), int(ab[1])), zip(pk.starts[:-1], pk.starts[1:]))}
        for s_rep, starts in captured:
            assert len(starts) - 1 == ds.n_clusters
            for a, b in zip(starts[:-1], starts[1:]):
                values = set(s_rep[int(a):int(b)].tolist())
                # every resampled cluster's values come from a single source cluster
                assert any(values <= cluster for cluster in src_clusters)

    def test_failure_rate_aborts(self, fitted_ds, monkeypatch):
        ds, result = fitted_ds
        calls = {"n": 0}
        original = inference._run_reduced

        def flaky(s, T, X1, X2, starts, config):
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                raise EstimatorError("synthetic failure")
            return original(s, T, X1, X2, starts, config)

        monkeypatch.setattr(inference, "_run_reduced", flaky)
        with pytest.raises(InferenceError, match="replicates failed"):
            bootstrap(ds, result, B=10, seed=3)


def _brute_force_profile(ds, params):
    # independent loop-based assembly plus a full-matrix Schur complement
    q1, q2 = ds.q1, ds.q2
    m = ds.n_clusters
    h11 = np.zeros((q1, q1))
    c_blocks, d_blocks = [], []
    for cluster in ds.clusters:
        c_i = np.zeros((q1, 1 + q2))
        d_i = np.zeros((1 + q2, 1 + q2))
        for u in cluster:
            z = np.concatenate([[1.0], u.x2])
            h11 += u.n_samples / 2.0 * np.outer(u.x1, u.x1)
            c_i += u.n_samples / 2.0 * np.outer(u.x1, z)
            d_i += u.n_samples / 2.0 * np.outer(z, z)
        d_i[0, 0] += 1.0 / params.sigma2
        if q2:
            d_i[1:, 1:] += np.linalg.inv(params.omega)
        c_blocks.append(c_i)
        d_blocks.append(d_i)
    k = 1 + q2
    big = np.zeros((q1 + m * k, q1 + m * k))
    big[:q1, :q1] = h11
    for i in range(m):
        sl = slice(q1 + i * k, q1 + (i + 1) * k)
        big[:q1, sl] = c_blocks[i]
        big[sl, :q1] = c_blocks[i].T
        big[sl, sl] = d_blocks[i]
    lower = big[q1:, q1:]
    cross = big[:q1, q1:]
    return h11 - cross @ np.linalg.inv(lower) @ cross.T


class TestProfileInformation:
    def test_brute_force_schur_oracle(self, rng):
        ds = make_dataset(rng, m=3, n=4, t=6, p=3, q1=2, q2=2)
        params = random_params(rng, m=3, p=3, q1=2, q2=2)
        info = profile_information(ds, params)
        expected = _brute_force_profile(ds, params)
        assert np.abs(info.j_n - expected).max() < 1e-10

    def test_centered_covariates_drop_cross_block(self, rng):
        clusters = []
        for i in range(3):
            units = []
            x1s = np.array([1.0, -0.5, -0.5])  # weighted sum zero with equal T
            for j in range(3):
                units.append(UnitData(i, j, x1=[x1s[j]], x2=np.zeros(0), sample_cov=np.eye(2), n_samples=8))
            clusters.append(units)
        ds = HierarchicalDataset(clusters)
        params = random_params(rng, m=3, p=2, q1=1, q2=0)
        info = profile_information(ds, params)
        assert np.abs(info.c_blocks).max() == 0.0
        np.testing.assert_allclose(info.j_n, info.h11, atol=1e-12)

    def test_cluster_constant_limit(self, rng):
        # constant x1 per cluster, q2 = 0, huge T: J approaches m * Q_B / sigma2
        t = 10_000
        xbars = np.array([[1.0, 0.5], [-0.3, 1.2], [0.7, -0.9]])
        clusters = []
        for i in range(3):
            units = [UnitData(i, j, x1=xbars[i], x2=np.zeros(0), sample_cov=np.eye(2), n_samples=t)
                     for j in range(2)]
            clusters.append(units)
        ds = HierarchicalDataset(clusters)
        params = random_params(rng, m=3, p=2, q1=2, q2=0)
        info = profile_information(ds, params)
        q_b = sum(np.outer(x, x) for x in xbars) / 3.0
        expected = 3.0 * q_b / params.sigma2
        assert np.abs(info.j_n - expected).max() < 0.01 * np.abs(expected).max()

    def test_psd_ordering(self, rng):
        ds = make_dataset(rng, m=4, n=3, t=7, p=3, q1=2, q2=1)
        params = random_params(rng, m=4, p=3, q1=2, q2=1)
        info = profile_information(ds, params)
        assert np.linalg.eigvalsh(info.h11 - info.j_n)[0] >= -1e-10
        assert np.linalg.eigvalsh(info.j_n)[0] > 0


class TestAsymptotic:
    def test_commutation_identity(self, rng):
        for q in (1, 2, 3):
            k = commutation_matrix(q)
            m = rng.standard_normal((q, q))
            np.testing.assert_array_equal(k @ m.flatten(order="F"), m.T.flatten(order="F"))

    def test_interval_shapes_and_ordering(self, rng):
        ds = make_dataset(rng, m=4, n=4, t=10, p=3, q1=2, q2=1)
        params = random_params(rng, m=4, p=3, q1=2, q2=1)
        out = asymptotic_ci(ds, params, alpha=0.05)
        assert out.beta1.shape == (2, 2)
        assert np.all(out.beta1[:, 0] <= out.beta1[:, 1])
        assert out.beta0[0] <= params.beta0 <= out.beta0[1]
        assert out.omega_vec.shape == (1, 2)
        assert out.j_pd

    def test_non_pd_information_flagged(self, rng):
        # an all-zero fixed covariate collapses the Schur complement exactly
        clusters = []
        for i in range(2):
            units = [UnitData(i, j, x1=[0.0], x2=np.zeros(0), sample_cov=np.eye(2), n_samples=5)
                     for j in range(2)]
            clusters.append(units)
        ds = HierarchicalDataset(clusters)
        params = random_params(rng, m=2, p=2, q1=1, q2=0)
        with pytest.warns(UserWarning, match="pseudo-inverse"):
            out = asymptotic_ci(ds, params)
        assert not out.j_pd

    def test_monte_carlo_variance_oracle(self):
        # reduced-model simulation at the projected level: the empirical
        # variance of the fixed-effect estimate tracks the inverse profile
        # information
        rng = np.random.default_rng(2)
        m, n, t = 50, 200, 200
        q1, q2 = 2, 1
        sigma_true, omega_true = 0.1, 0.1
        beta1_true = np.array([-1.0, 0.5])
        beta2_true = np.array([0.5])
        x1 = np.stack([rng.integers(0, 2, m * n).astype(float), rng.normal(0, 0.5, m * n)], axis=1)
        x2 = rng.normal(0, 0.5, (m * n, q2))
        cl = np.repeat(np.arange(m), n)
        starts = np.arange(0, m * n + 1, n)
        tvec = np.full(m * n, float(t))
        estimates = []
        for _ in range(500):
            eps = rng.normal(0, sigma_true, m)
            theta = rng.normal(0, omega_true, (m, q2))
            mu = -2.0 + eps[cl] + x1 @ beta1_true + np.einsum("nq,nq->n", x2, beta2_true + theta[cl])
            s = np.exp(mu) * rng.chisquare(t, m * n) / t
            rf = inference._run_reduced(s, tvec, x1, x2, starts, FitConfig(rel_tol=1e-10, max_iters=500))
            estimates.append(rf.beta1)
        estimates = np.array(estimates)
        # profile information at the true parameters on the fixed design
        units = []
        clusters = []
        for i in range(m):
            cluster = [UnitData(i, j, x1=x1[i * n + j], x2=x2[i * n + j], sample_cov=np.eye(2), n_samples=t)
                       for j in range(n)]
            clusters.append(cluster)
        ds = HierarchicalDataset(clusters)
        params = random_params(np.random.default_rng(0), m=m, p=2, q1=q1, q2=q2)
        params.sigma2 = sigma_true**2
        params.omega = np.eye(q2) * omega_true**2
        info = profile_information(ds, params)
        target = np.diag(np.linalg.inv(info.j_n))
        np.testing.assert_allclose(estimates.var(axis=0, ddof=1), target, rtol=0.15)

"""Uncertainty quantification for the regression parameters.

Two routes are provided: a two-stage by-cluster bootstrap that holds the
fitted directions and projected variances fixed and refits only the
regression sub-problem on each resample, and normal-theory intervals based
on the profile information matrix of the reduced model.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import HierarchicalDataset
from .errors import EstimatorError, InferenceError
from .estimator import FitConfig, FitResult, _Engine, _proj_var_flat
from .likelihood import MCAPParams
from .vmf import VmfParams

__all__ = [
    "ReducedFit",
    "BootstrapResult",
    "ProfileInformation",
    "AsymptoticIntervals",
    "reduced_fit",
    "bootstrap",
    "profile_information",
    "asymptotic_ci",
    "commutation_matrix",
]


@dataclass
class ReducedFit:
    """Regression estimates with the directions held fixed."""

    beta0: float
    beta1: np.ndarray
    beta2: np.ndarray
    sigma2: float
    omega: np.ndarray
    beta0i: np.ndarray
    beta2i: np.ndarray
    objective: float
    objective_trace: list[float]
    converged: bool


def _run_reduced(s, T, X1, X2, starts, config: FitConfig) -> ReducedFit:
    eng = _Engine(
        S=None,
        T=T,
        X1=X1,
        X2=X2,
        starts=starts,
        config=config,
        update_directions=False,
        vmf_mode="off",
    )
    eng.init_state(gam=None, s=s)
    trace, converged = eng.run()
    return ReducedFit(
        beta0=eng.b0,
        beta1=eng.b1.copy(),
        beta2=eng.b2.copy(),
        sigma2=eng.sig2,
        omega=eng.omega.copy(),
        beta0i=eng.b0i.copy(),
        beta2i=eng.b2i.copy(),
        objective=trace[-1],
        objective_trace=trace,
        converged=converged,
    )


def reduced_fit(dataset: HierarchicalDataset, fixed_gammas: np.ndarray,
                fixed_vmf: VmfParams | None = None, config: FitConfig | None = None) -> ReducedFit:
    """Minimize the hierarchical likelihood over the regression blocks only.

    ``fixed_gammas`` supplies one direction per cluster; the directional
    prior is a constant under fixed (gammas, vmf) and is omitted from the
    reported objective.
    """
    del fixed_vmf  # constant under fixed directions; kept in the signature for clarity
    config = config or FitConfig()
    pk = dataset.packed
    gammas = np.atleast_2d(np.asarray(fixed_gammas, dtype=float))
    if gammas.shape[0] != dataset.n_clusters:
        raise InferenceError("need exactly one fixed direction per cluster")
    s = _proj_var_flat(pk.S, pk.cl, gammas)
    return _run_reduced(s, pk.T, pk.X1, pk.X2, pk.starts, config)


@dataclass
class BootstrapResult:
    """By-cluster bootstrap draws and the intervals derived from them."""

    replicates: np.ndarray  # (B_kept, 1 + q1 + q2) columns: beta0, beta1.., beta2..
    sigma2_reps: np.ndarray
    omega_reps: np.ndarray
    param_names: list[str]
    estimates: np.ndarray
    se: np.ndarray
    ci: np.ndarray  # percentile, (n_params, 2)
    ci_normal: np.ndarray
    sigma2_se: float
    sigma2_ci: tuple[float, float]
    omega_se: np.ndarray
    omega_ci: np.ndarray
    B: int
    alpha: float
    seed: object
    n_dropped: int
    degenerate: bool = field(default=False)


def _bootstrap_replicate(seed_seq, s_list, t_list, x1_list, x2_list, config):
    rng = np.random.default_rng(seed_seq)
    m = len(s_list)
    cluster_idx = rng.integers(0, m, size=m)
    s_parts, t_parts, x1_parts, x2_parts, sizes = [], [], [], [], []
    for src in cluster_idx:
        n_src = s_list[src].shape[0]
        take = rng.integers(0, n_src, size=n_src)
        s_parts.append(s_list[src][take])
        t_parts.append(t_list[src][take])
        x1_parts.append(x1_list[src][take])
        x2_parts.append(x2_list[src][take])
        sizes.append(n_src)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    rf = _run_reduced(
        np.concatenate(s_parts),
        np.concatenate(t_parts),
        np.concatenate(x1_parts),
        np.concatenate(x2_parts),
        starts,
        config,
    )
    return rf


def bootstrap(dataset: HierarchicalDataset, fit_result: FitResult, B: int = 500,
              alpha: float = 0.05, seed=0, config: FitConfig | None = None,
              threads: int = 1) -> BootstrapResult:
    """Two-stage bootstrap: resample clusters with replacement, then units
    within each resampled cluster, and refit the reduced model.

    The full-data directions and projected variances are held fixed
    throughout. Replicates whose reduced fit fails numerically are dropped;
    more than 10% drops aborts.
    """
    if B < 1:
        raise InferenceError("B must be >= 1")
    config = config or FitConfig()
    pk = dataset.packed
    params = fit_result.params
    s = _proj_var_flat(pk.S, pk.cl, params.gammas)
    bounds = [slice(int(a), int(b)) for a, b in zip(pk.starts[:-1], pk.starts[1:])]
    s_list = [s[sl] for sl in bounds]
    t_list = [pk.T[sl] for sl in bounds]
    x1_list = [pk.X1[sl] for sl in bounds]
    x2_list = [pk.X2[sl] for sl in bounds]

    children = np.random.SeedSequence(seed).spawn(B)

    def one(b):
        try:
            return _bootstrap_replicate(children[b], s_list, t_list, x1_list, x2_list, config)
        except EstimatorError as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, range(B)))
    else:
        outcomes = [one(b) for b in range(B)]

    rows, sig_rows, om_rows = [], [], []
    n_dropped = 0
    for out in outcomes:
        if isinstance(out, EstimatorError):
            n_dropped += 1
            continue
        rows.append(np.concatenate([[out.beta0], out.beta1, out.beta2]))
        sig_rows.append(out.sigma2)
        om_rows.append(out.omega)
    if n_dropped > 0.1 * B:
        raise InferenceError(f"{n_dropped}/{B} bootstrap replicates failed")

    reps = np.array(rows)
    sig_reps = np.array(sig_rows)
    om_reps = np.array(om_rows)
    q1, q2 = dataset.q1, dataset.q2
    names = ["beta0"] + [f"beta1_{k + 1}" for k in range(q1)] + [f"beta2_{k + 1}" for k in range(q2)]
    estimates = np.concatenate([[params.beta0], params.beta1, params.beta2])

    degenerate = reps.shape[0] < 2
    if degenerate:
        warnings.warn("single bootstrap replicate: standard errors are degenerate", stacklevel=2)
        se = np.zeros(reps.shape[1])
        sigma2_se = 0.0
        omega_se = np.zeros((q2, q2))
    else:
        se = reps.std(axis=0, ddof=1)
        sigma2_se = float(sig_reps.std(ddof=1))
        omega_se = om_reps.std(axis=0, ddof=1)

    lo, hi = 100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)
    ci = np.percentile(reps, [lo, hi], axis=0).T
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    ci_normal = np.stack([estimates - z * se, estimates + z * se], axis=1)
    sigma2_ci = tuple(np.percentile(sig_reps, [lo, hi]))
    omega_ci = np.percentile(om_reps, [lo, hi], axis=0) if q2 else np.zeros((2, 0, 0))

    return BootstrapResult(
        replicates=reps,
        sigma2_reps=sig_reps,
        omega_reps=om_reps,
        param_names=names,
        estimates=estimates,
        se=se,
        ci=ci,
        ci_normal=ci_normal,
        sigma2_se=sigma2_se,
        sigma2_ci=sigma2_ci,
        omega_se=omega_se,
        omega_ci=omega_ci,
        B=B,
        alpha=alpha,
        seed=seed,
        n_dropped=n_dropped,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Profile information and asymptotic intervals
# ---------------------------------------------------------------------------


@dataclass
class ProfileInformation:
    """Schur complement of the fixed-effect block of the joint Hessian."""

    j_n: np.ndarray  # (q1, q1)
    h11: np.ndarray
    c_blocks: np.ndarray  # (m, q1, 1 + q2)
    d_blocks: np.ndarray  # (m, 1 + q2, 1 + q2)


def profile_information(dataset: HierarchicalDataset, params: MCAPParams) -> ProfileInformation:
    """Assemble H11, the cross blocks C_i, the cluster blocks D_i, and the
    profile information J_n = H11 - sum_i C_i D_i^{-1} C_i'."""
    if params.sigma2 <= 0:
        raise InferenceError("sigma2 must be positive")
    pk = dataset.packed
    q1, q2 = dataset.q1, dataset.q2
    half_t = 0.5 * pk.T
    h11 = (pk.X1 * half_t[:, None]).T @ pk.X1
    z = np.concatenate([np.ones((pk.T.shape[0], 1)), pk.X2], axis=1)
    m = dataset.n_clusters
    c_blocks = np.empty((m, q1, 1 + q2))
    d_blocks = np.empty((m, 1 + q2, 1 + q2))
    if q2:
        try:
            omega_inv = np.linalg.inv(params.omega)
        except np.linalg.LinAlgError:
            raise InferenceError("random-slope covariance is singular") from None
    for i in range(m):
        sl = slice(int(pk.starts[i]), int(pk.starts[i + 1]))
        zw = z[sl] * half_t[sl, None]
        c_blocks[i] = pk.X1[sl].T @ zw
        d = zw.T @ z[sl]
        d[0, 0] += 1.0 / params.sigma2
        if q2:
            d[1:, 1:] += omega_inv
        d_blocks[i] = d
    try:
        solved = np.linalg.solve(d_blocks, np.swapaxes(c_blocks, 1, 2))
    except np.linalg.LinAlgError:
        raise InferenceError("singular cluster information block") from None
    j_n = h11 - np.einsum("mij,mjk->ik", c_blocks, solved)
    j_n = (j_n + j_n.T) / 2.0
    return ProfileInformation(j_n=j_n, h11=(h11 + h11.T) / 2.0, c_blocks=c_blocks, d_blocks=d_blocks)


def commutation_matrix(q: int) -> np.ndarray:
    """K with K vec(M) = vec(M') for q x q M (column-major vec)."""
    k = np.zeros((q * q, q * q))
    for i in range(q):
        for j in range(q):
            k[i + j * q, j + i * q] = 1.0
    return k


@dataclass
class AsymptoticIntervals:
    """Normal-theory intervals from the profile information and the
    large-m limits of the hyperparameter estimators."""

    beta1: np.ndarray  # (q1, 2)
    beta0: tuple[float, float]
    sigma2: tuple[float, float]
    beta2: np.ndarray  # (q2, 2)
    omega_vec: np.ndarray  # (q2*q2, 2), column-major order
    se_beta1: np.ndarray
    alpha: float
    j_pd: bool
    info: ProfileInformation


def asymptotic_ci(dataset: HierarchicalDataset, params: MCAPParams, alpha: float = 0.05) -> AsymptoticIntervals:
    """Confidence intervals implied by the asymptotic normal limits."""
    info = profile_information(dataset, params)
    q1, q2 = dataset.q1, dataset.q2
    m = dataset.n_clusters
    z = stats.norm.ppf(1.0 - alpha / 2.0)

    j_pd = True
    if q1:
        eigmin = float(np.linalg.eigvalsh(info.j_n)[0])
        if eigmin <= 0:
            j_pd = False
            warnings.warn("profile information is not positive definite; using a pseudo-inverse", stacklevel=2)
            cov1 = np.linalg.pinv(info.j_n)
        else:
            cov1 = np.linalg.inv(info.j_n)
        se1 = np.sqrt(np.abs(np.diag(cov1)))
    else:
        se1 = np.zeros(0)
    beta1_ci = np.stack([params.beta1 - z * se1, params.beta1 + z * se1], axis=1) if q1 else np.zeros((0, 2))

    se0 = np.sqrt(params.sigma2 / m)
    beta0_ci = (params.beta0 - z * se0, params.beta0 + z * se0)
    se_s2 = np.sqrt(2.0 * params.sigma2**2 / m)
    sigma2_ci = (params.sigma2 - z * se_s2, params.sigma2 + z * se_s2)

    if q2:
        se2 = np.sqrt(np.diag(params.omega) / m)
        beta2_ci = np.stack([params.beta2 - z * se2, params.beta2 + z * se2], axis=1)
        cov_vec = (np.eye(q2 * q2) + commutation_matrix(q2)) @ np.kron(params.omega, params.omega) / m
        se_vec = np.sqrt(np.abs(np.diag(cov_vec)))
        vec_omega = params.omega.flatten(order="F")
        omega_ci = np.stack([vec_omega - z * se_vec, vec_omega + z * se_vec], axis=1)
    else:
        beta2_ci = np.zeros((0, 2))
        omega_ci = np.zeros((0, 2))

    return AsymptoticIntervals(
        beta1=beta1_ci,
        beta0=beta0_ci,
        sigma2=sigma2_ci,
        beta2=beta2_ci,
        omega_vec=omega_ci,
        se_beta1=se1,
        alpha=alpha,
        j_pd=j_pd,
        info=info,
    )

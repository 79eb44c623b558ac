"""Sequential extraction of higher-order components.

Identified directions are removed from the data by projection, the missing
singular values are re-injected from the fitted intercepts so the likelihood
stays nondegenerate, and the single-component estimator is rerun on the
deflated data. The deviation-from-diagonality (DfD) score decides how many
components to keep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .data import HierarchicalDataset, UnitData
from .errors import EstimatorError
from .estimator import FitConfig, FitResult, fit

__all__ = [
    "ComponentSet",
    "deflate_unit",
    "deflate_cov",
    "fit_component",
    "dfd",
    "select_k",
    "MCAPComponents",
]


@dataclass
class ComponentSet:
    """Accumulated per-cluster projections and their fits, in extraction order."""

    projections: list[np.ndarray]  # per cluster, p x K
    fits: list[FitResult] = field(default_factory=list)
    dfd_values: list[float] = field(default_factory=list)
    evaluated_dfd: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.fits)

    @classmethod
    def empty(cls, n_clusters: int, p: int) -> "ComponentSet":
        return cls(projections=[np.zeros((p, 0)) for _ in range(n_clusters)])


def _check_orthonormal(gamma: np.ndarray):
    k = gamma.shape[1]
    if k and np.abs(gamma.T @ gamma - np.eye(k)).max() > 1e-8:
        raise ValueError("projection columns must be orthonormal")


def deflate_unit(observations: np.ndarray, gamma: np.ndarray, intercepts, t_ij: int | None = None) -> np.ndarray:
    """Remove fitted components from a T x p observation matrix and re-inject
    the completion singular values sqrt(exp(intercept) * T).

    The deflated matrix has its last k-1 singular values at zero, with the
    corresponding right-singular directions spanning the removed subspace;
    since that null-space basis is arbitrary, each injected value is paired
    deterministically with its own removed component direction. When T < p
    the spectrum is zero-padded before replacement; injected directions
    beyond the row rank cannot be represented in a T x p matrix (use
    :func:`deflate_cov` to retain them at the covariance level).
    """
    y = np.asarray(observations, dtype=float)
    t, p = y.shape
    gamma = np.asarray(gamma, dtype=float)
    k1 = gamma.shape[1] if gamma.ndim == 2 else 0
    if k1 == 0:
        return y.copy()
    _check_orthonormal(gamma)
    t_ij = t if t_ij is None else int(t_ij)
    intercepts = np.atleast_1d(np.asarray(intercepts, dtype=float))
    if intercepts.shape[0] != k1:
        raise ValueError("need one intercept per removed component")

    yhat = y - (y @ gamma) @ gamma.T
    u, d, vt = np.linalg.svd(yhat, full_matrices=True)
    retained = p - k1
    d_full = np.zeros(p)
    d_full[: d.shape[0]] = d
    # retained part: the first p-(k-1) singular triplets (zeros where rank ran out)
    keep = min(t, retained)
    out = (u[:, :keep] * d_full[:keep]) @ vt[:keep]
    # completion: injected value l rides its own removed direction, carried by
    # the next free left-singular vectors (dropped if the rows run out)
    inject = np.sqrt(np.exp(intercepts) * t_ij)
    for ell in range(k1):
        col = keep + ell
        if col >= t:
            break
        out = out + inject[ell] * np.outer(u[:, col], gamma[:, ell])
    return out


def deflate_cov(sample_cov: np.ndarray, t_ij: int, gamma: np.ndarray, intercepts) -> np.ndarray:
    """Covariance-level version of :func:`deflate_unit`.

    Equals (1/T) Y~' Y~ of the deflated-and-completed matrix whenever the
    injected directions fit in the rows, and keeps all of them regardless
    of T: the removed subspace is refilled with variance exp(intercept)
    along each removed component direction.
    """
    s = np.asarray(sample_cov, dtype=float)
    p = s.shape[0]
    gamma = np.asarray(gamma, dtype=float)
    k1 = gamma.shape[1] if gamma.ndim == 2 else 0
    if k1 == 0:
        return s.copy()
    del t_ij  # the injected variance is exp(intercept) independent of T
    _check_orthonormal(gamma)
    intercepts = np.atleast_1d(np.asarray(intercepts, dtype=float))
    proj = np.eye(p) - gamma @ gamma.T
    shat = proj @ s @ proj
    out = shat + (gamma * np.exp(intercepts)) @ gamma.T
    return (out + out.T) / 2.0


def _deflated_dataset(dataset: HierarchicalDataset, previous: ComponentSet) -> HierarchicalDataset:
    clusters = []
    for i, cluster in enumerate(dataset.clusters):
        gamma = previous.projections[i]
        intercepts = np.array([fr.params.beta0i[i] for fr in previous.fits])
        units = []
        for u in cluster:
            s_new = deflate_cov(u.sample_cov, u.n_samples, gamma, intercepts)
            units.append(
                UnitData(
                    cluster_id=u.cluster_id,
                    unit_id=u.unit_id,
                    x1=u.x1,
                    x2=u.x2,
                    sample_cov=s_new,
                    n_samples=u.n_samples,
                )
            )
        clusters.append(units)
    return HierarchicalDataset(clusters)


def fit_component(dataset: HierarchicalDataset, previous: ComponentSet | None, config: FitConfig) -> FitResult:
    """Fit the next component on the deflated-and-completed data."""
    if previous is None or previous.n_components == 0:
        return fit(dataset, config)
    return fit(_deflated_dataset(dataset, previous), config)


def dfd(dataset: HierarchicalDataset, component_set: ComponentSet, n_components: int) -> float:
    """Average deviation from diagonality of the first ``n_components`` columns.

    Geometric mean over units, weighted by sample counts, of
    det(diag(G'SG)) / det(G'SG); equals 1 when the projections jointly
    diagonalize every sample covariance and exceeds 1 otherwise.
    """
    if n_components < 1:
        raise ValueError("need at least one component")
    log_total = 0.0
    total_t = float(dataset.total_obs)
    for i, cluster in enumerate(dataset.clusters):
        gamma = component_set.projections[i][:, :n_components]
        if gamma.shape[1] < n_components:
            raise ValueError(f"cluster {i} has only {gamma.shape[1]} extracted components")
        for j, u in enumerate(cluster):
            m = gamma.T @ u.sample_cov @ gamma
            m = (m + m.T) / 2.0
            diag = np.diag(m)
            if np.any(diag <= 0):
                raise EstimatorError(f"rank-deficient projection at (cluster {i}, unit {j})")
            if n_components == 1:
                factor = 0.0  # 1x1 determinant ratio is identically one
            else:
                try:
                    chol = np.linalg.cholesky(m)
                except np.linalg.LinAlgError:
                    raise EstimatorError(f"rank-deficient projection at (cluster {i}, unit {j})") from None
                factor = float(np.sum(np.log(diag)) - 2.0 * np.sum(np.log(np.diag(chol))))
                if factor < -1e-10:
                    raise EstimatorError(
                        f"diagonality ratio below one at (cluster {i}, unit {j}); numeric breakdown"
                    )
            log_total += (u.n_samples / total_t) * factor
    return float(np.exp(log_total))


def select_k(dataset: HierarchicalDataset, config: FitConfig, k_max: int, threshold: float = 2.0) -> ComponentSet:
    """Extract components sequentially, keeping the largest K with DfD(K) < threshold.

    Always keeps at least one component. ``evaluated_dfd`` retains the score
    of every extracted component including a rejected final one.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if not threshold > 1.0:
        raise ValueError("threshold must exceed 1")
    comp = ComponentSet.empty(dataset.n_clusters, dataset.p)
    for k in range(1, k_max + 1):
        result = fit_component(dataset, comp, config)
        comp.fits.append(result)
        comp.projections = [
            np.hstack([proj, result.params.gammas[i][:, None]])
            for i, proj in enumerate(comp.projections)
        ]
        try:
            value = dfd(dataset, comp, k)
        except EstimatorError:
            # the new component is degenerate with earlier ones (typically a
            # re-found completion direction); treat as maximal deviation
            value = float("inf")
        comp.evaluated_dfd.append(value)
        if value >= threshold and k > 1:
            comp.fits.pop()
            comp.projections = [proj[:, : k - 1] for proj in comp.projections]
            break
        comp.dfd_values.append(value)
    return comp


class MCAPComponents(BaseEstimator):
    """Estimator-style wrapper around :func:`select_k`."""

    def __init__(self, k_max=3, dfd_threshold=2.0, n_starts=10, max_iters=500, rel_tol=1e-6,
                 newton_max_halvings=30, omega_ridge=1e-8, random_state=0):
        self.k_max = k_max
        self.dfd_threshold = dfd_threshold
        self.n_starts = n_starts
        self.max_iters = max_iters
        self.rel_tol = rel_tol
        self.newton_max_halvings = newton_max_halvings
        self.omega_ridge = omega_ridge
        self.random_state = random_state

    def fit(self, X: HierarchicalDataset, y=None):
        X.validate()
        config = FitConfig(
            max_iters=self.max_iters,
            rel_tol=self.rel_tol,
            n_starts=self.n_starts,
            newton_max_halvings=self.newton_max_halvings,
            seed=self.random_state,
            omega_ridge=self.omega_ridge,
        )
        self.component_set_ = select_k(X, config, self.k_max, self.dfd_threshold)
        self.n_components_ = self.component_set_.n_components
        self.projections_ = self.component_set_.projections
        self.dfd_values_ = list(self.component_set_.dfd_values)
        return self

    def transform(self, X: HierarchicalDataset) -> np.ndarray:
        """Per-unit projected variances, one column per kept component."""
        if not hasattr(self, "component_set_"):
            raise EstimatorError("estimator is not fitted")
        pk = X.packed
        cols = []
        for k in range(self.n_components_):
            g = np.stack([proj[:, k] for proj in self.projections_])[pk.cl]
            cols.append(np.einsum("npq,np,nq->n", pk.S, g, g))
        return np.stack(cols, axis=1)

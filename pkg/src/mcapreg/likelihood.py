"""Negative hierarchical likelihood and its analytic derivatives.

All functions here are pure in (params, dataset). The objective decomposes
into four blocks: the conditional term of the projected variances, the
random-intercept and random-slope penalties, and the directional prior on
the per-cluster projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimatorError
from .vmf import VmfParams, log_cp

__all__ = [
    "MCAPParams",
    "ClampCounter",
    "neg_hlik",
    "neg_hlik_parts",
    "linear_predictor",
    "grad_beta0i",
    "hess_beta0i",
    "grad_beta1",
    "hess_beta1",
    "grad_beta2i",
    "hess_beta2i",
    "direction_quadratic",
]

MU_CLAMP = 700.0


class ClampCounter:
    """Counts how often a linear predictor had to be clamped before exp()."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0


@dataclass
class MCAPParams:
    """Full parameter state of the multilevel model."""

    gammas: np.ndarray  # (m, p) per-cluster unit directions
    beta0i: np.ndarray  # (m,) random intercepts
    beta1: np.ndarray  # (q1,) fixed effects
    beta2i: np.ndarray  # (m, q2) random slopes
    beta0: float
    sigma2: float
    beta2: np.ndarray  # (q2,)
    omega: np.ndarray  # (q2, q2)
    vmf: VmfParams

    def __post_init__(self):
        self.gammas = np.atleast_2d(np.asarray(self.gammas, dtype=float))
        self.beta0i = np.atleast_1d(np.asarray(self.beta0i, dtype=float))
        self.beta1 = np.atleast_1d(np.asarray(self.beta1, dtype=float))
        self.beta2i = np.asarray(self.beta2i, dtype=float).reshape(self.gammas.shape[0], -1)
        self.beta2 = np.atleast_1d(np.asarray(self.beta2, dtype=float))
        self.omega = np.asarray(self.omega, dtype=float).reshape(self.beta2.shape[0], self.beta2.shape[0])
        self.beta0 = float(self.beta0)
        self.sigma2 = float(self.sigma2)

    @property
    def n_clusters(self) -> int:
        return self.gammas.shape[0]

    @property
    def p(self) -> int:
        return self.gammas.shape[1]

    def validate(self) -> "MCAPParams":
        norms = np.linalg.norm(self.gammas, axis=1)
        if np.abs(norms - 1.0).max() > 1e-10:
            raise ValueError("per-cluster directions must have unit norm")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        q2 = self.beta2.shape[0]
        if q2:
            if np.abs(self.omega - self.omega.T).max() > 1e-10 * max(1.0, np.abs(self.omega).max()):
                raise ValueError("omega must be symmetric")
            if np.linalg.eigvalsh(self.omega)[0] <= 0:
                raise ValueError("omega must be positive definite")
        return self

    def canonical_signs(self) -> "MCAPParams":
        """Copy with a deterministic sign convention: the mean direction's
        largest-magnitude coordinate is positive, and all per-cluster
        directions flip in tandem so the objective value is unchanged."""
        mu = self.vmf.mean_direction
        flip = -1.0 if mu[np.argmax(np.abs(mu))] < 0 else 1.0
        return MCAPParams(
            gammas=flip * self.gammas,
            beta0i=self.beta0i.copy(),
            beta1=self.beta1.copy(),
            beta2i=self.beta2i.copy(),
            beta0=self.beta0,
            sigma2=self.sigma2,
            beta2=self.beta2.copy(),
            omega=self.omega.copy(),
            vmf=VmfParams(flip * mu, self.vmf.concentration),
        )

    def to_dict(self) -> dict:
        return {
            "gammas": self.gammas.tolist(),
            "beta0i": self.beta0i.tolist(),
            "beta1": self.beta1.tolist(),
            "beta2i": self.beta2i.tolist(),
            "beta0": self.beta0,
            "sigma2": self.sigma2,
            "beta2": self.beta2.tolist(),
            "omega": self.omega.tolist(),
            "vmf": {
                "mean_direction": self.vmf.mean_direction.tolist(),
                "concentration": self.vmf.concentration,
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MCAPParams":
        return cls(
            gammas=np.array(payload["gammas"]),
            beta0i=np.array(payload["beta0i"]),
            beta1=np.array(payload["beta1"]),
            beta2i=np.array(payload["beta2i"]),
            beta0=payload["beta0"],
            sigma2=payload["sigma2"],
            beta2=np.array(payload["beta2"]),
            omega=np.array(payload["omega"]),
            vmf=VmfParams(np.array(payload["vmf"]["mean_direction"]), payload["vmf"]["concentration"]),
        )


def _safe_exp_neg(mu: np.ndarray, counter: ClampCounter | None = None) -> np.ndarray:
    clipped = np.clip(mu, -MU_CLAMP, MU_CLAMP)
    if counter is not None:
        counter.count += int(np.sum(clipped != mu))
    return np.exp(-clipped)


def _proj_var(gammas: np.ndarray, packed) -> np.ndarray:
    g = gammas[packed.cl]
    s = np.einsum("npq,np,nq->n", packed.S, g, g)
    bad = s < -1e-12
    if np.any(bad):
        raise EstimatorError(f"negative projected variance {s[bad].min()!r}; covariance not PSD")
    return np.maximum(s, 0.0)


def linear_predictor(params: MCAPParams, dataset) -> np.ndarray:
    """Per-unit linear predictor beta0i + x1'beta1 + x2'beta2i, flat over units."""
    pk = dataset.packed
    mu = params.beta0i[pk.cl].copy()
    if dataset.q1:
        mu += pk.X1 @ params.beta1
    if dataset.q2:
        mu += np.einsum("nq,nq->n", pk.X2, params.beta2i[pk.cl])
    return mu


def _omega_chol(params: MCAPParams) -> np.ndarray | None:
    q2 = params.beta2.shape[0]
    if q2 == 0:
        return None
    try:
        return np.linalg.cholesky(params.omega)
    except np.linalg.LinAlgError:
        raise EstimatorError("random-slope covariance is singular") from None


def _part_arrays(params: MCAPParams, dataset, counter: ClampCounter | None = None):
    pk = dataset.packed
    m = dataset.n_clusters
    mu = linear_predictor(params, dataset)
    s = _proj_var(params.gammas, pk)
    contrib = 0.5 * pk.T * (mu + s * _safe_exp_neg(mu, counter))
    cond = np.add.reduceat(contrib, pk.starts[:-1])

    dev0 = params.beta0i - params.beta0
    pen0 = 0.5 * np.log(params.sigma2) + dev0**2 / (2.0 * params.sigma2)

    chol = _omega_chol(params)
    if chol is None:
        pen2 = np.zeros(m)
    else:
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        dev2 = params.beta2i - params.beta2
        z = np.linalg.solve(chol, dev2.T)
        pen2 = 0.5 * logdet + 0.5 * np.sum(z * z, axis=0)

    kappa = params.vmf.concentration
    vmf_part = -log_cp(dataset.p, kappa) - kappa * (params.gammas @ params.vmf.mean_direction)
    return cond, pen0, pen2, vmf_part


def neg_hlik_parts(params: MCAPParams, dataset, counter: ClampCounter | None = None) -> dict[str, float]:
    """The four additive blocks of the objective, as named totals."""
    cond, pen0, pen2, vmf_part = _part_arrays(params, dataset, counter)
    parts = {
        "conditional": float(np.sum(cond)),
        "intercepts": float(np.sum(pen0)),
        "slopes": float(np.sum(pen2)),
        "directions": float(np.sum(vmf_part)),
    }
    for name, value in parts.items():
        if not np.isfinite(value):
            raise EstimatorError(f"objective overflow in the {name} term")
    return parts


def neg_hlik(params: MCAPParams, dataset, counter: ClampCounter | None = None) -> float:
    """Negative hierarchical likelihood (additive constants fixed to zero)."""
    parts = neg_hlik_parts(params, dataset, counter)
    return parts["conditional"] + parts["intercepts"] + parts["slopes"] + parts["directions"]


def _cluster_slice(dataset, i: int):
    pk = dataset.packed
    return slice(int(pk.starts[i]), int(pk.starts[i + 1]))


def _cluster_residual(params: MCAPParams, dataset, i: int):
    # returns (T/2 weights, s*exp(-mu), slice) for cluster i
    pk = dataset.packed
    sl = _cluster_slice(dataset, i)
    mu = linear_predictor(params, dataset)[sl]
    s = _proj_var(params.gammas, pk)[sl]
    return 0.5 * pk.T[sl], s * _safe_exp_neg(mu), sl


def grad_beta0i(params: MCAPParams, dataset, i: int) -> float:
    half_t, r, _ = _cluster_residual(params, dataset, i)
    return float(np.sum(half_t * (1.0 - r)) + (params.beta0i[i] - params.beta0) / params.sigma2)


def hess_beta0i(params: MCAPParams, dataset, i: int) -> float:
    half_t, r, _ = _cluster_residual(params, dataset, i)
    return float(np.sum(half_t * r) + 1.0 / params.sigma2)


def grad_beta1(params: MCAPParams, dataset) -> np.ndarray:
    pk = dataset.packed
    mu = linear_predictor(params, dataset)
    r = _proj_var(params.gammas, pk) * _safe_exp_neg(mu)
    return (0.5 * pk.T * (1.0 - r)) @ pk.X1


def hess_beta1(params: MCAPParams, dataset) -> np.ndarray:
    pk = dataset.packed
    mu = linear_predictor(params, dataset)
    r = _proj_var(params.gammas, pk) * _safe_exp_neg(mu)
    w = 0.5 * pk.T * r
    return (pk.X1 * w[:, None]).T @ pk.X1


def grad_beta2i(params: MCAPParams, dataset, i: int) -> np.ndarray:
    pk = dataset.packed
    half_t, r, sl = _cluster_residual(params, dataset, i)
    chol = _omega_chol(params)
    dev = params.beta2i[i] - params.beta2
    penalty = np.linalg.solve(chol.T, np.linalg.solve(chol, dev))
    return (half_t * (1.0 - r)) @ pk.X2[sl] + penalty


def hess_beta2i(params: MCAPParams, dataset, i: int) -> np.ndarray:
    pk = dataset.packed
    half_t, r, sl = _cluster_residual(params, dataset, i)
    chol = _omega_chol(params)
    omega_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(chol.shape[0])))
    x2 = pk.X2[sl]
    return (x2 * (half_t * r)[:, None]).T @ x2 + omega_inv


def direction_quadratic(params: MCAPParams, dataset, i: int) -> np.ndarray:
    """Weighted covariance sum driving the working-direction subproblem."""
    pk = dataset.packed
    sl = _cluster_slice(dataset, i)
    mu = linear_predictor(params, dataset)[sl]
    w = 0.5 * pk.T[sl] * _safe_exp_neg(mu)
    a = np.einsum("n,npq->pq", w, pk.S[sl])
    return (a + a.T) / 2.0

"""Block coordinate descent estimator for the multilevel projection model.

One iteration cycles the blocks {beta0i} -> beta1 -> {beta2i} ->
(beta0, sigma2) -> (beta2, Omega) -> {gamma_i} -> (gamma, kappa). Newton
blocks use step halving, the direction block uses a signed eigenvector
candidate search under the cluster-normalizer metric, and every update is
accepted only if the objective does not increase, so the objective trace is
non-increasing by construction.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .data import HierarchicalDataset, compute_normalizers
from .errors import EstimatorError
from .likelihood import MCAPParams, neg_hlik
from .vmf import KAPPA_CAP, VmfParams, log_cp, _solve_concentration

__all__ = [
    "FitConfig",
    "FitResult",
    "fit",
    "newton_update_block",
    "update_hyperparams",
    "update_gamma_i",
    "update_vmf_block",
    "solve_working_direction",
    "MCAPRegression",
]

# variance assigned to a degenerate hierarchy (single cluster): large enough
# that the random-effect penalty is numerically inert
DEGENERATE_VARIANCE = 1e12


@dataclass
class FitConfig:
    """Optimizer settings; defaults follow the reference configuration."""

    max_iters: int = 500
    rel_tol: float = 1e-6
    n_starts: int = 10
    newton_max_halvings: int = 30
    seed: int = 0
    omega_ridge: float = 1e-8
    centering: bool = False

    def __post_init__(self):
        if self.max_iters < 1 or self.n_starts < 1 or self.rel_tol <= 0:
            raise ValueError("max_iters >= 1, n_starts >= 1 and rel_tol > 0 required")


@dataclass
class FitResult:
    """Outcome of one multi-start fit."""

    params: MCAPParams
    objective: float
    objective_trace: list[float]
    start_index: int
    converged: bool
    clamp_count: int
    start_objectives: list[float] = field(default_factory=list)
    all_traces: list[list[float]] = field(default_factory=list)

    @property
    def n_iters(self) -> int:
        return len(self.objective_trace) - 1


def _guard(arr):
    # acceptance tests must treat any non-finite trial value as "worse"
    return np.where(np.isfinite(arr), arr, np.inf)


class _Engine:
    """Vectorized optimizer state over flat per-unit arrays.

    Three configurations share this machinery: the full multilevel fit, the
    reduced fit with directions and the directional prior frozen (used by the
    bootstrap), and the single-level per-cluster fit with all hierarchy
    penalties off (the flat baseline).
    """

    def __init__(
        self,
        *,
        S,
        T,
        X1,
        X2,
        starts,
        config: FitConfig,
        hinv=None,
        update_directions=True,
        intercept_penalty=True,
        slope_penalty=True,
        vmf_mode="dynamic",  # dynamic | off
    ):
        self.S = S
        self.T = np.asarray(T, dtype=float)
        self.half_T = 0.5 * self.T
        self.X1 = X1
        self.X2 = X2
        self.starts = np.asarray(starts)
        self.m = len(self.starts) - 1
        self.cl = np.repeat(np.arange(self.m), np.diff(self.starts))
        self.q1 = X1.shape[1]
        self.q2 = X2.shape[1]
        self.p = S.shape[1] if S is not None else None
        self.config = config
        self.hinv = hinv
        self.update_directions = update_directions
        self.pen0_on = intercept_penalty
        self.pen2_on = slope_penalty
        self.vmf_mode = vmf_mode
        self.clamp_count = 0
        self.gam = None
        self.s = None

    # -- initialization ----------------------------------------------------

    def init_state(self, gam, s, b0i=None, b1=None, b2i=None, sig2=1.0, omega=None,
                   kappa=1.0, mu_dir=None, beta0=None, beta2=None):
        self.gam = gam
        self.s = np.asarray(s, dtype=float)
        self.b0i = np.asarray(b0i, dtype=float) if b0i is not None else self._default_b0i()
        self.b1 = np.zeros(self.q1) if b1 is None else np.asarray(b1, dtype=float)
        self.b2i = np.zeros((self.m, self.q2)) if b2i is None else np.asarray(b2i, dtype=float)
        self.b0 = float(np.mean(self.b0i)) if beta0 is None else float(beta0)
        self.sig2 = float(sig2)
        self.b2 = np.zeros(self.q2) if beta2 is None else np.asarray(beta2, dtype=float)
        self.omega = np.eye(self.q2) if omega is None else np.asarray(omega, dtype=float)
        if self.m == 1:
            # single cluster: the hierarchy variances are unidentified, so the
            # penalties are made numerically inert from the start
            if self.pen0_on and self.sig2 < DEGENERATE_VARIANCE:
                warnings.warn("single cluster: intercept variance is degenerate", stacklevel=3)
                self.sig2 = DEGENERATE_VARIANCE
            if self.pen2_on and self.q2 and np.linalg.eigvalsh(np.atleast_2d(self.omega))[0] < DEGENERATE_VARIANCE:
                self.omega = DEGENERATE_VARIANCE * np.eye(self.q2)
        self.om_chol = np.linalg.cholesky(self.omega) if self.q2 else None
        self.kappa = float(kappa)
        if mu_dir is None and self.vmf_mode != "off":
            mu_dir = self._aligned_mean_direction()
        self.mu_dir = mu_dir
        self._refresh_parts()

    def _default_b0i(self):
        # log of the per-cluster average projected variance, weighted by T
        num = np.add.reduceat(self.T * self.s, self.starts[:-1])
        den = np.add.reduceat(self.T, self.starts[:-1])
        return np.log(np.maximum(num / den, 1e-300))

    def _aligned_mean_direction(self):
        v = self.gam[0].copy()
        for i in range(1, self.m):
            if v @ self.gam[i] < 0:
                self.gam[i] = -self.gam[i]
            v = v + self.gam[i]
        nrm = np.linalg.norm(v)
        if nrm < 1e-12:
            v = np.zeros_like(v)
            v[0] = 1.0
            return v
        return v / nrm

    # -- objective bookkeeping ---------------------------------------------

    def _exp_neg(self, mu):
        clipped = np.clip(mu, -700.0, 700.0)
        self.clamp_count += int(np.sum(clipped != mu))
        return np.exp(-clipped)

    def _mu(self):
        mu = self.b0i[self.cl].copy()
        if self.q1:
            mu += self.X1 @ self.b1
        if self.q2:
            mu += np.einsum("nq,nq->n", self.X2, self.b2i[self.cl])
        return mu

    def _cond_for(self, mu, s):
        # overflow in a trial evaluation is handled by the acceptance guard
        with np.errstate(over="ignore", invalid="ignore"):
            return np.add.reduceat(self.half_T * (mu + s * self._exp_neg(mu)), self.starts[:-1])

    def _pen0_for(self, b0i, b0=None, sig2=None):
        if not self.pen0_on:
            return np.zeros(self.m)
        b0 = self.b0 if b0 is None else b0
        sig2 = self.sig2 if sig2 is None else sig2
        return 0.5 * np.log(sig2) + (b0i - b0) ** 2 / (2.0 * sig2)

    def _pen2_for(self, b2i, b2=None, chol=None):
        if not (self.pen2_on and self.q2):
            return np.zeros(self.m)
        b2 = self.b2 if b2 is None else b2
        chol = self.om_chol if chol is None else chol
        dev = b2i - b2
        z = np.linalg.solve(chol, dev.T)
        return float(np.sum(np.log(np.diag(chol)))) + 0.5 * np.sum(z * z, axis=0)

    def _vmf_for(self, gam, kappa=None, mu_dir=None):
        if self.vmf_mode == "off":
            return np.zeros(self.m)
        kappa = self.kappa if kappa is None else kappa
        mu_dir = self.mu_dir if mu_dir is None else mu_dir
        return -log_cp(gam.shape[1], kappa) - kappa * (gam @ mu_dir)

    def _refresh_parts(self):
        self.cond = self._cond_for(self._mu(), self.s)
        self.pen0 = self._pen0_for(self.b0i)
        self.pen2 = self._pen2_for(self.b2i)
        self.vmf_t = self._vmf_for(self.gam) if self.gam is not None else np.zeros(self.m)

    def total(self) -> float:
        return float(np.sum(self.cond) + np.sum(self.pen0) + np.sum(self.pen2) + np.sum(self.vmf_t))

    # -- Newton blocks -------------------------------------------------------

    def _residual(self, mu):
        with np.errstate(over="ignore", invalid="ignore"):
            return self.s * self._exp_neg(mu)

    def _newton_b0i(self, only=None):
        mu = self._mu()
        r = self._residual(mu)
        grad = np.add.reduceat(self.half_T * (1.0 - r), self.starts[:-1])
        hess = np.add.reduceat(self.half_T * r, self.starts[:-1])
        if self.pen0_on:
            grad = grad + (self.b0i - self.b0) / self.sig2
            hess = hess + 1.0 / self.sig2
        if not np.all(np.isfinite(grad)):
            raise EstimatorError("beta0i block: non-finite gradient")
        if not np.all(np.isfinite(hess)) or np.any(hess <= 0):
            raise EstimatorError("beta0i block: non-positive curvature")
        step = grad / hess
        alpha = np.ones(self.m)
        if only is not None:
            alpha = np.zeros(self.m)
            alpha[only] = 1.0
        old_local = self.cond + self.pen0

        def trial_eval(a):
            b0i_t = self.b0i - a * step
            mu_t = mu + (b0i_t - self.b0i)[self.cl]
            cond_t = self._cond_for(mu_t, self.s)
            pen0_t = self._pen0_for(b0i_t)
            return _guard(cond_t + pen0_t), (b0i_t, cond_t, pen0_t)

        alpha, payload = self._halving(alpha, trial_eval, old_local)
        self.b0i, self.cond, self.pen0 = payload

    def _newton_b1(self):
        if self.q1 == 0:
            return
        mu = self._mu()
        r = self._residual(mu)
        grad = (self.half_T * (1.0 - r)) @ self.X1
        if not np.all(np.isfinite(grad)):
            raise EstimatorError("beta1 block: non-finite gradient")
        w = self.half_T * r
        hess = (self.X1 * w[:, None]).T @ self.X1
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise EstimatorError("beta1 block: singular Hessian (rank-deficient fixed-effect design)") from None
        old = float(np.sum(self.cond))
        alpha = 1.0
        for _ in range(self.config.newton_max_halvings + 1):
            b1_t = self.b1 - alpha * step
            mu_t = mu + self.X1 @ (b1_t - self.b1)
            cond_t = self._cond_for(mu_t, self.s)
            if float(np.sum(_guard(cond_t))) <= old:
                self.b1 = b1_t
                self.cond = cond_t
                return
            alpha *= 0.5
        # halving budget exhausted; keep the old value

    def _newton_b2i(self, only=None):
        if self.q2 == 0:
            return
        mu = self._mu()
        r = self._residual(mu)
        coef = self.half_T * (1.0 - r)
        grad = np.add.reduceat(coef[:, None] * self.X2, self.starts[:-1], axis=0)
        wx = (self.half_T * r)[:, None, None] * (self.X2[:, :, None] * self.X2[:, None, :])
        hess = np.add.reduceat(wx, self.starts[:-1], axis=0)
        if self.pen2_on:
            om_inv = np.linalg.solve(self.om_chol.T, np.linalg.solve(self.om_chol, np.eye(self.q2)))
            grad = grad + (self.b2i - self.b2) @ om_inv.T
            hess = hess + om_inv
        if not np.all(np.isfinite(grad)):
            raise EstimatorError("beta2i block: non-finite gradient")
        try:
            step = np.linalg.solve(hess, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise EstimatorError("beta2i block: singular Hessian") from None
        alpha = np.ones(self.m)
        if only is not None:
            alpha = np.zeros(self.m)
            alpha[only] = 1.0
        old_local = self.cond + self.pen2

        def trial_eval(a):
            b2i_t = self.b2i - a[:, None] * step
            mu_t = mu + np.einsum("nq,nq->n", self.X2, (b2i_t - self.b2i)[self.cl])
            cond_t = self._cond_for(mu_t, self.s)
            pen2_t = self._pen2_for(b2i_t)
            return _guard(cond_t + pen2_t), (b2i_t, cond_t, pen2_t)

        alpha, payload = self._halving(alpha, trial_eval, old_local)
        self.b2i, self.cond, self.pen2 = payload

    def _halving(self, alpha, trial_eval, old_local):
        for _ in range(self.config.newton_max_halvings):
            local, payload = trial_eval(alpha)
            worse = (local > old_local) & (alpha > 0)
            if not worse.any():
                return alpha, payload
            alpha = np.where(worse, alpha * 0.5, alpha)
        local, payload = trial_eval(alpha)
        worse = (local > old_local) & (alpha > 0)
        if worse.any():
            alpha = np.where(worse, 0.0, alpha)
            _, payload = trial_eval(alpha)
        return alpha, payload

    # -- closed-form hyperparameter blocks ----------------------------------

    def _hyper_intercept(self):
        if not self.pen0_on:
            return
        b0_new = float(np.mean(self.b0i))
        if self.m == 1:
            # degenerate hierarchy: pin the mean, keep the inert variance
            self.b0, self.sig2 = b0_new, DEGENERATE_VARIANCE
            self.pen0 = self._pen0_for(self.b0i)
            return
        sig2_new = float(np.mean((self.b0i - b0_new) ** 2))
        sig2_new = max(sig2_new, self.config.omega_ridge)
        pen0_new = self._pen0_for(self.b0i, b0=b0_new, sig2=sig2_new)
        if float(np.sum(_guard(pen0_new))) <= float(np.sum(self.pen0)):
            self.b0, self.sig2, self.pen0 = b0_new, sig2_new, pen0_new

    def _hyper_slope(self):
        if not (self.pen2_on and self.q2):
            return
        b2_new = self.b2i.mean(axis=0)
        if self.m == 1:
            self.b2 = b2_new
            self.omega = DEGENERATE_VARIANCE * np.eye(self.q2)
            self.om_chol = np.linalg.cholesky(self.omega)
            self.pen2 = self._pen2_for(self.b2i)
            return
        dev = self.b2i - b2_new
        omega_new = (dev.T @ dev) / self.m
        omega_new = (omega_new + omega_new.T) / 2.0
        if np.linalg.eigvalsh(omega_new)[0] < self.config.omega_ridge:
            omega_new = omega_new + self.config.omega_ridge * np.eye(self.q2)
        try:
            chol_new = np.linalg.cholesky(omega_new)
        except np.linalg.LinAlgError:
            raise EstimatorError("slope-covariance update is not positive definite") from None
        pen2_new = self._pen2_for(self.b2i, b2=b2_new, chol=chol_new)
        if float(np.sum(_guard(pen2_new))) <= float(np.sum(self.pen2)):
            self.b2, self.omega, self.om_chol, self.pen2 = b2_new, omega_new, chol_new, pen2_new

    # -- direction blocks ----------------------------------------------------

    def _direction_candidates(self, mu):
        """Signed generalized-eigenvector candidates for every cluster."""
        w = self.half_T * self._exp_neg(mu)
        a_stack = np.add.reduceat(w[:, None, None] * self.S, self.starts[:-1], axis=0)
        a_stack = (a_stack + np.swapaxes(a_stack, 1, 2)) / 2.0
        b_stack = self.hinv @ a_stack @ self.hinv
        b_stack = (b_stack + np.swapaxes(b_stack, 1, 2)) / 2.0
        try:
            d, v0 = np.linalg.eigh(b_stack)
        except np.linalg.LinAlgError:
            raise EstimatorError("direction block: eigendecomposition failed") from None
        xi = self.hinv @ v0  # columns satisfy xi' H xi = 1
        # canonical candidate sign: first nonzero coordinate positive
        first = np.argmax(xi != 0.0, axis=1)
        lead = np.take_along_axis(xi, first[:, None, :], axis=1)[:, 0, :]
        xi = xi * np.where(lead < 0, -1.0, 1.0)[:, None, :]
        return d, xi

    def _gamma_step(self, accept_only=True, only=None):
        if not self.update_directions:
            return
        mu = self._mu()
        d, xi = self._direction_candidates(mu)
        if self.vmf_mode == "off" or self.kappa == 0.0:
            vals = np.repeat(d, 2, axis=1)
        else:
            gdot = np.einsum("mps,p->ms", xi, self.mu_dir)
            vals = np.empty((self.m, 2 * d.shape[1]))
            vals[:, 0::2] = d - self.kappa * gdot
            vals[:, 1::2] = d + self.kappa * gdot
        best = np.argmin(vals, axis=1)
        sidx = best // 2
        sign = np.where(best % 2 == 0, 1.0, -1.0)
        tilde = sign[:, None] * np.take_along_axis(xi, sidx[:, None, None], axis=2)[:, :, 0]
        gam_prop = tilde / np.linalg.norm(tilde, axis=1, keepdims=True)

        accept = np.ones(self.m, dtype=bool)
        if only is not None:
            accept[:] = False
            accept[only] = True
        g_unit = gam_prop[self.cl]
        s_prop = np.maximum(np.einsum("npq,np,nq->n", self.S, g_unit, g_unit), 0.0)
        cond_prop = self._cond_for(mu, s_prop)
        vmf_prop = self._vmf_for(gam_prop)
        if accept_only:
            accept &= _guard(cond_prop + vmf_prop) <= self.cond + self.vmf_t
        if not accept.any():
            return
        self.gam = np.where(accept[:, None], gam_prop, self.gam)
        unit_mask = accept[self.cl]
        self.s = np.where(unit_mask, s_prop, self.s)
        self.cond = np.where(accept, cond_prop, self.cond)
        self.vmf_t = np.where(accept, vmf_prop, self.vmf_t)

    def _align_signs(self):
        dots = self.gam @ self.mu_dir
        flips = dots < 0
        if flips.any():
            self.gam = np.where(flips[:, None], -self.gam, self.gam)
            self.vmf_t = self._vmf_for(self.gam)

    def _vmf_step(self):
        if self.vmf_mode != "dynamic":
            return
        gbar = self.gam.mean(axis=0)
        rbar = float(np.linalg.norm(gbar))
        if rbar < 1e-15:
            warnings.warn("degenerate direction average; keeping previous mean direction", stacklevel=2)
            kappa_new, mu_new = 0.0, self.mu_dir
        else:
            mu_new = gbar / rbar
            if rbar >= 1.0 - 1e-12:
                kappa_new = KAPPA_CAP
            else:
                kappa_new = min(rbar * (self.gam.shape[1] - rbar**2) / (1.0 - rbar**2), KAPPA_CAP)
        vmf_new = self._vmf_for(self.gam, kappa=kappa_new, mu_dir=mu_new)
        if float(np.sum(_guard(vmf_new))) <= float(np.sum(self.vmf_t)):
            self.kappa, self.mu_dir, self.vmf_t = kappa_new, mu_new, vmf_new
            return
        # the closed form is only an approximate concentration MLE; fall back
        # to the exact solve, which cannot increase this block
        if 0 < rbar < 1.0 - 1e-12:
            kappa_exact = _solve_concentration(self.gam.shape[1], rbar)
            vmf_exact = self._vmf_for(self.gam, kappa=kappa_exact, mu_dir=mu_new)
            if float(np.sum(_guard(vmf_exact))) <= float(np.sum(self.vmf_t)):
                self.kappa, self.mu_dir, self.vmf_t = kappa_exact, mu_new, vmf_exact

    # -- main loop -----------------------------------------------------------

    def run(self):
        trace = [self.total()]
        converged = False
        for _ in range(self.config.max_iters):
            self._newton_b0i()
            self._newton_b1()
            self._newton_b2i()
            self._hyper_intercept()
            self._hyper_slope()
            self._gamma_step(accept_only=True)
            if self.vmf_mode == "dynamic":
                self._align_signs()
                self._vmf_step()
            cur = self.total()
            if cur > trace[-1]:
                raise EstimatorError(f"descent contract violated: {trace[-1]!r} -> {cur!r}")
            trace.append(cur)
            rel = abs(trace[-2] - cur) / max(1.0, abs(trace[-2]), abs(cur))
            if rel < self.config.rel_tol:
                converged = True
                break
        return trace, converged

    def export_params(self) -> MCAPParams:
        mu_dir = self.mu_dir if self.mu_dir is not None else np.eye(1, self.gam.shape[1])[0]
        return MCAPParams(
            gammas=self.gam.copy(),
            beta0i=self.b0i.copy(),
            beta1=self.b1.copy(),
            beta2i=self.b2i.copy(),
            beta0=self.b0,
            sigma2=self.sig2,
            beta2=self.b2.copy(),
            omega=self.omega.copy(),
            vmf=VmfParams(mu_dir.copy(), self.kappa),
        )


def solve_working_direction(a_mat: np.ndarray, h_mat: np.ndarray, kappa: float,
                            mean_dir: np.ndarray) -> tuple[np.ndarray, float]:
    """Signed-eigenvector candidate search for one working direction.

    Minimizes x' A x - kappa g' x over the 2p candidates +-xi_s, where the
    xi_s are the generalized eigenvectors of (A, H) normalized to
    xi' H xi = 1. Ties go to the smaller eigenvalue index, then to the
    candidate whose first nonzero coordinate is positive. Returns the winning
    working vector and its objective value.
    """
    w, v = np.linalg.eigh(h_mat)
    if w[0] <= 0:
        raise EstimatorError("working-direction metric is not positive definite")
    h_inv_sqrt = (v / np.sqrt(w)) @ v.T
    b = h_inv_sqrt @ a_mat @ h_inv_sqrt
    d, v0 = np.linalg.eigh((b + b.T) / 2.0)
    xi = h_inv_sqrt @ v0
    lead = np.take_along_axis(xi, np.argmax(xi != 0.0, axis=0)[None, :], axis=0)[0]
    xi = xi * np.where(lead < 0, -1.0, 1.0)
    gdot = xi.T @ mean_dir
    vals = np.empty(2 * d.shape[0])
    vals[0::2] = d - kappa * gdot
    vals[1::2] = d + kappa * gdot
    best = int(np.argmin(vals))
    tilde = (1.0 if best % 2 == 0 else -1.0) * xi[:, best // 2]
    return tilde, float(vals[best])


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------


def _proj_var_flat(S, cl, gam):
    g = gam[cl]
    s = np.einsum("npq,np,nq->n", S, g, g)
    if np.any(s < -1e-12):
        raise EstimatorError("negative projected variance; covariance not PSD")
    return np.maximum(s, 0.0)


def _engine_for_dataset(dataset: HierarchicalDataset, config: FitConfig, normalizers=None, **flags) -> _Engine:
    pk = dataset.packed
    if normalizers is None:
        normalizers = compute_normalizers(dataset)
    hinv = np.stack([nz.inv_sqrt() for nz in normalizers])
    return _Engine(S=pk.S, T=pk.T, X1=pk.X1, X2=pk.X2, starts=pk.starts, config=config, hinv=hinv, **flags)


def _engine_from_params(dataset, params: MCAPParams, config: FitConfig, **flags) -> _Engine:
    eng = _engine_for_dataset(dataset, config, **flags)
    pk = dataset.packed
    eng.init_state(
        gam=params.gammas.copy(),
        s=_proj_var_flat(pk.S, pk.cl, params.gammas),
        b0i=params.beta0i.copy(),
        b1=params.beta1.copy(),
        b2i=params.beta2i.copy(),
        sig2=params.sigma2,
        omega=params.omega.copy(),
        kappa=params.vmf.concentration,
        mu_dir=params.vmf.mean_direction.copy(),
        beta0=params.beta0,
        beta2=params.beta2.copy(),
    )
    return eng


def _init_directions(eng: _Engine, hmat_stack, rng, start_index: int):
    """Starting directions for one restart.

    At a flat linear predictor the direction subproblem's matrix pair is
    proportional, so directions drawn uniformly on the sphere leave the
    optimizer in a degenerate basin. Instead, start 0 warm-starts every
    cluster at the smallest eigenvector of its normalizer (the natural
    candidate for a minimum-variance component), and restart s explores the
    eigenvector of index s mod p under a random perturbation.
    """
    m, p = eng.m, eng.S.shape[1]
    _, vecs = np.linalg.eigh(hmat_stack)
    if start_index == 0:
        gam = vecs[:, :, 0].copy()
    else:
        gam = vecs[:, :, start_index % p] + 0.3 * rng.standard_normal((m, p))
        gam /= np.linalg.norm(gam, axis=1, keepdims=True)
    lead = np.take_along_axis(gam, np.argmax(gam != 0.0, axis=1)[:, None], axis=1)[:, 0]
    return gam * np.where(lead < 0, -1.0, 1.0)[:, None]


def _run_start(dataset, normalizers, hmat_stack, config, start_index, seed_seq):
    rng = np.random.default_rng(seed_seq)
    eng = _engine_for_dataset(dataset, config, normalizers=normalizers)
    gam = _init_directions(eng, hmat_stack, rng, start_index)
    pk = dataset.packed
    s = _proj_var_flat(pk.S, pk.cl, gam)
    hquad = np.einsum("mpq,mp,mq->m", hmat_stack, gam, gam)
    eng.init_state(gam=gam, s=s, b0i=np.log(hquad))
    trace, converged = eng.run()
    return eng, trace, converged


def fit(dataset: HierarchicalDataset, config: FitConfig | None = None, threads: int = 1) -> FitResult:
    """Multi-start block coordinate descent; returns the best start.

    Deterministic given (dataset, config.seed), for any thread count.
    """
    config = config or FitConfig()
    normalizers = compute_normalizers(dataset)
    hmat_stack = np.stack([nz.matrix for nz in normalizers])
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)

    def one(start_index):
        try:
            return _run_start(dataset, normalizers, hmat_stack, config, start_index, seeds[start_index])
        except EstimatorError as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, range(config.n_starts)))
    else:
        outcomes = [one(k) for k in range(config.n_starts)]

    best = None
    start_objectives = []
    all_traces = []
    failures = []
    for k, out in enumerate(outcomes):
        if isinstance(out, EstimatorError):
            failures.append(f"start {k}: {out}")
            start_objectives.append(float("nan"))
            all_traces.append([])
            continue
        eng, trace, converged = out
        start_objectives.append(trace[-1])
        all_traces.append(trace)
        if best is None or trace[-1] < best[1][-1]:
            best = (eng, trace, converged, k)
    if best is None:
        raise EstimatorError("all starts failed: " + " | ".join(failures))
    eng, trace, converged, k = best
    return FitResult(
        params=eng.export_params(),
        objective=trace[-1],
        objective_trace=trace,
        start_index=k,
        converged=converged,
        clamp_count=eng.clamp_count,
        start_objectives=start_objectives,
        all_traces=all_traces,
    )


# ---------------------------------------------------------------------------
# Single-block public operations
# ---------------------------------------------------------------------------


def newton_update_block(params: MCAPParams, dataset, block: str, i: int | None = None,
                        config: FitConfig | None = None) -> MCAPParams:
    """One damped Newton step on one block; the objective never increases."""
    config = config or FitConfig()
    eng = _engine_from_params(dataset, params, config)
    if block == "beta0i":
        eng._newton_b0i(only=_require_index(i))
    elif block == "beta1":
        eng._newton_b1()
    elif block == "beta2i":
        eng._newton_b2i(only=_require_index(i))
    else:
        raise ValueError(f"unknown block {block!r}")
    return eng.export_params()


def _require_index(i):
    if i is None:
        raise ValueError("this block requires a cluster index")
    return i


def update_hyperparams(params: MCAPParams, dataset, config: FitConfig | None = None) -> MCAPParams:
    """Closed-form update of (beta0, sigma2) and (beta2, Omega)."""
    config = config or FitConfig()
    if params.n_clusters == 1:
        warnings.warn("single cluster: hierarchy variances are degenerate", stacklevel=2)
    eng = _engine_from_params(dataset, params, config)
    eng._hyper_intercept()
    eng._hyper_slope()
    return eng.export_params()


def update_gamma_i(params: MCAPParams, dataset, i: int, config: FitConfig | None = None) -> MCAPParams:
    """Candidate-search update of one cluster direction (no acceptance filter)."""
    config = config or FitConfig()
    eng = _engine_from_params(dataset, params, config)
    eng._gamma_step(accept_only=False, only=i)
    return eng.export_params()


def update_vmf_block(params: MCAPParams) -> MCAPParams:
    """Closed-form update of the directional prior from the current directions."""
    gbar = params.gammas.mean(axis=0)
    rbar = float(np.linalg.norm(gbar))
    if rbar < 1e-15:
        warnings.warn("degenerate direction average; keeping previous mean direction", stacklevel=2)
        vmf = VmfParams(params.vmf.mean_direction.copy(), 0.0, degenerate=True)
    else:
        mu_dir = gbar / rbar
        if rbar >= 1.0 - 1e-12:
            vmf = VmfParams(mu_dir, KAPPA_CAP, degenerate=True)
        else:
            p = params.p
            vmf = VmfParams(mu_dir, min(rbar * (p - rbar**2) / (1.0 - rbar**2), KAPPA_CAP))
    return MCAPParams(
        gammas=params.gammas.copy(),
        beta0i=params.beta0i.copy(),
        beta1=params.beta1.copy(),
        beta2i=params.beta2i.copy(),
        beta0=params.beta0,
        sigma2=params.sigma2,
        beta2=params.beta2.copy(),
        omega=params.omega.copy(),
        vmf=vmf,
    )


# ---------------------------------------------------------------------------
# scikit-learn front end
# ---------------------------------------------------------------------------


class MCAPRegression(BaseEstimator):
    """Estimator-style wrapper around :func:`fit`.

    ``fit`` takes a :class:`~mcapreg.data.HierarchicalDataset`; fitted state
    is exposed through trailing-underscore attributes and ``transform``
    returns the per-unit projected variances under the fitted directions.
    """

    def __init__(self, n_starts=10, max_iters=500, rel_tol=1e-6, newton_max_halvings=30,
                 omega_ridge=1e-8, centering=False, random_state=0, threads=1):
        self.n_starts = n_starts
        self.max_iters = max_iters
        self.rel_tol = rel_tol
        self.newton_max_halvings = newton_max_halvings
        self.omega_ridge = omega_ridge
        self.centering = centering
        self.random_state = random_state
        self.threads = threads

    def _config(self) -> FitConfig:
        return FitConfig(
            max_iters=self.max_iters,
            rel_tol=self.rel_tol,
            n_starts=self.n_starts,
            newton_max_halvings=self.newton_max_halvings,
            seed=self.random_state,
            omega_ridge=self.omega_ridge,
            centering=self.centering,
        )

    def fit(self, X: HierarchicalDataset, y=None):
        X.validate()
        self.result_ = fit(X, self._config(), threads=self.threads)
        params = self.result_.params
        self.params_ = params
        self.gammas_ = params.gammas
        self.mean_direction_ = params.vmf.mean_direction
        self.concentration_ = params.vmf.concentration
        self.beta0_ = params.beta0
        self.beta1_ = params.beta1
        self.beta2_ = params.beta2
        self.sigma2_ = params.sigma2
        self.omega_ = params.omega
        self.objective_ = self.result_.objective
        return self

    def transform(self, X: HierarchicalDataset) -> np.ndarray:
        """Projected variance of every unit under the fitted cluster directions."""
        if not hasattr(self, "params_"):
            raise EstimatorError("estimator is not fitted")
        pk = X.packed
        if pk.starts.shape[0] - 1 != self.gammas_.shape[0]:
            raise EstimatorError("dataset cluster count does not match the fitted model")
        return _proj_var_flat(pk.S, pk.cl, self.gammas_)

    def score(self, X: HierarchicalDataset, y=None) -> float:
        """Negative objective (higher is better), for model comparison."""
        return -neg_hlik(self.params_, X)

"""von Mises-Fisher kernel: log Bessel, density, sampling, concentration estimation.

Everything is evaluated in log space so the density stays usable at the
dimensions and concentrations this package targets (p up to ~100, kappa up
to ~1e8).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

KAPPA_CAP = 1e8

__all__ = [
    "VmfParams",
    "log_bessel_i",
    "log_cp",
    "vmf_log_density",
    "sample_vmf",
    "estimate_vmf",
    "mean_resultant_ratio",
]


@dataclass
class VmfParams:
    """Mean direction and concentration of a von Mises-Fisher law."""

    mean_direction: np.ndarray
    concentration: float
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.mean_direction = np.asarray(self.mean_direction, dtype=float)
        self.concentration = float(self.concentration)
        nrm = np.linalg.norm(self.mean_direction)
        if abs(nrm - 1.0) > 1e-12:
            raise ValueError(f"mean direction must have unit norm, got {nrm!r}")
        if not math.isfinite(self.concentration) or self.concentration < 0:
            raise ValueError(f"concentration must be finite and >= 0, got {self.concentration!r}")

    @property
    def dim(self) -> int:
        return self.mean_direction.shape[0]


def _log_bessel_series(nu: float, x: float, max_terms: int = 500) -> float:
    # ascending series of I_nu, summed in log space; converges fast for x <~ 2*nu
    log_half_x = math.log(x / 2.0)
    log_terms = []
    best = -math.inf
    for k in range(max_terms):
        lt = (2 * k + nu) * log_half_x - special.gammaln(k + 1) - special.gammaln(nu + k + 1)
        log_terms.append(lt)
        best = max(best, lt)
        if k > x / 2.0 and lt < best - 60.0:
            break
    return float(special.logsumexp(log_terms))


def log_bessel_i(order: float, x: float) -> float:
    """log of the modified Bessel function of the first kind, I_order(x).

    Valid for order >= 0 and x >= 0. Accurate to at least 10 significant
    digits over x in [0, 1e6] for the half-integer-offset orders used here.
    """
    order = float(order)
    x = float(x)
    if not (math.isfinite(order) and math.isfinite(x)):
        raise ValueError("order and argument must be finite")
    if order < 0 or x < 0:
        raise ValueError(f"log_bessel_i requires order >= 0 and x >= 0, got ({order}, {x})")
    if x == 0.0:
        return 0.0 if order == 0.0 else -math.inf
    scaled = float(special.ive(order, x))
    if scaled > 0.0 and math.isfinite(scaled):
        return math.log(scaled) + x
    # ive underflows when x is tiny relative to the order
    return _log_bessel_series(order, x)


def log_cp(p: int, kappa: float) -> float:
    """log normalizing constant of the vMF density on the (p-1)-sphere."""
    if p < 2:
        raise ValueError(f"dimension must be >= 2, got {p}")
    kappa = float(kappa)
    if not math.isfinite(kappa) or kappa < 0:
        raise ValueError(f"kappa must be finite and >= 0, got {kappa!r}")
    nu = p / 2.0 - 1.0
    if kappa == 0.0:
        # uniform density: 1 / area(S^{p-1})
        return nu * math.log(2.0) + special.gammaln(nu + 1.0) - (p / 2.0) * math.log(2.0 * math.pi)
    return nu * math.log(kappa) - (p / 2.0) * math.log(2.0 * math.pi) - log_bessel_i(nu, kappa)


def vmf_log_density(u: np.ndarray, params: VmfParams) -> float:
    """Log density of a unit vector under the given vMF parameters."""
    u = np.asarray(u, dtype=float)
    nrm = np.linalg.norm(u)
    if abs(nrm - 1.0) > 1e-8:
        raise ValueError(f"input must lie on the unit sphere, norm={nrm!r}")
    p = params.dim
    return log_cp(p, params.concentration) + params.concentration * float(params.mean_direction @ u)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _householder_to(mu: np.ndarray, samples: np.ndarray) -> np.ndarray:
    # reflect e_1 onto mu; applied to rows of samples
    p = mu.shape[0]
    v = -mu.copy()
    v[0] += 1.0
    nrm = np.linalg.norm(v)
    if nrm < 1e-14:
        return samples
    v /= nrm
    return samples - 2.0 * np.outer(samples @ v, v)


def sample_vmf(params: VmfParams, count: int, rng) -> np.ndarray:
    """Draw i.i.d. unit vectors; Wood's rejection sampler with a Householder
    rotation onto the mean direction. Reproducible given the rng/seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _as_generator(rng)
    p = params.dim
    kappa = params.concentration
    if kappa == 0.0:
        z = rng.standard_normal((count, p))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    d = p - 1.0
    b = d / (2.0 * kappa + math.sqrt(4.0 * kappa**2 + d**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d * math.log1p(-x0**2)

    ws = np.empty(count)
    filled = 0
    while filled < count:
        batch = max(count - filled, 64)
        z = rng.beta(d / 2.0, d / 2.0, size=batch)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(batch)
        ok = kappa * w + d * np.log1p(-x0 * w) - c >= np.log(u)
        take = min(int(ok.sum()), count - filled)
        ws[filled : filled + take] = w[ok][:take]
        filled += take

    tang = rng.standard_normal((count, p - 1))
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    out = np.empty((count, p))
    out[:, 0] = ws
    out[:, 1:] = np.sqrt(np.maximum(0.0, 1.0 - ws**2))[:, None] * tang
    out = _householder_to(params.mean_direction, out)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def mean_resultant_ratio(p: int, kappa: float) -> float:
    """A_p(kappa) = I_{p/2}(kappa) / I_{p/2-1}(kappa), the expected resultant length."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if kappa == 0.0:
        return 0.0
    return math.exp(log_bessel_i(p / 2.0, kappa) - log_bessel_i(p / 2.0 - 1.0, kappa))


def _solve_concentration(p: int, rbar: float) -> float:
    # safeguarded Newton on A_p(kappa) = rbar, bisection bracket kept valid
    kappa = rbar * (p - rbar**2) / (1.0 - rbar**2)
    kappa = min(max(kappa, 1e-12), KAPPA_CAP)
    lo, hi = 0.0, kappa
    while mean_resultant_ratio(p, hi) < rbar:
        lo = hi
        hi = min(hi * 2.0, KAPPA_CAP)
        if hi >= KAPPA_CAP:
            return KAPPA_CAP
    for _ in range(200):
        a = mean_resultant_ratio(p, kappa)
        f = a - rbar
        if abs(f) <= 1e-13:
            break
        if f > 0:
            hi = kappa
        else:
            lo = kappa
        fprime = 1.0 - a * a - (p - 1.0) * a / kappa
        nxt = kappa - f / fprime if fprime > 0 else math.inf
        kappa = nxt if lo < nxt < hi else 0.5 * (lo + hi)
    return kappa


def estimate_vmf(directions: np.ndarray, exact: bool = False) -> VmfParams:
    """Estimate (mean direction, concentration) from unit vectors.

    The default concentration is the closed-form approximation
    kappa = rbar (p - rbar^2) / (1 - rbar^2); with ``exact`` the likelihood
    equation A_p(kappa) = rbar is solved by safeguarded Newton.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    if directions.shape[0] < 1:
        raise ValueError("need at least one direction")
    p = directions.shape[1]
    gbar = directions.mean(axis=0)
    rbar = float(np.linalg.norm(gbar))
    if rbar < 1e-15:
        warnings.warn("zero resultant length; mean direction is arbitrary", stacklevel=2)
        mean = np.zeros(p)
        mean[0] = 1.0
        return VmfParams(mean, 0.0, degenerate=True)
    mean = gbar / rbar
    if rbar >= 1.0 - 1e-12:
        warnings.warn(f"resultant length {rbar} at the unit bound; concentration capped", stacklevel=2)
        return VmfParams(mean, KAPPA_CAP, degenerate=True)
    if exact:
        kappa = _solve_concentration(p, rbar)
    else:
        kappa = rbar * (p - rbar**2) / (1.0 - rbar**2)
    return VmfParams(mean, min(kappa, KAPPA_CAP))

"""Synthetic-data generator, single-level baseline, and the Monte-Carlo
study harness that reproduces the benchmark tables at configurable scale.

Covariance matrices are built from per-cluster eigenbases: two designated
dimensions (D2 at column 2, D4 at column 4, one-based) carry the regression
model in their eigenvalues, the remaining eigenvalues are log-normal noise.
Per-cluster eigenvectors for D2/D4 are drawn from von Mises-Fisher laws
around fixed population directions.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import HierarchicalDataset, UnitData, compute_normalizers
from .errors import EstimatorError
from .estimator import FitConfig, FitResult, _Engine, fit
from .inference import AsymptoticIntervals, BootstrapResult, asymptotic_ci, bootstrap
from .vmf import VmfParams, sample_vmf

__all__ = [
    "SimConfig",
    "SimTruth",
    "ScapResult",
    "RepRecord",
    "SimulationReport",
    "StudyConfig",
    "beta0_schedule",
    "generate",
    "run_scap",
    "evaluate",
    "aggregate",
    "run_study",
]

D2_COL = 1  # zero-based eigenbasis column of the first modeled dimension
D4_COL = 3


def beta0_schedule(p: int, start: float = 5.0, end: float = -3.0, ratio: float = 0.42) -> np.ndarray:
    """Per-dimension intercepts decaying exponentially from ``start`` to ``end``.

    Geometric decay with the given ratio, affinely rescaled so the first and
    last dimensions hit the stated endpoints exactly. Every dimension gets an
    intercept from this schedule; the modeled dimensions add covariate
    effects on top of theirs, the others use theirs as the location of their
    log-normal eigenvalue noise, so the schedule orders the eigenvalue scales.
    """
    if p < 2:
        raise ValueError("need p >= 2")
    geo = ratio ** np.arange(p)
    a = (start - end) / (geo[0] - geo[-1])
    return a * geo + (start - a * geo[0])


def _seed_key(seed, *extra) -> tuple[int, ...]:
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    return base + tuple(int(e) for e in extra)


@dataclass
class SimConfig:
    """Generator settings; defaults follow the benchmark design."""

    p: int = 5
    m: int = 20
    n_mean: int = 100
    t_mean: int = 100
    kappa_true: float = 500.0
    beta0_profile: np.ndarray | None = None
    beta1_d2: tuple = (1.0, -0.5)
    beta2_d2: tuple = (-0.5,)
    beta1_d4: tuple = (-1.0, 0.5)
    beta2_d4: tuple = (0.5,)
    noise_sd: float = 0.1
    lognormal_mean: float = 0.0
    lognormal_sd: float = 1.0
    seed: object = 0
    keep_observations: bool = True

    def __post_init__(self):
        if self.p < 5:
            raise ValueError("p must be >= 5 so dimensions D2 and D4 exist")
        if self.n_mean < 1 or self.t_mean < 1:
            raise ValueError("n_mean and t_mean must be >= 1")
        if self.beta0_profile is None:
            self.beta0_profile = beta0_schedule(self.p)
        self.beta0_profile = np.asarray(self.beta0_profile, dtype=float)

    @property
    def q1(self) -> int:
        return len(self.beta1_d4)

    @property
    def q2(self) -> int:
        return len(self.beta2_d4)


@dataclass
class SimTruth:
    """Ground truth of one generated dataset."""

    pi2: np.ndarray
    pi4: np.ndarray
    bases: list[np.ndarray]  # per-cluster orthonormal eigenbases (p, p)
    eigenvalues: list[np.ndarray]  # per-cluster (n_i, p)
    eps: np.ndarray  # (m, 2) cluster intercept noise for (D2, D4)
    theta: np.ndarray  # (m, 2, q2) cluster slope noise
    config: SimConfig

    def signal_direction(self, cluster: int, dim: str) -> np.ndarray:
        return self.bases[cluster][:, D2_COL if dim == "d2" else D4_COL]

    def population_direction(self, dim: str) -> np.ndarray:
        return self.pi2 if dim == "d2" else self.pi4

    def true_beta1(self, dim: str) -> np.ndarray:
        return np.asarray(self.config.beta1_d2 if dim == "d2" else self.config.beta1_d4, dtype=float)

    def true_beta2(self, dim: str) -> np.ndarray:
        return np.asarray(self.config.beta2_d2 if dim == "d2" else self.config.beta2_d4, dtype=float)

    def true_beta0(self, dim: str) -> float:
        return float(self.config.beta0_profile[D2_COL if dim == "d2" else D4_COL])


def _complete_basis(rng, fixed: np.ndarray, p: int) -> np.ndarray:
    raw = rng.standard_normal((p, p - fixed.shape[1]))
    raw -= fixed @ (fixed.T @ raw)
    q, _ = np.linalg.qr(raw)
    q -= fixed @ (fixed.T @ q)
    q, _ = np.linalg.qr(q)
    return q


def generate(config: SimConfig) -> tuple[HierarchicalDataset, SimTruth]:
    """Draw one hierarchical dataset together with its ground truth."""
    rng = np.random.default_rng(config.seed)
    p, m = config.p, config.m
    pi2 = np.zeros(p)
    pi2[D2_COL] = 1.0
    pi4 = np.zeros(p)
    pi4[D4_COL] = 1.0
    beta1_d2, beta1_d4 = np.asarray(config.beta1_d2), np.asarray(config.beta1_d4)
    beta2_d2, beta2_d4 = np.asarray(config.beta2_d2), np.asarray(config.beta2_d4)
    q2 = config.q2

    bases, eigenvalues, clusters = [], [], []
    eps = rng.normal(0.0, config.noise_sd, size=(m, 2))
    theta = rng.normal(0.0, config.noise_sd, size=(m, 2, q2))

    for i in range(m):
        if math.isinf(config.kappa_true):
            g2, g4 = pi2.copy(), pi4.copy()
        else:
            g2 = sample_vmf(VmfParams(pi2, config.kappa_true), 1, rng)[0]
            g4 = sample_vmf(VmfParams(pi4, config.kappa_true), 1, rng)[0]
        g4 = g4 - (g2 @ g4) * g2
        nrm = np.linalg.norm(g4)
        if nrm < 1e-8:
            raise EstimatorError("degenerate eigenvector draw: D2 and D4 directions are parallel")
        g4 /= nrm
        basis = np.empty((p, p))
        basis[:, D2_COL] = g2
        basis[:, D4_COL] = g4
        other_cols = [k for k in range(p) if k not in (D2_COL, D4_COL)]
        basis[:, other_cols] = _complete_basis(rng, np.stack([g2, g4], axis=1), p)
        bases.append(basis)

        n_i = max(2, int(rng.poisson(config.n_mean)))
        lam_cluster = np.empty((n_i, p))
        units = []
        for j in range(n_i):
            t_ij = max(2, int(rng.poisson(config.t_mean)))
            x1 = np.array([float(rng.integers(0, 2)), rng.normal(0.0, 0.5)])
            x2 = rng.normal(0.0, 0.5, size=q2)
            # noise eigenvalues are log-normal around their schedule intercepts
            lam = np.exp(config.beta0_profile + rng.normal(config.lognormal_mean, config.lognormal_sd, size=p))
            lam[D2_COL] = math.exp(
                config.beta0_profile[D2_COL] + x1 @ beta1_d2 + x2 @ (beta2_d2 + theta[i, 0]) + eps[i, 0]
            )
            lam[D4_COL] = math.exp(
                config.beta0_profile[D4_COL] + x1 @ beta1_d4 + x2 @ (beta2_d4 + theta[i, 1]) + eps[i, 1]
            )
            lam_cluster[j] = lam
            mixing = basis * np.sqrt(lam)
            y = rng.standard_normal((t_ij, p)) @ mixing.T
            units.append(
                UnitData.from_observations(
                    i, j, y, x1=x1, x2=x2, keep_observations=config.keep_observations
                )
            )
        eigenvalues.append(lam_cluster)
        clusters.append(units)

    dataset = HierarchicalDataset(clusters)
    truth = SimTruth(pi2=pi2, pi4=pi4, bases=bases, eigenvalues=eigenvalues, eps=eps, theta=theta, config=config)
    return dataset, truth


# ---------------------------------------------------------------------------
# Single-level baseline
# ---------------------------------------------------------------------------


@dataclass
class ScapResult:
    """Per-cluster single-level fits plus their across-cluster averages."""

    gammas: np.ndarray  # (m, p)
    beta0: np.ndarray  # (m,)
    beta1: np.ndarray  # (m, q1)
    beta2: np.ndarray  # (m, q2)
    objectives: np.ndarray
    gamma_mean: np.ndarray
    beta0_mean: float
    beta1_mean: np.ndarray
    beta2_mean: np.ndarray
    n_failed: int
    failed_clusters: list[int]


def _fit_single_cluster(S, T, X1, X2, hinv, hmat, config: FitConfig, seed_seq):
    # same restart scheme as the multilevel engine: smallest normalizer
    # eigenvector warm start, then perturbed eigenvectors by index
    starts = np.array([0, S.shape[0]])
    children = seed_seq.spawn(config.n_starts)
    p = S.shape[1]
    _, eigvec = np.linalg.eigh(hmat)
    best = None
    failures = []
    for k in range(config.n_starts):
        rng = np.random.default_rng(children[k])
        eng = _Engine(
            S=S, T=T, X1=X1, X2=X2, starts=starts, config=config, hinv=hinv[None],
            update_directions=True, intercept_penalty=False, slope_penalty=False, vmf_mode="off",
        )
        if k == 0:
            gam = eigvec[:, :1].T.copy()
        else:
            raw = eigvec[:, k % p] + 0.3 * rng.standard_normal(p)
            gam = (raw / np.linalg.norm(raw))[None]
        s = np.einsum("npq,p,q->n", S, gam[0], gam[0])
        try:
            eng.init_state(gam=gam, s=np.maximum(s, 0.0), b0i=np.array([math.log(gam[0] @ hmat @ gam[0])]))
            trace, converged = eng.run()
        except EstimatorError as exc:
            failures.append(str(exc))
            continue
        if best is None or trace[-1] < best[0]:
            best = (trace[-1], eng, converged)
    if best is None:
        raise EstimatorError("all starts failed: " + " | ".join(failures))
    obj, eng, converged = best
    return eng.gam[0].copy(), float(eng.b0i[0]), eng.b1.copy(), eng.b2i[0].copy(), obj


def run_scap(dataset: HierarchicalDataset, config: FitConfig | None = None) -> ScapResult:
    """Fit the flat (no random effects, no directional prior) model to every
    cluster separately, then average directions and coefficients."""
    config = config or FitConfig()
    normalizers = compute_normalizers(dataset)
    pk = dataset.packed
    m, p = dataset.n_clusters, dataset.p
    root = np.random.SeedSequence(_seed_key(config.seed, 101)).spawn(m)
    gammas = np.zeros((m, p))
    beta0 = np.zeros(m)
    beta1 = np.zeros((m, dataset.q1))
    beta2 = np.zeros((m, dataset.q2))
    objectives = np.full(m, np.nan)
    failed = []
    for i in range(m):
        sl = slice(int(pk.starts[i]), int(pk.starts[i + 1]))
        try:
            g, b0, b1, b2, obj = _fit_single_cluster(
                pk.S[sl], pk.T[sl], pk.X1[sl], pk.X2[sl],
                normalizers[i].inv_sqrt(), normalizers[i].matrix, config, root[i],
            )
        except EstimatorError:
            failed.append(i)
            continue
        gammas[i], beta0[i], beta1[i], beta2[i], objectives[i] = g, b0, b1, b2, obj
    keep = [i for i in range(m) if i not in failed]
    if not keep:
        raise EstimatorError("single-level fit failed in every cluster")
    ref = gammas[keep[0]].copy()
    acc = np.zeros(p)
    for i in keep:
        g = gammas[i] if gammas[i] @ ref >= 0 else -gammas[i]
        acc += g
        ref = acc / max(np.linalg.norm(acc), 1e-300)
    gamma_mean = acc / max(np.linalg.norm(acc), 1e-300)
    return ScapResult(
        gammas=gammas,
        beta0=beta0,
        beta1=beta1,
        beta2=beta2,
        objectives=objectives,
        gamma_mean=gamma_mean,
        beta0_mean=float(np.mean(beta0[keep])),
        beta1_mean=beta1[keep].mean(axis=0),
        beta2_mean=beta2[keep].mean(axis=0),
        n_failed=len(failed),
        failed_clusters=failed,
    )


# ---------------------------------------------------------------------------
# Metrics and the Monte-Carlo harness
# ---------------------------------------------------------------------------


def _abs_inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(abs(np.dot(a, b)))


@dataclass
class RepRecord:
    """Metrics of one Monte-Carlo replication."""

    rep: int
    mcap_sim_cluster: float
    mcap_sim_population: float
    mcap_beta11: float
    mcap_beta12: float
    mcap_beta2: float
    mcap_beta0: float
    scap_sim_cluster: float | None = None
    scap_sim_population: float | None = None
    scap_beta11: float | None = None
    scap_beta2: float | None = None
    coverage: dict = field(default_factory=dict)  # {method: {param: bool}}
    trace_monotone: bool = True


def evaluate(truth: SimTruth, mcap_result: FitResult, scap_result: ScapResult | None = None,
             boot: BootstrapResult | None = None, asym: AsymptoticIntervals | None = None,
             match_dim: str = "d4", rep: int = 0) -> RepRecord:
    """Similarity, coefficient, and coverage metrics for one replication.

    Similarities are absolute inner products, so they are sign-invariant.
    ``*_sim_cluster`` averages |<est_i, truth_i>| over clusters;
    ``*_sim_population`` compares the estimated mean direction with the
    population direction of the matched dimension.
    """
    m = truth.config.m
    params = mcap_result.params
    sims = [_abs_inner(params.gammas[i], truth.signal_direction(i, match_dim)) for i in range(m)]
    pop_dir = truth.population_direction(match_dim)
    b1_true = truth.true_beta1(match_dim)
    b2_true = truth.true_beta2(match_dim)
    b0_true = truth.true_beta0(match_dim)

    trace = np.asarray(mcap_result.objective_trace)
    record = RepRecord(
        rep=rep,
        mcap_sim_cluster=float(np.mean(sims)),
        mcap_sim_population=_abs_inner(params.vmf.mean_direction, pop_dir),
        mcap_beta11=float(params.beta1[0]),
        mcap_beta12=float(params.beta1[1]) if params.beta1.shape[0] > 1 else float("nan"),
        mcap_beta2=float(params.beta2[0]) if params.beta2.shape[0] else float("nan"),
        mcap_beta0=params.beta0,
        trace_monotone=bool(np.all(np.diff(trace) <= 0)),
    )

    if scap_result is not None:
        ssims = [
            _abs_inner(scap_result.gammas[i], truth.signal_direction(i, match_dim))
            for i in range(m)
            if i not in scap_result.failed_clusters
        ]
        record.scap_sim_cluster = float(np.mean(ssims))
        record.scap_sim_population = _abs_inner(scap_result.gamma_mean, pop_dir)
        record.scap_beta11 = float(scap_result.beta1_mean[0])
        record.scap_beta2 = float(scap_result.beta2_mean[0]) if scap_result.beta2_mean.shape[0] else float("nan")

    def _covered(lo, hi, value):
        return bool(lo <= value <= hi)

    if boot is not None:
        cov = {}
        names = boot.param_names
        targets = {"beta0": b0_true}
        for k in range(b1_true.shape[0]):
            targets[f"beta1_{k + 1}"] = float(b1_true[k])
        for k in range(b2_true.shape[0]):
            targets[f"beta2_{k + 1}"] = float(b2_true[k])
        for name, target in targets.items():
            idx = names.index(name)
            cov[name] = _covered(boot.ci[idx, 0], boot.ci[idx, 1], target)
        record.coverage["bootstrap"] = cov
    if asym is not None:
        cov = {"beta0": _covered(asym.beta0[0], asym.beta0[1], b0_true)}
        for k in range(b1_true.shape[0]):
            cov[f"beta1_{k + 1}"] = _covered(asym.beta1[k, 0], asym.beta1[k, 1], float(b1_true[k]))
        for k in range(b2_true.shape[0]):
            cov[f"beta2_{k + 1}"] = _covered(asym.beta2[k, 0], asym.beta2[k, 1], float(b2_true[k]))
        record.coverage["asymptotic"] = cov
    return record


@dataclass
class StudyConfig:
    """One Monte-Carlo study: generator config, replication count, and which
    extra analyses (baseline, bootstrap, asymptotic intervals) to run."""

    sim: SimConfig
    reps: int = 100
    fit: FitConfig = field(default_factory=FitConfig)
    with_scap: bool = False
    bootstrap_B: int = 0
    with_asymptotic: bool = False
    alpha: float = 0.05
    match_dim: str = "d4"
    threads: int = 1


@dataclass
class SimulationReport:
    """Aggregated study output, ready to serialize."""

    table1_rows: list[dict]
    coverage_rows: list[dict]
    detail_rows: list[dict]
    records: list[RepRecord]
    study_meta: dict

    def write_table1(self, path, meta_line: str = ""):
        _write_csv(
            path,
            ["p", "n", "T", "method", "gamma_similarity_mean", "gamma_similarity_se",
             "beta11_bias", "beta11_mse", "beta2_bias", "beta2_mse"],
            self.table1_rows,
            meta_line,
        )

    def write_coverage(self, path, meta_line: str = ""):
        _write_csv(path, ["p", "n", "T", "param", "method", "coverage_pct"], self.coverage_rows, meta_line)

    def write_detail(self, path, meta_line: str = ""):
        _write_csv(
            path,
            ["rep", "method", "sim_cluster_mean", "sim_population", "beta11", "beta2"],
            self.detail_rows,
            meta_line,
        )

    def write_truth(self, path):
        with open(path, "w") as fh:
            json.dump(self.study_meta, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)!r}")


def _write_csv(path, header, rows, meta_line: str = ""):
    import csv as _csv

    with open(path, "w", newline="") as fh:
        if meta_line:
            fh.write(f"# {meta_line}\n")
        writer = _csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def aggregate(records: list[RepRecord], study: StudyConfig) -> SimulationReport:
    """Fold per-replication records into benchmark-table rows."""
    sim, dim = study.sim, study.match_dim
    b1_true = np.asarray(sim.beta1_d2 if dim == "d2" else sim.beta1_d4, dtype=float)
    b2_true = np.asarray(sim.beta2_d2 if dim == "d2" else sim.beta2_d4, dtype=float)

    def _row(method, sims, b11s, b2s):
        sims, b11s, b2s = np.asarray(sims), np.asarray(b11s), np.asarray(b2s)
        return {
            "p": sim.p,
            "n": sim.n_mean,
            "T": sim.t_mean,
            "method": method,
            "gamma_similarity_mean": float(np.mean(sims)),
            "gamma_similarity_se": float(np.std(sims, ddof=1)) if sims.size > 1 else 0.0,
            "beta11_bias": float(np.mean(b11s - b1_true[0])),
            "beta11_mse": float(np.mean((b11s - b1_true[0]) ** 2)),
            "beta2_bias": float(np.mean(b2s - b2_true[0])),
            "beta2_mse": float(np.mean((b2s - b2_true[0]) ** 2)),
        }

    table1 = [_row("MCAP", [r.mcap_sim_cluster for r in records],
                   [r.mcap_beta11 for r in records], [r.mcap_beta2 for r in records])]
    if records and records[0].scap_sim_cluster is not None:
        table1.append(_row("SCAP", [r.scap_sim_cluster for r in records],
                           [r.scap_beta11 for r in records], [r.scap_beta2 for r in records]))

    coverage_rows = []
    methods = sorted({meth for r in records for meth in r.coverage})
    for meth in methods:
        params = sorted({p for r in records for p in r.coverage.get(meth, {})})
        for pname in params:
            flags = [r.coverage[meth][pname] for r in records if pname in r.coverage.get(meth, {})]
            coverage_rows.append({
                "p": sim.p, "n": sim.n_mean, "T": sim.t_mean,
                "param": pname, "method": meth,
                "coverage_pct": float(100.0 * np.mean(flags)),
            })

    detail_rows = []
    for r in records:
        detail_rows.append({"rep": r.rep, "method": "MCAP", "sim_cluster_mean": r.mcap_sim_cluster,
                            "sim_population": r.mcap_sim_population, "beta11": r.mcap_beta11,
                            "beta2": r.mcap_beta2})
        if r.scap_sim_cluster is not None:
            detail_rows.append({"rep": r.rep, "method": "SCAP", "sim_cluster_mean": r.scap_sim_cluster,
                                "sim_population": r.scap_sim_population, "beta11": r.scap_beta11,
                                "beta2": r.scap_beta2})

    study_meta = {
        "p": sim.p, "m": sim.m, "n_mean": sim.n_mean, "t_mean": sim.t_mean,
        "kappa_true": sim.kappa_true, "beta0_profile": sim.beta0_profile,
        "true_beta1": {"d2": list(sim.beta1_d2), "d4": list(sim.beta1_d4)},
        "true_beta2": {"d2": list(sim.beta2_d2), "d4": list(sim.beta2_d4)},
        "noise_sd": sim.noise_sd, "seed": sim.seed, "reps": study.reps,
        "match_dim": dim, "bootstrap_B": study.bootstrap_B, "alpha": study.alpha,
        "monotone_violations": int(sum(not r.trace_monotone for r in records)),
    }
    return SimulationReport(table1, coverage_rows, detail_rows, records, study_meta)


def _run_rep(study: StudyConfig, rep: int) -> RepRecord:
    sim_cfg = replace(
        study.sim,
        seed=_seed_key(study.sim.seed, rep, 0),
        beta0_profile=study.sim.beta0_profile.copy(),
        keep_observations=False,
    )
    dataset, truth = generate(sim_cfg)
    fit_cfg = replace(study.fit, seed=_seed_key(study.fit.seed, rep, 1))
    mcap = fit(dataset, fit_cfg)
    scap = run_scap(dataset, replace(fit_cfg, seed=_seed_key(study.fit.seed, rep, 2))) if study.with_scap else None
    boot = None
    if study.bootstrap_B:
        boot = bootstrap(dataset, mcap, B=study.bootstrap_B, alpha=study.alpha,
                         seed=_seed_key(study.fit.seed, rep, 3), config=fit_cfg)
    asym = asymptotic_ci(dataset, mcap.params, alpha=study.alpha) if study.with_asymptotic else None
    return evaluate(truth, mcap, scap, boot, asym, match_dim=study.match_dim, rep=rep)


def run_study(study: StudyConfig) -> SimulationReport:
    """Run the full Monte-Carlo loop; deterministic for any thread count."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if study.threads > 1:
            with ThreadPoolExecutor(max_workers=study.threads) as pool:
                records = list(pool.map(lambda r: _run_rep(study, r), range(study.reps)))
        else:
            records = [_run_rep(study, rep) for rep in range(study.reps)]
    return aggregate(records, study)

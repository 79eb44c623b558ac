"""Command-line interface: fit, components, bootstrap, simulate, report.

All outputs embed the seed, a hash of the effective configuration, and the
artifact version; a rerun with identical inputs and seed is byte-identical
regardless of the thread count.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .components import select_k
from .data import load_long_csv, load_precomputed
from .errors import DataValidationError, McapError
from .estimator import FitConfig, fit
from .inference import bootstrap
from .simulation import SimConfig, StudyConfig, run_study


def _config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _meta(args, parser_keys) -> dict:
    payload = {k: getattr(args, k) for k in parser_keys if hasattr(args, k)}
    return {
        "seed": args.seed,
        "config_hash": _config_hash(payload),
        "artifact_version": __version__,
    }


def _write_json(path: Path, payload: dict):
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def _meta_line(meta: dict) -> str:
    return f"seed={meta['seed']} config_hash={meta['config_hash']} version={meta['artifact_version']}"


def _load_dataset(args):
    if args.manifest:
        if not args.cov:
            raise DataValidationError("--manifest requires --cov for the covariate table")
        return load_precomputed(args.manifest, args.cov)
    if not (args.obs and args.cov):
        raise DataValidationError("provide either --obs and --cov, or --manifest and --cov")
    return load_long_csv(args.obs, args.cov, center=args.center)


def _fit_config(args) -> FitConfig:
    return FitConfig(
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        n_starts=args.starts,
        seed=args.seed,
        centering=getattr(args, "center", False),
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


_COMMON_KEYS = ["obs", "cov", "manifest", "seed", "starts", "max_iters", "rel_tol", "center"]


def cmd_fit(args) -> int:
    out = _out_dir(args)
    meta = _meta(args, _COMMON_KEYS)
    dataset = _load_dataset(args)
    result = fit(dataset, _fit_config(args), threads=args.threads)
    params = result.params.canonical_signs()
    _write_json(
        out / "params.json",
        {
            "meta": meta,
            "p": dataset.p,
            "m": dataset.n_clusters,
            "q1": dataset.q1,
            "q2": dataset.q2,
            "params": params.to_dict(),
            "objective": result.objective,
            "converged": result.converged,
            "start_index": result.start_index,
            "n_iters": result.n_iters,
            "clamp_count": result.clamp_count,
        },
    )
    with (out / "trace.csv").open("w", newline="") as fh:
        fh.write(f"# {_meta_line(meta)}\n")
        writer = csv.writer(fh)
        writer.writerow(["start", "iteration", "objective"])
        for k, trace in enumerate(result.all_traces):
            for it, obj in enumerate(trace):
                writer.writerow([k, it, repr(obj)])
    summary = [
        f"mcapreg fit ({_meta_line(meta)})",
        f"clusters: {dataset.n_clusters}  units: {dataset.n_units}  p: {dataset.p}"
        f"  q1: {dataset.q1}  q2: {dataset.q2}  total samples: {dataset.total_obs}",
        f"objective: {result.objective!r}  converged: {result.converged}"
        f"  iterations: {result.n_iters}  best start: {result.start_index}",
        f"concentration: {params.vmf.concentration!r}",
        f"beta0: {params.beta0!r}  sigma2: {params.sigma2!r}",
        f"beta1: {params.beta1.tolist()!r}",
        f"beta2: {params.beta2.tolist()!r}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return 0


def cmd_components(args) -> int:
    out = _out_dir(args)
    meta = _meta(args, _COMMON_KEYS + ["kmax", "dfd_threshold"])
    dataset = _load_dataset(args)
    comp = select_k(dataset, _fit_config(args), k_max=args.kmax, threshold=args.dfd_threshold)
    _write_json(
        out / "components.json",
        {
            "meta": meta,
            "selected_k": comp.n_components,
            "dfd_values": comp.dfd_values,
            "evaluated_dfd": comp.evaluated_dfd,
            "projections": [proj.tolist() for proj in comp.projections],
            "components": [
                {
                    "params": fr.params.canonical_signs().to_dict(),
                    "objective": fr.objective,
                    "converged": fr.converged,
                }
                for fr in comp.fits
            ],
        },
    )
    with (out / "dfd.csv").open("w", newline="") as fh:
        fh.write(f"# {_meta_line(meta)}\n")
        writer = csv.writer(fh)
        writer.writerow(["k", "dfd", "selected"])
        for k, value in enumerate(comp.evaluated_dfd, start=1):
            writer.writerow([k, repr(value), int(k <= comp.n_components)])
    return 0


def cmd_bootstrap(args) -> int:
    out = _out_dir(args)
    meta = _meta(args, _COMMON_KEYS + ["B", "alpha"])
    dataset = _load_dataset(args)
    config = _fit_config(args)
    stage0 = fit(dataset, config, threads=args.threads)
    boot = bootstrap(dataset, stage0, B=args.B, alpha=args.alpha, seed=args.seed,
                     config=config, threads=args.threads)
    q2 = dataset.q2
    with (out / "bootstrap.csv").open("w", newline="") as fh:
        fh.write(f"# {_meta_line(meta)}\n")
        writer = csv.writer(fh)
        omega_cols = [f"omega_{a + 1}_{b + 1}" for a in range(q2) for b in range(q2)]
        writer.writerow(["replicate"] + boot.param_names + ["sigma2"] + omega_cols)
        for b in range(boot.replicates.shape[0]):
            row = [b] + [repr(float(v)) for v in boot.replicates[b]]
            row.append(repr(float(boot.sigma2_reps[b])))
            row.extend(repr(float(v)) for v in np.asarray(boot.omega_reps[b]).ravel())
            writer.writerow(row)
    intervals = {
        name: {
            "estimate": float(boot.estimates[i]),
            "se": float(boot.se[i]),
            "percentile": [float(boot.ci[i, 0]), float(boot.ci[i, 1])],
            "normal": [float(boot.ci_normal[i, 0]), float(boot.ci_normal[i, 1])],
        }
        for i, name in enumerate(boot.param_names)
    }
    _write_json(
        out / "ci.json",
        {
            "meta": meta,
            "B": boot.B,
            "alpha": boot.alpha,
            "n_dropped": boot.n_dropped,
            "degenerate": boot.degenerate,
            "intervals": intervals,
            "sigma2": {"se": boot.sigma2_se, "percentile": list(boot.sigma2_ci), "canonical": False},
            "omega": {
                "se": np.asarray(boot.omega_se).ravel().tolist(),
                "percentile": np.asarray(boot.omega_ci).reshape(2, -1).T.tolist(),
                "canonical": False,
            },
        },
    )
    return 0


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    keys = ["p", "m", "n_mean", "t_mean", "kappa", "reps", "seed", "starts", "max_iters",
            "rel_tol", "B", "alpha", "scap", "asymptotic", "match_dim"]
    meta = _meta(args, keys)
    sim = SimConfig(p=args.p, m=args.m, n_mean=args.n_mean, t_mean=args.t_mean,
                    kappa_true=args.kappa, seed=args.seed)
    study = StudyConfig(
        sim=sim,
        reps=args.reps,
        fit=FitConfig(max_iters=args.max_iters, rel_tol=args.rel_tol, n_starts=args.starts, seed=args.seed),
        with_scap=args.scap,
        bootstrap_B=args.B if args.B else 0,
        with_asymptotic=args.asymptotic,
        alpha=args.alpha,
        match_dim=args.match_dim,
        threads=args.threads,
    )
    report = run_study(study)
    line = _meta_line(meta)
    report.write_table1(out / "table1.csv", line)
    report.write_coverage(out / "coverage.csv", line)
    report.write_detail(out / "similarity_detail.csv", line)
    report.study_meta["meta"] = meta
    report.write_truth(out / "truth.json")
    return 0


def _read_table(path: Path):
    rows = []
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    out = _out_dir(args)
    meta = _meta(args, ["seed"])
    sections = [f"# mcapreg report", "", f"`{_meta_line(meta)}`", ""]
    table1 = out / "table1.csv"
    if table1.exists():
        rows = _read_table(table1)
        sections += ["## Simulation performance", ""]
        sections.append("| p | n | T | Method | gamma similarity (SD) | beta11 bias | beta11 MSE | beta2 bias | beta2 MSE |")
        sections.append("|---|---|---|--------|----------------------|------------|-----------|-----------|----------|")
        for r in rows:
            sections.append(
                "| {p} | {n} | {T} | {method} | {sim:.3f} ({se:.3f}) | {b1b:.3f} | {b1m:.3f} | {b2b:.3f} | {b2m:.3f} |".format(
                    p=r["p"], n=r["n"], T=r["T"], method=r["method"],
                    sim=float(r["gamma_similarity_mean"]), se=float(r["gamma_similarity_se"]),
                    b1b=float(r["beta11_bias"]), b1m=float(r["beta11_mse"]),
                    b2b=float(r["beta2_bias"]), b2m=float(r["beta2_mse"]),
                )
            )
        sections.append("")
    coverage = out / "coverage.csv"
    if coverage.exists():
        rows = _read_table(coverage)
        if rows:
            sections += ["## Coverage of 95% confidence intervals (%)", ""]
            sections.append("| p | n | T | Parameter | Method | Coverage |")
            sections.append("|---|---|---|-----------|--------|---------|")
            for r in rows:
                sections.append(
                    "| {p} | {n} | {T} | {param} | {method} | {cov:.1f} |".format(
                        p=r["p"], n=r["n"], T=r["T"], param=r["param"], method=r["method"],
                        cov=float(r["coverage_pct"]),
                    )
                )
            sections.append("")
    ci_path = out / "ci.json"
    if ci_path.exists():
        payload = json.loads(ci_path.read_text())
        sections += ["## Estimated coefficients and bootstrap confidence intervals", ""]
        sections.append("| Covariate | Estimate | SE | 95% CI |")
        sections.append("|-----------|----------|----|--------|")
        for name, entry in sorted(payload["intervals"].items()):
            lo, hi = entry["percentile"]
            sections.append(
                f"| {name} | {entry['estimate']:.3f} | {entry['se']:.3f} | ({lo:.3f}, {hi:.3f}) |"
            )
        sections.append("")
    if len(sections) <= 4:
        raise DataValidationError(f"no report inputs (table1.csv, coverage.csv, ci.json) found in {out}")
    (out / "report.md").write_text("\n".join(sections))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcapreg", description="Multilevel covariate-assisted principal regression")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_inputs=True):
        if with_inputs:
            p.add_argument("--obs", help="long-format observations CSV")
            p.add_argument("--cov", help="covariates CSV")
            p.add_argument("--manifest", help="precomputed-covariance manifest JSON")
            p.add_argument("--center", action="store_true", help="subtract per-unit column means")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--starts", type=int, default=10)
        p.add_argument("--max-iters", type=int, default=500)
        p.add_argument("--rel-tol", type=float, default=1e-6)
        p.add_argument("--threads", type=int, default=1)

    p_fit = sub.add_parser("fit", help="fit the multilevel model")
    common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_comp = sub.add_parser("components", help="sequential component extraction")
    common(p_comp)
    p_comp.add_argument("--kmax", type=int, default=3)
    p_comp.add_argument("--dfd-threshold", type=float, default=2.0)
    p_comp.set_defaults(func=cmd_components)

    p_boot = sub.add_parser("bootstrap", help="two-stage by-cluster bootstrap")
    common(p_boot)
    p_boot.add_argument("--B", type=int, default=500)
    p_boot.add_argument("--alpha", type=float, default=0.05)
    p_boot.set_defaults(func=cmd_bootstrap)

    p_sim = sub.add_parser("simulate", help="Monte-Carlo study")
    common(p_sim, with_inputs=False)
    p_sim.add_argument("--p", type=int, default=5)
    p_sim.add_argument("--m", type=int, default=20)
    p_sim.add_argument("--n-mean", type=int, default=100)
    p_sim.add_argument("--t-mean", type=int, default=100)
    p_sim.add_argument("--kappa", type=float, default=500.0)
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--B", type=int, default=0, help="bootstrap replicates per rep (0 = skip)")
    p_sim.add_argument("--alpha", type=float, default=0.05)
    p_sim.add_argument("--scap", action="store_true", help="also run the single-level baseline")
    p_sim.add_argument("--asymptotic", action="store_true", help="also compute asymptotic intervals")
    p_sim.add_argument("--match-dim", choices=["d2", "d4"], default="d4")
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("report", help="render Markdown tables from run artifacts")
    p_rep.add_argument("--out", required=True, help="directory holding earlier artifacts")
    p_rep.add_argument("--seed", type=int, default=0)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return args.func(args)
    except DataValidationError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except McapError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

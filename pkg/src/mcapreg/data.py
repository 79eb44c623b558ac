"""Hierarchical dataset model: clusters of units carrying sample covariance
matrices, covariates, and the per-cluster normalizers used by the optimizer.

Datasets can be built from raw time series or from precomputed covariance
matrices; both paths produce identical downstream state. After validation a
dataset is treated as immutable and is safe to share across workers.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataValidationError, DegenerateClusterError

__all__ = [
    "UnitData",
    "HierarchicalDataset",
    "ClusterNormalizer",
    "compute_sample_cov",
    "compute_normalizers",
    "validate",
    "load_long_csv",
    "load_precomputed",
    "to_long_csv",
]


def compute_sample_cov(observations: np.ndarray, center: bool = False) -> np.ndarray:
    """Second-moment matrix (1/T) Y'Y of a T x p observation matrix.

    With ``center`` the column means are subtracted first; the divisor
    stays T either way. The output is exactly symmetric.
    """
    y = np.asarray(observations, dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise DataValidationError(f"observations must be a T x p matrix with T >= 1, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DataValidationError("observations contain non-finite entries")
    if center:
        y = y - y.mean(axis=0)
    s = (y.T @ y) / y.shape[0]
    return (s + s.T) / 2.0


@dataclass
class UnitData:
    """One unit: its sample covariance, sample count, and covariates."""

    cluster_id: int
    unit_id: int
    x1: np.ndarray
    x2: np.ndarray
    sample_cov: np.ndarray
    n_samples: int
    observations: np.ndarray | None = None
    centered: bool = False

    def __post_init__(self):
        self.x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        self.x2 = np.atleast_1d(np.asarray(self.x2, dtype=float))
        s = np.asarray(self.sample_cov, dtype=float)
        self.sample_cov = (s + s.T) / 2.0
        self.n_samples = int(self.n_samples)
        if self.observations is not None:
            self.observations = np.asarray(self.observations, dtype=float)

    @classmethod
    def from_observations(cls, cluster_id, unit_id, observations, x1, x2, center=False, keep_observations=True):
        observations = np.asarray(observations, dtype=float)
        cov = compute_sample_cov(observations, center=center)
        return cls(
            cluster_id=cluster_id,
            unit_id=unit_id,
            x1=x1,
            x2=x2,
            sample_cov=cov,
            n_samples=observations.shape[0],
            observations=observations if keep_observations else None,
            centered=center,
        )

    @property
    def p(self) -> int:
        return self.sample_cov.shape[0]


@dataclass
class ClusterNormalizer:
    """Sample-size weighted average covariance of one cluster (fixed during fits)."""

    matrix: np.ndarray

    def inv_sqrt(self) -> np.ndarray:
        """Symmetric inverse square root, via eigendecomposition."""
        w, v = np.linalg.eigh(self.matrix)
        if w[0] <= 0:
            raise DegenerateClusterError(f"normalizer not positive definite (min eigenvalue {w[0]!r})")
        return (v / np.sqrt(w)) @ v.T


class _Packed:
    """Flat per-unit arrays for vectorized likelihood work."""

    __slots__ = ("S", "T", "X1", "X2", "cl", "starts", "sizes")

    def __init__(self, dataset: "HierarchicalDataset"):
        units = [u for cluster in dataset.clusters for u in cluster]
        self.S = np.stack([u.sample_cov for u in units])
        self.T = np.array([u.n_samples for u in units], dtype=float)
        self.X1 = np.stack([u.x1 for u in units]) if dataset.q1 else np.zeros((len(units), 0))
        self.X2 = np.stack([u.x2 for u in units]) if dataset.q2 else np.zeros((len(units), 0))
        self.sizes = np.array([len(c) for c in dataset.clusters])
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)])
        self.cl = np.repeat(np.arange(len(dataset.clusters)), self.sizes)


class HierarchicalDataset:
    """Ordered clusters of :class:`UnitData` with shared dimensions."""

    def __init__(self, clusters: list[list[UnitData]]):
        self.clusters = [list(c) for c in clusters]
        first = self.clusters[0][0] if self.clusters and self.clusters[0] else None
        self.p = first.p if first is not None else 0
        self.q1 = first.x1.shape[0] if first is not None else 0
        self.q2 = first.x2.shape[0] if first is not None else 0
        self.total_obs = int(sum(u.n_samples for c in self.clusters for u in c))
        self._packed: _Packed | None = None

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_units(self) -> int:
        return sum(len(c) for c in self.clusters)

    def cluster_sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    def units(self):
        for cluster in self.clusters:
            yield from cluster

    @property
    def packed(self) -> _Packed:
        if self._packed is None:
            self._packed = _Packed(self)
        return self._packed

    def validate(self) -> "HierarchicalDataset":
        return validate(self)


def validate(dataset: HierarchicalDataset) -> HierarchicalDataset:
    """Check every dataset invariant, reporting all violations at once."""
    bad = []
    if dataset.n_clusters < 1:
        raise DataValidationError("dataset has no clusters")
    if dataset.p < 2:
        bad.append(f"dimension p must be >= 2, got {dataset.p}")
    for i, cluster in enumerate(dataset.clusters):
        if not cluster:
            bad.append(f"cluster {i} is empty")
            continue
        for j, u in enumerate(cluster):
            tag = f"(cluster {i}, unit {j})"
            if u.p != dataset.p:
                bad.append(f"dimension mismatch {tag}: p={u.p}, expected {dataset.p}")
                continue
            if u.x1.shape[0] != dataset.q1 or u.x2.shape[0] != dataset.q2:
                bad.append(
                    f"covariate mismatch {tag}: (q1={u.x1.shape[0]}, q2={u.x2.shape[0]}),"
                    f" expected ({dataset.q1}, {dataset.q2})"
                )
            if u.n_samples < 1:
                bad.append(f"sample count must be >= 1 {tag}")
            if not (np.all(np.isfinite(u.x1)) and np.all(np.isfinite(u.x2))):
                bad.append(f"non-finite covariate {tag}")
            if not np.all(np.isfinite(u.sample_cov)):
                bad.append(f"non-finite covariance entries {tag}")
                continue
            scale = np.abs(u.sample_cov).max()
            if np.abs(u.sample_cov - u.sample_cov.T).max() > 1e-12 * max(scale, 1e-300):
                bad.append(f"covariance not symmetric {tag}")
            eigmin = float(np.linalg.eigvalsh(u.sample_cov)[0])
            if eigmin < -1e-10 * max(scale, 1e-300):
                bad.append(f"covariance not positive semidefinite {tag}: min eigenvalue {eigmin!r}")
            if u.observations is not None:
                if u.observations.shape != (u.n_samples, dataset.p):
                    bad.append(f"observation shape mismatch {tag}")
                else:
                    recomputed = compute_sample_cov(u.observations, center=u.centered)
                    if np.abs(recomputed - u.sample_cov).max() > 1e-10 * max(scale, 1.0):
                        bad.append(f"cached covariance disagrees with observations {tag}")
    recount = sum(u.n_samples for c in dataset.clusters for u in c)
    if recount != dataset.total_obs:
        bad.append(f"total sample count mismatch: stored {dataset.total_obs}, recomputed {recount}")
    if bad:
        raise DataValidationError(bad)
    return dataset


def compute_normalizers(dataset: HierarchicalDataset) -> list[ClusterNormalizer]:
    """Weighted average covariance per cluster, ridge-repaired to stay PD."""
    out = []
    for i, cluster in enumerate(dataset.clusters):
        weights = np.array([u.n_samples for u in cluster], dtype=float)
        h = sum(w * u.sample_cov for w, u in zip(weights, cluster)) / weights.sum()
        h = (h + h.T) / 2.0
        tr = float(np.trace(h))
        eigmin = float(np.linalg.eigvalsh(h)[0])
        if eigmin < 1e-10 * tr / dataset.p:
            h = h + (1e-8 * tr / dataset.p) * np.eye(dataset.p)
            eigmin = float(np.linalg.eigvalsh(h)[0])
        if eigmin <= 0 or tr <= 0:
            raise DegenerateClusterError(f"cluster {i} normalizer is singular even after ridge repair")
        out.append(ClusterNormalizer(h))
    return out


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------


def _read_rows(path, expected_header):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for name in expected_header:
            if name not in header:
                raise DataValidationError(f"{path}: missing required column {name!r} (line 1)")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataValidationError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            parsed = []
            for name, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataValidationError(f"{path}: line {lineno}: cannot parse {cell!r} in column {name!r}") from None
            rows.append(parsed)
    return header, rows


def _read_covariates(cov_path):
    header, rows = _read_rows(cov_path, ("cluster_id", "unit_id"))
    x1_cols = [h for h in header if h.startswith("x1_")]
    x2_cols = [h for h in header if h.startswith("x2_")]
    x1_cols.sort(key=lambda h: int(h.split("_")[1]))
    x2_cols.sort(key=lambda h: int(h.split("_")[1]))
    idx = {name: header.index(name) for name in header}
    covs = {}
    for row in rows:
        key = (int(row[idx["cluster_id"]]), int(row[idx["unit_id"]]))
        if key in covs:
            raise DataValidationError(f"{cov_path}: duplicate covariate row for cluster/unit {key}")
        x1 = np.array([row[idx[c]] for c in x1_cols])
        x2 = np.array([row[idx[c]] for c in x2_cols])
        covs[key] = (x1, x2)
    return covs


def _assemble(unit_map, covs, origin):
    units = []
    for key in unit_map:
        if key not in covs:
            raise DataValidationError(f"{origin}: no covariate row for cluster/unit {key}")
    for key, cov in covs.items():
        if key not in unit_map:
            raise DataValidationError(f"{origin}: covariates for unknown cluster/unit {key}")
    for (cid, uid), payload in unit_map.items():
        x1, x2 = covs[(cid, uid)]
        units.append((cid, uid, x1, x2, payload))
    units.sort(key=lambda t: (t[0], t[1]))
    clusters = []
    for cid, uid, x1, x2, (cov_matrix, n_samples, obs, centered) in units:
        if not clusters or clusters[-1][0] != cid:
            clusters.append((cid, []))
        clusters[-1][1].append(
            UnitData(
                cluster_id=cid,
                unit_id=uid,
                x1=x1,
                x2=x2,
                sample_cov=cov_matrix,
                n_samples=n_samples,
                observations=obs,
                centered=centered,
            )
        )
    return HierarchicalDataset([c for _, c in clusters])


def load_long_csv(obs_path, cov_path, center: bool = False) -> HierarchicalDataset:
    """Build a dataset from a long-format observation CSV plus a covariate CSV.

    Observation columns: cluster_id, unit_id, t, v1..vp. Covariate columns:
    cluster_id, unit_id, x1_1..x1_q1, x2_1..x2_q2.
    """
    header, rows = _read_rows(obs_path, ("cluster_id", "unit_id", "t"))
    v_cols = [h for h in header if h.startswith("v")]
    v_cols.sort(key=lambda h: int(h[1:]))
    idx = {name: header.index(name) for name in header}
    grouped: dict[tuple[int, int], list] = {}
    for row in rows:
        key = (int(row[idx["cluster_id"]]), int(row[idx["unit_id"]]))
        grouped.setdefault(key, []).append((row[idx["t"]], [row[idx[c]] for c in v_cols]))
    unit_map = {}
    for key, samples in grouped.items():
        samples.sort(key=lambda s: s[0])
        y = np.array([v for _, v in samples])
        unit_map[key] = (compute_sample_cov(y, center=center), y.shape[0], y, center)
    return _assemble(unit_map, _read_covariates(cov_path), obs_path).validate()


def load_precomputed(manifest_path, cov_path) -> HierarchicalDataset:
    """Build a dataset from a manifest of per-unit covariance CSV files.

    The manifest is JSON: a list (or ``{"units": [...]}``) of records with
    keys cluster_id, unit_id, T_ij, path; each path points at a p x p CSV
    matrix, resolved relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    try:
        spec = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{manifest_path}: invalid JSON ({exc})") from None
    records = spec["units"] if isinstance(spec, dict) else spec
    unit_map = {}
    for rec in records:
        try:
            key = (int(rec["cluster_id"]), int(rec["unit_id"]))
            t_ij = int(rec["T_ij"])
            rel = rec["path"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataValidationError(f"{manifest_path}: malformed record {rec!r} ({exc})") from None
        matrix_path = manifest_path.parent / rel
        with matrix_path.open(newline="") as fh:
            matrix = []
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    matrix.append([float(c) for c in row])
                except ValueError:
                    raise DataValidationError(f"{matrix_path}: line {lineno}: non-numeric entry") from None
        s = np.array(matrix)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise DataValidationError(f"{matrix_path}: expected a square matrix, got shape {s.shape}")
        unit_map[key] = (s, t_ij, None, False)
    return _assemble(unit_map, _read_covariates(cov_path), manifest_path).validate()


def to_long_csv(dataset: HierarchicalDataset, obs_path, cov_path) -> None:
    """Write a dataset (with raw observations) back to the long CSV pair."""
    with Path(obs_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_id", "unit_id", "t"] + [f"v{k + 1}" for k in range(dataset.p)])
        for u in dataset.units():
            if u.observations is None:
                raise DataValidationError(f"unit ({u.cluster_id}, {u.unit_id}) has no raw observations")
            for t, row in enumerate(u.observations):
                writer.writerow([u.cluster_id, u.unit_id, t] + [repr(float(v)) for v in row])
    with Path(cov_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["cluster_id", "unit_id"]
            + [f"x1_{k + 1}" for k in range(dataset.q1)]
            + [f"x2_{k + 1}" for k in range(dataset.q2)]
        )
        for u in dataset.units():
            writer.writerow([u.cluster_id, u.unit_id] + [repr(float(v)) for v in u.x1] + [repr(float(v)) for v in u.x2])

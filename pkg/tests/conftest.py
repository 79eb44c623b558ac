import numpy as np
import pytest

from mcapreg.data import HierarchicalDataset, UnitData
from mcapreg.likelihood import MCAPParams
from mcapreg.vmf import VmfParams

FIXTURES = __file__.rsplit("/", 1)[0] + "/fixtures"


def make_dataset(rng, m=2, n=3, t=4, p=3, q1=1, q2=1, scales=None, keep_observations=True):
    """Small random dataset with anisotropic covariances."""
    scales = scales if scales is not None else np.linspace(1.5, 0.3, p)
    clusters = []
    for i in range(m):
        units = []
        q, _ = np.linalg.qr(rng.standard_normal((p, p)))
        for j in range(n):
            cov = q @ np.diag(scales * np.exp(rng.normal(0, 0.3, p))) @ q.T
            y = rng.standard_normal((t, p)) @ np.linalg.cholesky(cov).T
            units.append(
                UnitData.from_observations(
                    i, j, y,
                    x1=rng.standard_normal(q1),
                    x2=rng.standard_normal(q2),
                    keep_observations=keep_observations,
                )
            )
        clusters.append(units)
    return HierarchicalDataset(clusters).validate()


def random_params(rng, m=2, p=3, q1=1, q2=1, kappa=2.0):
    gam = rng.standard_normal((m, p))
    gam /= np.linalg.norm(gam, axis=1, keepdims=True)
    mu = rng.standard_normal(p)
    mu /= np.linalg.norm(mu)
    a = rng.standard_normal((q2, q2))
    omega = a @ a.T + np.eye(q2)
    return MCAPParams(
        gammas=gam,
        beta0i=rng.normal(0, 0.5, m),
        beta1=rng.normal(0, 0.3, q1),
        beta2i=rng.normal(0, 0.3, (m, q2)),
        beta0=rng.normal(0, 0.3),
        sigma2=0.5 + rng.random(),
        beta2=rng.normal(0, 0.3, q2),
        omega=omega,
        vmf=VmfParams(mu, kappa),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset(rng):
    return make_dataset(rng)


@pytest.fixture
def small_params(rng, small_dataset):
    return random_params(rng, m=small_dataset.n_clusters, p=small_dataset.p,
                         q1=small_dataset.q1, q2=small_dataset.q2)

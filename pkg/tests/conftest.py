import numpy as np
import pytest

from trialcea.data import TrialDataset
from trialcea.simulate import generate_trial, reference_dgp


@pytest.fixture
def tiny_dataset():
    """Four subjects, one missing cost cell."""
    return TrialDataset(
        z=[1, 1, 0, 0],
        d=[1, 0, 0, 0],
        y1=[10.0, np.nan, 2.0, 4.0],
        y2=[0.9, 0.8, 0.7, 0.6],
        covariates={"eq5d0": np.array([0.5, 0.6, 0.7, 0.8])},
    )


@pytest.fixture
def complete_trial():
    """Moderate complete dataset from the confounded reference scenario."""
    ds, truth = generate_trial(reference_dgp(n=1500, seed=8))
    return ds, truth


def random_iv_dataset(rng, n=80, covariates=0):
    """Small random dataset with guaranteed instrument relevance."""
    while True:
        z = rng.integers(0, 2, n)
        comply = rng.random(n) < 0.7
        d = np.where(comply, z, rng.integers(0, 2, n))
        if 0 < d.mean() < 1 and abs(d[z == 1].mean() - d[z == 0].mean()) > 0.2:
            break
    covs = {f"x{j}": rng.normal(size=n) for j in range(covariates)}
    y1 = 5.0 + 2.0 * d + rng.normal(size=n)
    y2 = 1.0 + 0.5 * d + rng.normal(size=n)
    for j, col in enumerate(covs.values()):
        y1 = y1 + 0.3 * col
        y2 = y2 - 0.2 * col
    return TrialDataset(z=z, d=d, y1=y1, y2=y2, covariates=covs)

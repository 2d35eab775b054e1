import numpy as np
import pytest

from robdesign.sieve import SieveBasis, estimate_moments
from robdesign.sim import BanditDgp


@pytest.fixture(scope="session")
def bandit_basis():
    return SieveBasis.bandit_default()


@pytest.fixture(scope="session")
def bandit_moments(bandit_basis):
    """Moments of the bandit covariate law from 50k historical draws."""
    dgp = BanditDgp.setup1()
    rng = np.random.default_rng(np.random.SeedSequence((2024, 0x30)))
    draws = dgp.draw_covariates(rng, 50_000)
    return estimate_moments(bandit_basis, draws, nu2=0.005)

import os

import matplotlib
import pytest

from mblflow.entities import Disorder, ModelParams
from mblflow.model import sample_disorder

matplotlib.use("Agg")

ACCEPTANCE_ENV_VAR = "MBLFLOW_RUN_ACCEPTANCE"


@pytest.fixture(scope="function")
def acceptance():
    """
    Gate for full-scale Monte Carlo checks that take minutes.

    Enabled via MBLFLOW_RUN_ACCEPTANCE=1.
    """
    if os.getenv(ACCEPTANCE_ENV_VAR) != "1":
        pytest.skip(f"set {ACCEPTANCE_ENV_VAR}=1 to run acceptance checks")


@pytest.fixture(scope="function")
def three_site_disorder() -> Disorder:
    return Disorder(
        h=(0.3, -0.5, 0.8),
        Gamma=(0.4, -0.2, 0.9),
        J=(0.1, -0.6, 0.25, 0.7),
        gamma=0.05,
    )


@pytest.fixture(scope="function")
def make_disorder():
    """Seeded uniform disorder for a given chain length and gamma."""

    def _make(n: int, gamma: float, seed: int = 0, **kwargs) -> Disorder:
        return sample_disorder(seed, ModelParams(n=n, gamma=gamma, **kwargs))

    return _make

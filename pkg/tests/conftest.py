import math

import numpy as np
import pytest


def family_z(n_tests: int, per_test_z: float = 3.0, dof: int | None = None) -> float:
    """Threshold so that n_tests simultaneous comparisons keep the family
    false-alarm rate of a single comparison at per_test_z.

    "Every entry within k sigma" claims over many entries are impossible at
    the per-entry threshold (a few chance excursions are certain); the Sidak
    correction keeps the claim's intended meaning. With ``dof`` set the
    statistic is treated as Student-t (block-estimated standard errors).
    """
    from scipy.stats import norm, t

    alpha = 2.0 * norm.sf(per_test_z)
    alpha_each = 1.0 - (1.0 - alpha) ** (1.0 / n_tests)
    dist = t(dof) if dof is not None else norm
    return float(dist.isf(alpha_each / 2.0))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240810)

from __future__ import annotations

import pytest

from periodic_qcd.law import Gaussian, PeriodicLaw

PRE_MEANS = (0.0, 0.5, 1.0, 0.5)


def shifted_law(shift: float, variance: float = 1.0, means: tuple[float, ...] = PRE_MEANS) -> PeriodicLaw:
    return PeriodicLaw.of([Gaussian(m + shift, variance) for m in means])


@pytest.fixture
def pre_law() -> PeriodicLaw:
    return shifted_law(0.0)


@pytest.fixture
def post_law() -> PeriodicLaw:
    return shifted_law(1.0)

import pytest

from ouro import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    # Scan every op output for NaN/Inf while tests run.
    prev = T.set_finite_checks(True)
    yield
    T.set_finite_checks(prev)

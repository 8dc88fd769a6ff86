"""Shared fixtures: quadrature grids and the four reference targets.

Session-scoped because grid construction and target normalization are
the expensive parts of the suite; every test file reads them without
mutation (the peak target's sampler lattice is a deterministic cache).
"""

import pytest

from so3flow import so3, targets


@pytest.fixture(scope="session")
def grid5():
    return targets._default_grid()


@pytest.fixture(scope="session")
def grid2():
    return so3.fibonacci_hopf_grid(200_000)


@pytest.fixture(scope="session")
def audit_grid():
    # independent of the normalization grid so mass checks are honest
    return so3.fibonacci_hopf_grid(400_000)


@pytest.fixture(scope="session")
def peak400(grid5):
    return targets.make_target("peak", 400.0, grid=grid5)


@pytest.fixture(scope="session")
def cube40(grid5):
    return targets.make_target("cube24", 40.0, grid=grid5)


@pytest.fixture(scope="session")
def cone40(grid5):
    return targets.make_target("cone-cyclic", 40.0, grid=grid5)


@pytest.fixture(scope="session")
def line40(grid5):
    return targets.make_target("line3", 40.0, grid=grid5)

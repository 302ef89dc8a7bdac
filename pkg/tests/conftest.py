import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from precor.sparse import CsrMatrix

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_sparse(rng, n_rows, n_cols, density=0.3):
    M = rng.standard_normal((n_rows, n_cols)) * (rng.random((n_rows, n_cols)) < density)
    return CsrMatrix.from_dense(M)


def random_spd(rng, n, density=0.3):
    B = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    S = B + B.T
    S += np.diag(np.abs(S).sum(axis=1) + 1.0)
    return CsrMatrix.from_dense(S)


@st.composite
def sparse_matrices(draw, max_n=12):
    n_rows = draw(st.integers(1, max_n))
    n_cols = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    density = draw(st.floats(0.0, 1.0))
    return random_sparse(np.random.default_rng(seed), n_rows, n_cols, density)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])

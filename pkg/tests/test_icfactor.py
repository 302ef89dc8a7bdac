import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from precor.errors import FactorizationError
from precor.icfactor import (CholeskyFactor, FactorizationConfig, apply_preconditioner, factorize, ic0, ict,
                             load_factor, save_factor)
from precor.pdegen import assemble_poisson, make_system
from precor.sparse import CsrMatrix, lower_triangle, spmv, tri_solve_lower, tri_solve_upper

from conftest import random_spd


def textbook_ic0(A):
    """Right-looking IC(0) on a dense copy, updates restricted to the pattern."""
    A = np.asarray(A, dtype=float)
    n = len(A)
    S = np.tril(A != 0)
    L = np.tril(A).copy()
    for k in range(n):
        L[k, k] = math.sqrt(L[k, k])
        for i in range(k + 1, n):
            if S[i, k]:
                L[i, k] /= L[k, k]
        for j in range(k + 1, n):
            for i in range(j, n):
                if S[i, j]:
                    L[i, j] -= L[i, k] * L[j, k]
    return L


def tridiag(n):
    return CsrMatrix.from_dense(2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1))


def test_ic0_diagonal():
    d = np.array([4.0, 9.0, 2.0])
    F = ic0(CsrMatrix.diag(d))
    np.testing.assert_array_equal(F.L.to_dense(), np.diag(np.sqrt(d)))
    assert F.provenance == "ic0" and F.source_shift == 0.0


def test_ic0_tridiagonal_is_exact_cholesky():
    A = tridiag(8)
    L = ic0(A).L.to_dense()
    ref = np.linalg.cholesky(A.to_dense())
    np.testing.assert_allclose(L, ref, rtol=1e-12)


def test_ic0_matches_textbook_on_laplacian():
    A = assemble_poisson(4)
    F = ic0(A)
    low = lower_triangle(A)
    np.testing.assert_array_equal(F.L.row_ptr, low.row_ptr)
    np.testing.assert_array_equal(F.L.col_idx, low.col_idx)
    np.testing.assert_allclose(F.L.to_dense(), textbook_ic0(A.to_dense()), rtol=1e-13, atol=1e-15)
    # L L^T reproduces A on the pattern (the defect lives off it)
    P = F.L.to_dense() @ F.L.to_dense().T
    mask = A.to_dense() != 0
    np.testing.assert_allclose(P[mask], A.to_dense()[mask], rtol=1e-12, atol=1e-12)


def test_ic0_matches_textbook_on_diffusion():
    A = make_system("diffusion", 6, 0.7, 3).A
    np.testing.assert_allclose(ic0(A).L.to_dense(), textbook_ic0(A.to_dense()), rtol=1e-12, atol=1e-14)


@given(st.integers(2, 20), st.integers(0, 2**32 - 1))
def test_ic0_pattern_and_positive_diagonal(n, seed):
    A = random_spd(np.random.default_rng(seed), n)
    F = ic0(A)
    low = lower_triangle(A)
    np.testing.assert_array_equal(F.L.col_idx, low.col_idx)
    np.testing.assert_array_equal(F.L.row_ptr, low.row_ptr)
    assert F.has_positive_diagonal()


def test_ic0_breakdown_shift_recorded():
    # singular PSD: the second pivot is exactly zero without a shift
    A = CsrMatrix.from_dense([[1.0, 1.0], [1.0, 1.0]])
    F = ic0(A)
    assert F.source_shift == 1e-10
    assert F.has_positive_diagonal()


def test_ic0_unresolved_breakdown():
    A = CsrMatrix.from_dense([[1.0, 5.0], [5.0, 1.0]])
    with pytest.raises(FactorizationError) as info:
        ic0(A)
    assert info.value.shift == 1e-2


def test_ic0_rejects_nonpositive_diagonal():
    with pytest.raises(ValueError):
        ic0(CsrMatrix.from_dense([[0.0, 0.0], [0.0, 1.0]]))


def test_ict_without_fill_equals_ic0():
    A = make_system("diffusion", 8, 0.5, 11).A
    F = ict(A, FactorizationConfig("ict", p=0, tau=math.inf))
    G = ic0(A)
    np.testing.assert_array_equal(F.L.col_idx, G.L.col_idx)
    np.testing.assert_allclose(F.L.values, G.L.values, rtol=1e-14)
    assert F.provenance == "ict(0,inf)"


@pytest.mark.parametrize("p,target", [(1, 0.3785), (5, 0.7547)])
def test_ict_density_grid32(p, target):
    A = make_system("diffusion", 32, 0.5, 5).A
    F = ict(A, FactorizationConfig("ict", p=p))
    density = 100 * F.L.nnz / A.n_rows**2
    assert abs(density / target - 1) <= 0.05


@given(st.integers(2, 16), st.integers(0, 5), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1))
def test_ict_nnz_bound(n, p, tau, seed):
    A = random_spd(np.random.default_rng(seed), n, 0.4)
    F = ict(A, FactorizationConfig("ict", p=p, tau=tau))
    assert F.L.nnz <= lower_triangle(A).nnz + p * n
    assert F.L.is_lower_triangular()
    assert F.has_positive_diagonal()
    # entries of lower(A) are always kept
    low = lower_triangle(A).to_dense() != 0
    assert np.all(F.L.to_dense()[low] != 0) or F.source_shift > 0


def test_ict_full_fill_is_exact_cholesky(rng):
    A = random_spd(rng, 10, 0.3)
    F = ict(A, FactorizationConfig("ict", p=10, tau=0.0))
    np.testing.assert_allclose(F.L.to_dense(), np.linalg.cholesky(A.to_dense()), rtol=1e-10, atol=1e-12)


def test_ict_is_better_than_ic0():
    s = make_system("diffusion", 16, 0.5, 2)
    from precor.pcg import pcg_solve
    _, r0 = pcg_solve(s.A, s.b, ic0(s.A))
    _, r1 = pcg_solve(s.A, s.b, factorize(s.A, FactorizationConfig("ict", p=5)))
    assert r1.iterations < r0.iterations


def test_config_validation():
    with pytest.raises(ValueError):
        FactorizationConfig("ilu")
    with pytest.raises(ValueError):
        FactorizationConfig("ict", p=-1)
    assert FactorizationConfig("ict", p=3).label == "ict(3)"


def test_apply_preconditioner_examples(rng):
    r = rng.standard_normal(4)
    np.testing.assert_array_equal(apply_preconditioner(CholeskyFactor(CsrMatrix.identity(4), "ic0"), r), r)
    d = np.array([1.0, 4.0, 9.0, 0.25])
    F = CholeskyFactor(CsrMatrix.diag(np.sqrt(d)), "ic0")
    np.testing.assert_allclose(apply_preconditioner(F, r), r / d, rtol=1e-15)
    A = random_spd(rng, 6, 1.0)
    F = CholeskyFactor(CsrMatrix.from_dense(np.linalg.cholesky(A.to_dense())), "ict(6,0)")
    x = rng.standard_normal(6)
    np.testing.assert_allclose(apply_preconditioner(F, spmv(A, x)), x, rtol=1e-10)


def test_factor_rejects_upper():
    with pytest.raises(ValueError):
        CholeskyFactor(CsrMatrix.from_dense([[1.0, 1.0], [0.0, 1.0]]), "ic0")


@given(st.integers(2, 15), st.integers(0, 2**32 - 1))
def test_preconditioned_operator_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n)
    F = ic0(A)

    def S(v):
        return tri_solve_lower(F.L, spmv(A, tri_solve_upper(F.Lt, v)))

    u, v = rng.standard_normal(n), rng.standard_normal(n)
    a, b = u @ S(v), S(u) @ v
    assert abs(a - b) <= 1e-10 * max(abs(a), np.linalg.norm(u) * np.linalg.norm(S(v)))


def test_factor_round_trip(tmp_path):
    A = make_system("diffusion", 8, 0.5, 1).A
    F = ict(A, FactorizationConfig("ict", p=2))
    save_factor(F, tmp_path / "f")
    G = load_factor(tmp_path / "f")
    np.testing.assert_array_equal(G.L.values, F.L.values)
    np.testing.assert_array_equal(G.L.col_idx, F.L.col_idx)
    assert (G.provenance, G.source_shift, G.meta) == (F.provenance, F.source_shift, F.meta)

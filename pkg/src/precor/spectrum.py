"""Spectral diagnostics for A and for preconditioned operators.

``(L L^T)^{-1} A`` is handled through its symmetric similar form
``L^{-1} A L^{-T}``, which has the same eigenvalues.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import _kernels
from .errors import DimensionError
from .icfactor import CholeskyFactor
from .sparse import CsrMatrix, as_vector, spmv, tri_solve_lower, tri_solve_upper

DENSE_LIMIT = 4096
HISTOGRAM_BINS = 100


@dataclass
class SpectrumReport:
    lambda_min: float
    lambda_max: float
    kappa: float
    method: str  # "dense" or "lanczos"
    operator: str  # "A" or "precond(A,L)"
    err_min: float = 0.0
    err_max: float = 0.0
    iterations: int = 0
    breakdown: bool = False


class PrecondOperator:
    """Matrix-free ``v -> L^{-1} A L^{-T} v`` (or ``A v`` without a factor)."""

    def __init__(self, factor: CholeskyFactor | None, A: CsrMatrix):
        if A.n_rows != A.n_cols:
            raise DimensionError("A must be square")
        if factor is not None and factor.n != A.n_rows:
            raise DimensionError("factor and matrix sizes differ")
        self.factor = factor
        self.A = A
        self.n = A.n_rows
        self.label = "A" if factor is None else "precond(A,L)"

    @property
    def shape(self):
        return (self.n, self.n)

    def matvec(self, v) -> np.ndarray:
        if self.factor is None:
            return spmv(self.A, v)
        w = tri_solve_upper(self.factor.Lt, v)
        return tri_solve_lower(self.factor.L, spmv(self.A, w))

    __call__ = matvec

    def to_dense(self) -> np.ndarray:
        cols = [self.matvec(e) for e in np.eye(self.n)]
        M = np.array(cols).T
        return 0.5 * (M + M.T)


def precond_operator(factor: CholeskyFactor | None, A: CsrMatrix) -> PrecondOperator:
    return PrecondOperator(factor, A)


def extremal_eigs_lanczos(op, n: int, iters: int | None = None, seed: int = 0) -> SpectrumReport:
    """Lanczos with full (twice repeated) reorthogonalisation.

    ``err_min``/``err_max`` are the residual norms ``|beta_m s_m|`` of the
    extremal Ritz pairs. An invariant subspace ends the iteration early and
    sets ``breakdown``; the Ritz values found so far are then exact.
    """
    if isinstance(op, CsrMatrix):
        op = PrecondOperator(None, op)
    matvec = op.matvec if hasattr(op, "matvec") else op
    m = min(n, 200) if iters is None else min(int(iters), n)
    if m < 1:
        raise ValueError("need at least one Lanczos step")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V = np.empty((m, n))
    alphas, betas = [], []
    beta_last, breakdown = 0.0, False
    for j in range(m):
        V[j] = v
        w = np.array(matvec(v), dtype=np.float64)
        a = float(v @ w)
        alphas.append(a)
        basis = V[: j + 1]
        for _ in range(2):
            w -= basis.T @ (basis @ w)
        b = float(np.linalg.norm(w))
        if j == m - 1:
            beta_last = b
            break
        if b <= 1e-12 * max(abs(x) for x in alphas):
            breakdown, beta_last = True, 0.0
            break
        betas.append(b)
        v = w / b
    theta, S = eigh_tridiagonal(np.array(alphas), np.array(betas))
    res = np.abs(beta_last * S[-1, :])
    label = getattr(op, "label", "A")
    lo, hi = float(theta[0]), float(theta[-1])
    return SpectrumReport(lo, hi, hi / lo, "lanczos", label, float(res[0]), float(res[-1]), len(alphas), breakdown)


def _tridiagonalize(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Householder reduction of a symmetric matrix to tridiagonal (diag, offdiag)."""
    A = np.array(M, dtype=np.float64, copy=True)
    n = A.shape[0]
    e = np.zeros(max(n - 1, 0))
    for k in range(n - 2):
        x = A[k + 1:, k]
        sigma = np.linalg.norm(x)
        if sigma == 0.0:
            continue
        alpha = -sigma if x[0] >= 0 else sigma
        v = x.copy()
        v[0] -= alpha
        vn = np.linalg.norm(v)
        e[k] = alpha
        if vn == 0.0:
            continue
        v /= vn
        sub = A[k + 1:, k + 1:]
        p = sub @ v
        w = p - (v @ p) * v
        sub -= 2.0 * (np.outer(v, w) + np.outer(w, v))
    if n >= 2:
        e[n - 2] = A[n - 1, n - 2]
    return np.diag(A).copy(), e


def dense_spectrum(M, n_limit: int = DENSE_LIMIT) -> np.ndarray:
    """All eigenvalues, ascending, of a symmetric matrix or operator.

    Accepts a dense array, a :class:`CsrMatrix` or anything with ``to_dense``.
    """
    if isinstance(M, CsrMatrix):
        n = M.n_rows
        if n > n_limit:
            raise DimensionError(f"n={n} exceeds the dense limit {n_limit}; use extremal_eigs_lanczos")
        M = M.to_dense()
    elif hasattr(M, "to_dense"):
        if M.n > n_limit:
            raise DimensionError(f"n={M.n} exceeds the dense limit {n_limit}; use extremal_eigs_lanczos")
        M = M.to_dense()
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError("need a square matrix")
    if M.shape[0] > n_limit:
        raise DimensionError(f"n={M.shape[0]} exceeds the dense limit {n_limit}; use extremal_eigs_lanczos")
    if M.shape[0] == 1:
        return M[0].copy()
    d, e = _tridiagonalize(M)
    eigs, ok = _kernels.tql_eigenvalues(d, e)
    if not ok:
        raise ArithmeticError("QL iteration did not converge")
    return eigs


def dense_report(op, label: str | None = None) -> SpectrumReport:
    eigs = dense_spectrum(op)
    lo, hi = float(eigs[0]), float(eigs[-1])
    return SpectrumReport(lo, hi, hi / lo, "dense", label or getattr(op, "label", "A"), iterations=len(eigs))


def eigenvalue_histogram(eigs, bins: int = HISTOGRAM_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Counts over log-spaced bins from ``min/2`` to ``2*max``."""
    eigs = as_vector(eigs, name="eigenvalues")
    lo, hi = eigs.min(), eigs.max()
    if lo <= 0:
        raise ValueError("log-spaced histogram needs positive eigenvalues")
    edges = np.logspace(np.log10(lo / 2), np.log10(2 * hi), bins + 1)
    counts, _ = np.histogram(eigs, bins=edges)
    return edges, counts


def frobenius_loss(A: CsrMatrix, factor: CholeskyFactor) -> float:
    """Dense ``|L L^T A^{-1} - I|_F^2`` (small systems only)."""
    if A.n_rows > DENSE_LIMIT:
        raise DimensionError("dense loss is limited to n <= 4096")
    Ainv = np.linalg.inv(A.to_dense())
    L = factor.L.to_scipy()
    D = L @ (L.T @ Ainv) - np.eye(A.n_rows)
    return float(np.sum(D * D))


def spectrum_table(A: CsrMatrix, factors: list[tuple[str, CholeskyFactor | None]], method: str = "auto",
                   lanczos_iters: int = 300, loss_limit: int = DENSE_LIMIT, seed: int = 0) -> list[dict]:
    """One row per (label, factor): kappa, extremal eigenvalues and the dense loss.

    ``factor=None`` reports ``A`` itself (no loss). ``method="auto"`` uses the
    dense solver up to n = 1024 and Lanczos above.
    """
    rows = []
    for label, factor in factors:
        op = precond_operator(factor, A)
        use_dense = method == "dense" or (method == "auto" and A.n_rows <= 1024)
        rep = dense_report(op) if use_dense else extremal_eigs_lanczos(op, A.n_rows, lanczos_iters, seed)
        loss = None
        if factor is not None and A.n_rows <= loss_limit:
            loss = frobenius_loss(A, factor)
        rows.append({"matrix": label, **asdict(rep), "loss": loss})
    return rows


def write_table_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})


def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])

"""Parametric elliptic PDE datasets on the unit square.

Coefficients are log-normal: ``k = exp(phi)`` with ``phi`` a stationary
Gaussian random field with Gaussian covariance ``var * exp(-r^2 / l^2)``,
sampled by circulant embedding. Both equations use a cell-centred 5-point
stencil with homogeneous Dirichlet boundary and unit scaling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sparse import CsrMatrix, spmv

# Correlation length (fraction of the unit side) matched against the dataset
# contrast statistics; see README for the calibration table.
DEFAULT_CORR_LEN = 0.058


@dataclass(frozen=True)
class GrfConfig:
    grid_n: int
    variance: float
    corr_len: float = DEFAULT_CORR_LEN
    seed: int = 0

    def __post_init__(self):
        if self.grid_n < 1:
            raise ValueError("grid_n must be positive")
        if self.variance < 0:
            raise ValueError("variance must be non-negative")
        if not 0 < self.corr_len <= 1:
            raise ValueError("corr_len must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class CoefficientField:
    grid_n: int
    phi: np.ndarray  # (grid_n, grid_n), index [iy, ix]
    k: np.ndarray
    contrast: float

    @classmethod
    def from_phi(cls, phi) -> "CoefficientField":
        phi = np.asarray(phi, dtype=np.float64)
        if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
            raise ValueError("phi must be a square 2-D array")
        return cls(phi.shape[0], phi, np.exp(phi), _contrast(phi))


@dataclass(frozen=True, eq=False)
class LinearSystem:
    A: CsrMatrix
    b: np.ndarray
    x_ref: np.ndarray | None
    meta: dict = field(default_factory=dict)
    phi: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.A.n_rows

    def relative_residual(self) -> float:
        return float(np.linalg.norm(spmv(self.A, self.x_ref) - self.b) / np.linalg.norm(self.b))


def _embedding_size(n: int, corr_len: float) -> int:
    # the Gaussian kernel is below e^-25 beyond 5 correlation lengths
    reach = int(np.ceil(5.0 * corr_len * n))
    m = max(2 * n, n + reach)
    return m + (m % 2)


def sample_grf(cfg: GrfConfig) -> CoefficientField:
    """Sample ``phi`` at the cell centres of a ``grid_n x grid_n`` grid."""
    n = cfg.grid_n
    if cfg.variance == 0:
        return CoefficientField.from_phi(np.zeros((n, n)))
    m = _embedding_size(n, cfg.corr_len)
    lag = np.minimum(np.arange(m), m - np.arange(m)) / n
    r2 = lag[:, None] ** 2 + lag[None, :] ** 2
    cov = cfg.variance * np.exp(-r2 / cfg.corr_len**2)
    eig = np.fft.fft2(cov).real
    # tiny negative eigenvalues come from truncating the smooth kernel
    eig = np.clip(eig, 0.0, None)
    rng = np.random.default_rng(cfg.seed)
    xi = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    field_ = np.fft.fft2(np.sqrt(eig) * xi) / m
    return CoefficientField.from_phi(np.ascontiguousarray(field_.real[:n, :n]))


def _contrast(phi: np.ndarray) -> float:
    return float(np.exp(np.max(phi) - np.min(phi)))


def contrast(field: CoefficientField) -> float:
    """``exp(max(phi) - min(phi))``."""
    return _contrast(field.phi)


def _assemble(k: np.ndarray) -> CsrMatrix:
    n = k.shape[0]
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    # interior faces: harmonic mean of the two adjacent cells
    for a, b, ka, kb in (
        (idx[:, :-1], idx[:, 1:], k[:, :-1], k[:, 1:]),
        (idx[:-1, :], idx[1:, :], k[:-1, :], k[1:, :]),
    ):
        t = 2.0 * ka * kb / (ka + kb)
        rows += [a.ravel(), b.ravel()]
        cols += [b.ravel(), a.ravel()]
        vals += [-t.ravel(), -t.ravel()]
    # sum the four faces of each cell in a fixed order: west, east, south, north
    hx = 2.0 * k[:, :-1] * k[:, 1:] / (k[:, :-1] + k[:, 1:])
    hy = 2.0 * k[:-1, :] * k[1:, :] / (k[:-1, :] + k[1:, :])
    west = np.concatenate([k[:, :1], hx], axis=1)
    east = np.concatenate([hx, k[:, -1:]], axis=1)
    south = np.concatenate([k[:1, :], hy], axis=0)
    north = np.concatenate([hy, k[-1:, :]], axis=0)
    diag = ((west + east) + south) + north
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    return CsrMatrix.from_coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n * n, n * n))


def assemble_diffusion(field: CoefficientField) -> CsrMatrix:
    """5-point matrix of ``-div(k grad u)`` with zero Dirichlet data.

    Unknowns are ordered row-major over cells (``iy * n + ix``).
    """
    if field.grid_n < 2:
        raise ValueError("grid must have at least 2 cells per side")
    return _assemble(field.k)


def assemble_poisson(grid_n: int) -> CsrMatrix:
    """Standard 5-point Laplacian (4 on the diagonal, -1 off it)."""
    if grid_n < 2:
        raise ValueError("grid must have at least 2 cells per side")
    n = grid_n
    idx = np.arange(n * n).reshape(n, n)
    rows = [idx.ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx.ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals = [np.full(n * n, 4.0)] + [np.full(r.size, -1.0) for r in rows[1:]]
    return CsrMatrix.from_coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n * n, n * n))


def sample_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def make_system(equation: str, grid_n: int, variance: float, sample_seed: int,
                corr_len: float = DEFAULT_CORR_LEN) -> LinearSystem:
    """One dataset sample: coefficient field, matrix, forcing and reference solution."""
    if equation == "diffusion":
        fld = sample_grf(GrfConfig(grid_n, variance, corr_len, seed=sample_seed))
        A = assemble_diffusion(fld)
        phi, con = fld.phi, fld.contrast
    elif equation == "poisson":
        A = assemble_poisson(grid_n)
        phi, con = np.zeros((grid_n, grid_n)), 1.0
    else:
        raise ValueError(f"unknown equation {equation!r}")
    b = np.random.default_rng([sample_seed, 1]).standard_normal(grid_n * grid_n)
    x = reference_solve(A, b, grid_n)
    meta = {
        "grid_n": grid_n,
        "variance": variance if equation == "diffusion" else 0.0,
        "contrast": con,
        "seed": sample_seed,
        "equation": equation,
    }
    return LinearSystem(A, b, x, meta, phi)


def exact_cholesky(A: CsrMatrix, bandwidth: int):
    """Exact banded Cholesky factor of ``A`` as a :class:`CholeskyFactor`."""
    from scipy.linalg import cholesky_banded

    from .icfactor import CholeskyFactor

    n = A.n_rows
    rows = A.row_indices()
    low = A.col_idx <= rows
    band = np.zeros((bandwidth + 1, n))
    band[rows[low] - A.col_idx[low], A.col_idx[low]] = A.values[low]
    cb = cholesky_banded(band, lower=True)
    r, c = np.nonzero(cb)
    L = CsrMatrix.from_coo(c + r, c, cb[r, c], (n, n))
    return CholeskyFactor(L, "exact")


def reference_solve(A: CsrMatrix, b: np.ndarray, grid_n: int, rtol: float = 1e-12) -> np.ndarray:
    """Solve to relative residual ``rtol`` (exact-Cholesky PCG up to grid 64)."""
    from .icfactor import ic0
    from .pcg import PcgConfig, pcg_solve

    if grid_n <= 64:
        pre = exact_cholesky(A, grid_n)
    else:
        pre = ic0(A)
    cfg = PcgConfig(tolerances=(rtol,), max_iters=20 * A.n_rows)
    x, rep = pcg_solve(A, b, pre, cfg)
    if not rep.converged:
        raise ArithmeticError(f"reference solve stalled at relative residual {rep.final_relres:.3e}")
    return x


def build_dataset(equation: str, grid_n: int, variance: float, n_train: int, n_test: int,
                  seed: int, corr_len: float = DEFAULT_CORR_LEN) -> dict[str, list[LinearSystem]]:
    """Train/test lists of systems; per-sample seeds are derived from ``seed``."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("dataset sizes must be positive")
    seeds = sample_seeds(seed, n_train + n_test)
    systems = [make_system(equation, grid_n, variance, s, corr_len) for s in seeds]
    return {"train": systems[:n_train], "test": systems[n_train:]}

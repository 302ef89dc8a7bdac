"""CSR storage, exact kernels and Matrix Market I/O.

Dense vectors are plain 1-D float64 numpy arrays; :func:`as_vector` is the
single validation point for them.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DimensionError, SingularFactorError


def as_vector(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate and convert ``x`` to a finite float64 1-D array."""
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise DimensionError(f"{name} has length {v.shape[0]}, expected {n}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains NaN or Inf")
    return v


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with sorted, duplicate-free rows.

    Instances are immutable: the index and value arrays are read-only copies.
    """

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", _frozen(self.row_ptr, np.int64))
        object.__setattr__(self, "col_idx", _frozen(self.col_idx, np.int64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        rp, ci = self.row_ptr, self.col_idx
        if self.n_rows < 0 or self.n_cols < 0:
            raise DimensionError("negative dimension")
        if rp.shape != (self.n_rows + 1,):
            raise DimensionError("row_ptr must have length n_rows + 1")
        if rp[0] != 0 or rp[-1] != ci.shape[0] or np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must start at 0, be non-decreasing and end at nnz")
        if ci.shape != self.values.shape or ci.ndim != 1:
            raise DimensionError("col_idx and values must be 1-D arrays of equal length")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.n_cols:
                raise ValueError("column index out of range")
            # strictly increasing within a row; row starts are exempt
            step = np.diff(ci) > 0
            starts = np.zeros(ci.size, dtype=bool)
            starts[rp[1:-1][rp[1:-1] < ci.size]] = True
            if not np.all(step | starts[1:]):
                raise ValueError("columns must be strictly increasing within each row")

    # -- constructors -------------------------------------------------------
    @classmethod
    def from_coo(cls, rows, cols, vals, shape: tuple[int, int]) -> "CsrMatrix":
        """Build from coordinate triplets, summing duplicates."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        n_rows, n_cols = shape
        if not (rows.shape == cols.shape == vals.shape):
            raise DimensionError("triplet arrays must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError("triplet index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            first = np.ones(rows.size, dtype=bool)
            first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(first)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=row_ptr[1:])
        return cls(n_rows, n_cols, row_ptr, cols, vals)

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape)

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls.diag(np.ones(n))

    @classmethod
    def diag(cls, d) -> "CsrMatrix":
        d = np.asarray(d, dtype=np.float64)
        n = d.shape[0]
        return cls(n, n, np.arange(n + 1), np.arange(n), d)

    # -- accessors -----------------------------------------------------------
    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry, in storage order."""
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))

    def diagonal(self) -> np.ndarray:
        d = np.zeros(min(self.shape))
        rows = self.row_indices()
        on = rows == self.col_idx
        d[rows[on]] = self.values[on]
        return d

    def with_values(self, values) -> "CsrMatrix":
        """Same pattern, new values."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise DimensionError("value array does not match the pattern")
        return CsrMatrix(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, values)

    def same_pattern(self, other: "CsrMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_indices(), self.col_idx] = self.values
        return out

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)

    def is_lower_triangular(self) -> bool:
        return bool(np.all(self.col_idx <= self.row_indices()))

    def is_symmetric(self) -> bool:
        t = transpose(self)
        return self.same_pattern(t) and np.array_equal(self.values, t.values)

    def __repr__(self) -> str:
        return f"CsrMatrix(shape={self.shape}, nnz={self.nnz})"


def spmv(A: CsrMatrix, x) -> np.ndarray:
    """y = A x, summing each row left to right."""
    x = as_vector(x, name="x")
    if A.n_cols != x.shape[0]:
        raise DimensionError(f"matrix has {A.n_cols} columns but x has length {x.shape[0]}")
    return _kernels.csr_matvec(A.n_rows, A.row_ptr, A.col_idx, A.values, x)


def transpose(A: CsrMatrix) -> CsrMatrix:
    rows = A.row_indices()
    # stable sort by column keeps rows ascending inside each new row
    order = np.argsort(A.col_idx, kind="stable")
    row_ptr = np.zeros(A.n_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(A.col_idx, minlength=A.n_cols), out=row_ptr[1:])
    return CsrMatrix(A.n_cols, A.n_rows, row_ptr, rows[order], A.values[order])


def lower_triangle(A: CsrMatrix) -> CsrMatrix:
    """Entries with col <= row, diagonal included."""
    if A.n_rows != A.n_cols:
        raise DimensionError("lower_triangle needs a square matrix")
    rows = A.row_indices()
    keep = A.col_idx <= rows
    row_ptr = np.zeros(A.n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows[keep], minlength=A.n_rows), out=row_ptr[1:])
    return CsrMatrix(A.n_rows, A.n_cols, row_ptr, A.col_idx[keep], A.values[keep])


def _check_square_rhs(M: CsrMatrix, b) -> np.ndarray:
    if M.n_rows != M.n_cols:
        raise DimensionError("triangular solve needs a square matrix")
    return as_vector(b, M.n_rows, name="b")


def tri_solve_lower(L: CsrMatrix, b) -> np.ndarray:
    """Forward substitution for lower-triangular ``L``."""
    b = _check_square_rhs(L, b)
    y, bad = _kernels.forward_subst(L.n_rows, L.row_ptr, L.col_idx, L.values, b)
    if bad >= 0:
        raise SingularFactorError(f"zero diagonal in row {bad}")
    return y


def tri_solve_upper(U: CsrMatrix, b) -> np.ndarray:
    """Backward substitution for upper-triangular ``U``."""
    b = _check_square_rhs(U, b)
    y, bad = _kernels.backward_subst(U.n_rows, U.row_ptr, U.col_idx, U.values, b)
    if bad >= 0:
        raise SingularFactorError(f"zero diagonal in row {bad}")
    return y


# -- Matrix Market ------------------------------------------------------------

def write_mtx(path, A: CsrMatrix, symmetric: bool = False, comment: str | None = None) -> None:
    """Write coordinate real format with 17 significant digits.

    With ``symmetric=True`` only the lower triangle is written; ``A`` must be
    symmetric.
    """
    M = A
    kind = "general"
    if symmetric:
        if not A.is_symmetric():
            raise ValueError("matrix is not symmetric")
        M = lower_triangle(A)
        kind = "symmetric"
    rows = M.row_indices() + 1
    cols = M.col_idx + 1
    lines = [f"%%MatrixMarket matrix coordinate real {kind}"]
    if comment:
        lines.extend(f"% {c}" for c in comment.splitlines())
    lines.append(f"{M.n_rows} {M.n_cols} {M.nnz}")
    body = [f"{r} {c} {v:.17g}" for r, c, v in zip(rows.tolist(), cols.tolist(), M.values.tolist())]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_mtx(path) -> CsrMatrix:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].lower().startswith("%%matrixmarket"):
        raise ValueError(f"{path}: missing MatrixMarket banner")
    banner = text[0].lower().split()
    if banner[1:4] != ["matrix", "coordinate", "real"] or banner[4] not in ("general", "symmetric"):
        raise ValueError(f"{path}: unsupported banner {text[0]!r}")
    symmetric = banner[4] == "symmetric"
    body = [ln for ln in text[1:] if ln.strip() and not ln.startswith("%")]
    n_rows, n_cols, nnz = (int(t) for t in body[0].split())
    if len(body) - 1 != nnz:
        raise ValueError(f"{path}: expected {nnz} entries, found {len(body) - 1}")
    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz)
    for k, ln in enumerate(body[1:]):
        r, c, v = ln.split()
        rows[k], cols[k], vals[k] = int(r) - 1, int(c) - 1, float(v)
    if symmetric:
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    return CsrMatrix.from_coo(rows, cols, vals, (n_rows, n_cols))


def write_vector(path, x) -> None:
    Path(path).write_text("".join(f"{v:.17g}\n" for v in np.asarray(x, dtype=np.float64).tolist()))


def read_vector(path) -> np.ndarray:
    return np.array([float(t) for t in Path(path).read_text().split()], dtype=np.float64)

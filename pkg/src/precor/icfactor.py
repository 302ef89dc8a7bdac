"""Incomplete Cholesky factorizations IC(0) and ICt(p) and their application."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DimensionError, FactorizationError
from .sparse import CsrMatrix, lower_triangle, read_mtx, transpose, tri_solve_lower, tri_solve_upper, write_mtx

# Diagonal shifts tried, in order, when a pivot becomes non-positive.
SHIFT_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2)
DEFAULT_TAU = 1e-3


@dataclass(frozen=True)
class FactorizationConfig:
    variant: str = "ic0"
    p: int = 0
    tau: float = DEFAULT_TAU
    shift: float = 0.0

    def __post_init__(self):
        if self.variant not in ("ic0", "ict"):
            raise ValueError(f"unknown factorization variant {self.variant!r}")
        if self.p < 0 or self.tau < 0 or self.shift < 0:
            raise ValueError("p, tau and shift must be non-negative")

    @property
    def label(self) -> str:
        return "ic0" if self.variant == "ic0" else f"ict({self.p})"


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Sparse lower-triangular factor ``L`` of a preconditioner ``P = L L^T``.

    ``provenance`` is one of ``ic0``, ``ict(p,tau)``, ``learned`` or
    ``inplace-updated``.
    """

    L: CsrMatrix
    provenance: str
    source_shift: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.L.n_rows != self.L.n_cols:
            raise DimensionError("factor must be square")
        if not self.L.is_lower_triangular():
            raise ValueError("factor must be lower-triangular")
        object.__setattr__(self, "_Lt", None)

    @property
    def n(self) -> int:
        return self.L.n_rows

    @property
    def Lt(self) -> CsrMatrix:
        if self._Lt is None:
            object.__setattr__(self, "_Lt", transpose(self.L))
        return self._Lt

    def has_positive_diagonal(self) -> bool:
        rows = self.L.row_indices()
        on = rows == self.L.col_idx
        return bool(np.count_nonzero(on) == self.n and np.all(self.L.values[on] > 0))


def _diag_last_lower(A: CsrMatrix) -> CsrMatrix:
    if A.n_rows != A.n_cols:
        raise DimensionError("factorization needs a square matrix")
    low = lower_triangle(A)
    last = low.row_ptr[1:] - 1
    has_diag = (np.diff(low.row_ptr) > 0) & (low.col_idx[np.maximum(last, 0)] == np.arange(A.n_rows))
    if not np.all(has_diag) or np.any(low.values[last] <= 0):
        raise ValueError("matrix must have a positive diagonal")
    return low


def ic0(A: CsrMatrix, shift: float = 0.0) -> CholeskyFactor:
    """Zero fill-in incomplete Cholesky on the pattern of ``lower(A)``.

    A non-positive pivot restarts the factorization on ``A + s*diag(A)`` with
    ``s`` escalating through :data:`SHIFT_SCHEDULE`.
    """
    low = _diag_last_lower(A)
    for s in _shifts_from(shift):
        vals, bad = _kernels.ic0_values(low.n_rows, low.row_ptr, low.col_idx, low.values, 1.0 + s)
        if bad < 0:
            return CholeskyFactor(low.with_values(vals), "ic0", s)
    raise FactorizationError(f"IC(0) breakdown at row {bad} with every shift", SHIFT_SCHEDULE[-1])


def _shifts_from(shift: float):
    return [shift] + [s for s in SHIFT_SCHEDULE if s > shift]


class _Breakdown(Exception):
    pass


def _ict_once(A: CsrMatrix, p: int, tau: float, shift: float) -> CsrMatrix:
    # Row-wise (IKJ) incomplete Cholesky. Fill entries below the drop tolerance
    # are discarded as soon as they are final; the surviving fill of a row is
    # then cut down to its p largest entries. Entries of lower(A) always stay.
    n = A.n_rows
    rp, ci, va = A.row_ptr, A.col_idx.tolist(), A.values.tolist()
    diag = [0.0] * n
    columns: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    out_rows: list[list[tuple[int, float]]] = []
    for i in range(n):
        lo, hi = rp[i], rp[i + 1]
        row_cols, row_vals = ci[lo:hi], va[lo:hi]
        drop = tau * math.sqrt(sum(v * v for v in row_vals))
        w: dict[int, float] = {}
        a_ii = 0.0
        for c, v in zip(row_cols, row_vals):
            if c < i:
                w[c] = v
            elif c == i:
                a_ii = v * (1.0 + shift)
        base = set(w)
        heap = list(w)
        heapq.heapify(heap)
        kept: list[tuple[int, float]] = []
        while heap:
            k = heapq.heappop(heap)
            lik = w.pop(k) / diag[k]
            if k not in base and abs(lik) < drop:
                continue
            kept.append((k, lik))
            for j, ljk in columns[k]:
                if j in w:
                    w[j] -= lik * ljk
                else:
                    w[j] = -lik * ljk
                    heapq.heappush(heap, j)
        fill = [(k, v) for k, v in kept if k not in base]
        if len(fill) > p:
            # ties go to the smaller column index
            fill = sorted(fill, key=lambda kv: (-abs(kv[1]), kv[0]))[:p]
        entries = sorted([(k, v) for k, v in kept if k in base] + fill)
        d = a_ii - sum(v * v for _, v in entries)
        if not d > 0.0:
            raise _Breakdown(i)
        diag[i] = math.sqrt(d)
        for k, v in entries:
            columns[k].append((i, v))
        entries.append((i, diag[i]))
        out_rows.append(entries)
    counts = np.array([len(r) for r in out_rows], dtype=np.int64)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    cols = np.fromiter((k for r in out_rows for k, _ in r), dtype=np.int64, count=int(row_ptr[-1]))
    vals = np.fromiter((v for r in out_rows for _, v in r), dtype=np.float64, count=int(row_ptr[-1]))
    return CsrMatrix(n, n, row_ptr, cols, vals)


def ict(A: CsrMatrix, cfg: FactorizationConfig) -> CholeskyFactor:
    """Thresholded incomplete Cholesky with at most ``cfg.p`` fill entries per row.

    Fill candidates smaller than ``cfg.tau`` times the 2-norm of the row of
    ``A`` are dropped.
    """
    if cfg.variant != "ict":
        raise ValueError("ict() needs a config with variant='ict'")
    _diag_last_lower(A)
    for s in _shifts_from(cfg.shift):
        try:
            L = _ict_once(A, cfg.p, cfg.tau, s)
        except _Breakdown:
            continue
        return CholeskyFactor(L, f"ict({cfg.p},{cfg.tau:g})", s, {"p": cfg.p, "tau": cfg.tau})
    raise FactorizationError("ICt breakdown with every shift", SHIFT_SCHEDULE[-1])


def factorize(A: CsrMatrix, cfg: FactorizationConfig) -> CholeskyFactor:
    if cfg.variant == "ic0":
        return ic0(A, cfg.shift)
    return ict(A, cfg)


def apply_preconditioner(F: CholeskyFactor, r) -> np.ndarray:
    """Return ``(L L^T)^{-1} r``."""
    return tri_solve_upper(F.Lt, tri_solve_lower(F.L, r))


def save_factor(F: CholeskyFactor, stem) -> tuple[Path, Path]:
    """Write ``<stem>.mtx`` plus a ``<stem>.json`` sidecar."""
    stem = Path(stem)
    mtx, side = stem.with_suffix(".mtx"), stem.with_suffix(".json")
    write_mtx(mtx, F.L)
    record = {"provenance": F.provenance, "shift": F.source_shift, **F.meta}
    side.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return mtx, side


def load_factor(stem) -> CholeskyFactor:
    stem = Path(stem)
    record = json.loads(stem.with_suffix(".json").read_text())
    L = read_mtx(stem.with_suffix(".mtx"))
    meta = {k: v for k, v in record.items() if k not in ("provenance", "shift")}
    return CholeskyFactor(L, record["provenance"], float(record["shift"]), meta)

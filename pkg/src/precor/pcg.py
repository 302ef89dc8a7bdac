"""Preconditioned conjugate gradient with multi-tolerance iteration accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import BreakdownError, DimensionError
from .icfactor import CholeskyFactor, apply_preconditioner
from .sparse import CsrMatrix, as_vector, spmv

DEFAULT_TOLERANCES = (1e-3, 1e-6, 1e-9, 1e-12)
# recurrence residual is replaced by the true residual this often
TRUE_RESIDUAL_EVERY = 50


@dataclass(frozen=True)
class PcgConfig:
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCES
    max_iters: int | None = None  # None means 10 * n
    record_history: bool = False

    def __post_init__(self):
        tols = tuple(float(t) for t in self.tolerances)
        if not tols or any(t <= 0 for t in tols) or any(a <= b for a, b in zip(tols, tols[1:])):
            raise ValueError("tolerances must be positive and strictly decreasing")
        object.__setattr__(self, "tolerances", tols)
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class PcgReport:
    iters_at_tol: dict[float, int | None]
    converged: bool
    final_relres: float
    iterations: int
    residual_history: list[float] | None = field(default=None, repr=False)

    def iters(self, tol: float) -> int | None:
        return self.iters_at_tol[tol]


def pcg_solve(A: CsrMatrix, b, precond: CholeskyFactor | None = None,
              cfg: PcgConfig = PcgConfig()) -> tuple[np.ndarray, PcgReport]:
    """Solve ``A x = b`` from ``x0 = 0`` with ``M^{-1} = (L L^T)^{-1}``.

    The relative 2-norm residual ``|b - A x_k| / |b|`` is checked after every
    iteration; ``iters_at_tol`` records the first ``k`` meeting each tolerance.
    Hitting ``max_iters`` is not an error: the report has ``converged=False``
    and ``None`` for unmet tolerances.
    """
    n = A.n_rows
    if A.n_cols != n:
        raise DimensionError("A must be square")
    b = as_vector(b, n, name="b")
    if precond is not None and precond.n != n:
        raise DimensionError("preconditioner size does not match A")
    max_iters = cfg.max_iters if cfg.max_iters is not None else 10 * n
    tols = cfg.tolerances
    iters_at: dict[float, int | None] = {t: None for t in tols}
    history = [] if cfg.record_history else None

    def M(r):
        return r if precond is None else apply_preconditioner(precond, r)

    x = np.zeros(n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, PcgReport({t: 0 for t in tols}, True, 0.0, 0, [0.0] if history is not None else None)

    r = b.copy()
    relres = 1.0
    if history is not None:
        history.append(relres)
    z = M(r)
    p = z.copy()
    rz = float(r @ z)
    pending = 0  # index of the tightest tolerance not yet met
    k = 0
    while k < max_iters:
        Ap = spmv(A, p)
        pAp = float(p @ Ap)
        if not pAp > 0.0:
            raise BreakdownError(f"p^T A p = {pAp:.3e} at iteration {k + 1}")
        a = rz / pAp
        x += a * p
        r -= a * Ap
        k += 1
        if k % TRUE_RESIDUAL_EVERY == 0:
            r = b - spmv(A, x)
        relres = float(np.linalg.norm(r)) / bnorm
        if pending < len(tols) and relres <= tols[-1] and k % TRUE_RESIDUAL_EVERY:
            # confirm the final tolerance against the true residual
            r = b - spmv(A, x)
            relres = float(np.linalg.norm(r)) / bnorm
        if history is not None:
            history.append(relres)
        while pending < len(tols) and relres <= tols[pending]:
            iters_at[tols[pending]] = k
            pending += 1
        if pending == len(tols):
            break
        z = M(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, PcgReport(iters_at, pending == len(tols), relres, k, history)


def write_history_csv(path, report: PcgReport) -> None:
    if report.residual_history is None:
        raise ValueError("report has no residual history (set record_history=True)")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "relres"])
        for i, v in enumerate(report.residual_history):
            w.writerow([i, repr(v)])

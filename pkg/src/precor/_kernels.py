# Numba kernels over raw CSR arrays. Callers validate shapes and dtypes.
import numpy as np
from numba import njit


@njit(cache=True)
def csr_matvec(n_rows, row_ptr, col_idx, values, x):
    y = np.empty(n_rows)
    for i in range(n_rows):
        acc = 0.0
        for k in range(row_ptr[i], row_ptr[i + 1]):
            acc += values[k] * x[col_idx[k]]
        y[i] = acc
    return y


@njit(cache=True)
def forward_subst(n, row_ptr, col_idx, values, b):
    """Solve L y = b; returns (y, bad_row) with bad_row = -1 on success."""
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        diag = 0.0
        for k in range(row_ptr[i], row_ptr[i + 1]):
            j = col_idx[k]
            if j < i:
                acc -= values[k] * y[j]
            elif j == i:
                diag = values[k]
        if diag == 0.0:
            return y, i
        y[i] = acc / diag
    return y, -1


@njit(cache=True)
def backward_subst(n, row_ptr, col_idx, values, b):
    """Solve U y = b for upper-triangular CSR U."""
    y = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = b[i]
        diag = 0.0
        for k in range(row_ptr[i], row_ptr[i + 1]):
            j = col_idx[k]
            if j > i:
                acc -= values[k] * y[j]
            elif j == i:
                diag = values[k]
        if diag == 0.0:
            return y, i
        y[i] = acc / diag
    return y, -1


@njit(cache=True)
def ic0_values(n, row_ptr, col_idx, values, diag_scale):
    """IC(0) on the lower-triangular pattern given by (row_ptr, col_idx).

    ``values`` holds lower(A); the diagonal is multiplied by ``diag_scale``.
    Rows must be sorted with the diagonal stored last. Returns (L values,
    failing row or -1).
    """
    out = np.zeros(values.shape[0])
    for i in range(n):
        start = row_ptr[i]
        end = row_ptr[i + 1]
        for p in range(start, end):
            j = col_idx[p]
            if j == i:
                s = values[p] * diag_scale
                for q in range(start, p):
                    s -= out[q] * out[q]
                if s <= 0.0 or not np.isfinite(s):
                    return out, i
                out[p] = np.sqrt(s)
            else:
                # sparse dot of row i (cols < j) with row j (cols < j)
                s = values[p]
                qa = start
                qb = row_ptr[j]
                jend = row_ptr[j + 1] - 1  # skip diagonal of row j
                while qa < p and qb < jend:
                    ca = col_idx[qa]
                    cb = col_idx[qb]
                    if ca == cb:
                        s -= out[qa] * out[qb]
                        qa += 1
                        qb += 1
                    elif ca < cb:
                        qa += 1
                    else:
                        qb += 1
                out[p] = s / out[row_ptr[j + 1] - 1]
    return out, -1


@njit(cache=True)
def tql_eigenvalues(d, e):
    """Eigenvalues of a symmetric tridiagonal matrix by implicit QL.

    ``d`` is the diagonal, ``e[k]`` couples k and k+1. Returns (sorted
    eigenvalues, ok flag).
    """
    n = d.shape[0]
    d = d.copy()
    sub = np.zeros(n)
    sub[: n - 1] = e
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(sub[m]) <= 2.220446049250313e-16 * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > 60:
                return np.sort(d), False
            g = (d[l + 1] - d[l]) / (2.0 * sub[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + sub[l] / (g + (r if g >= 0 else -r))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * sub[i]
                b = c * sub[i]
                r = np.hypot(f, g)
                sub[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    sub[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            if underflow:
                continue
            d[l] -= p
            sub[l] = g
            sub[m] = 0.0
    return np.sort(d), True


@njit(cache=True)
def segment_max(x, offsets):
    """Column-wise max over row segments; also returns the first maximising row."""
    n_seg = offsets.shape[0] - 1
    H = x.shape[1]
    out = np.empty((n_seg, H))
    arg = np.empty((n_seg, H), dtype=np.int64)
    for i in range(n_seg):
        lo = offsets[i]
        for c in range(H):
            best = x[lo, c]
            k_best = lo
            for k in range(lo + 1, offsets[i + 1]):
                if x[k, c] > best:
                    best = x[k, c]
                    k_best = k
            out[i, c] = best
            arg[i, c] = k_best
    return out, arg


@njit(cache=True)
def segment_sum(x, order, offsets):
    """Sums of rows ``x[order[k]]`` over segments of ``offsets``."""
    n_seg = offsets.shape[0] - 1
    H = x.shape[1]
    out = np.zeros((n_seg, H))
    for i in range(n_seg):
        for k in range(offsets[i], offsets[i + 1]):
            r = order[k]
            for c in range(H):
                out[i, c] += x[r, c]
    return out

"""Pure numpy versions of the compiled kernels (same signatures)."""
import numpy as np


def cholesky_lower(a, tol):
    n = a.shape[0]
    L = np.zeros((n, n), dtype=a.dtype)
    for j in range(n):
        s = a[j, j] - L[j, :j] @ L[j, :j]
        if not (s > tol) or not np.isfinite(s):
            return L, j, float(s)
        ljj = np.sqrt(s)
        L[j, j] = ljj
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / ljj
    return L, -1, 0.0


def solve_lower_t_right(L, b):
    """``X`` with ``X @ L.T = b`` (forward substitution over columns)."""
    x = np.array(b, dtype=np.result_type(L, b), copy=True)
    for i in range(L.shape[0]):
        x[:, i] = (x[:, i] - x[:, :i] @ L[i, :i]) / L[i, i]
    return x


def solve_lower_right(L, b):
    """``X`` with ``X @ L = b`` (backward substitution over columns)."""
    x = np.array(b, dtype=np.result_type(L, b), copy=True)
    for i in range(L.shape[0] - 1, -1, -1):
        x[:, i] = (x[:, i] - x[:, i + 1:] @ L[i + 1:, i]) / L[i, i]
    return x


def cho_solve_right(L, b):
    return solve_lower_right(L, solve_lower_t_right(L, b))


def value_differences(pkeys, keys, pgrads, eta):
    coef = -eta * np.einsum("ij,ij->i", pkeys, keys)
    return coef[:, None] * pgrads, coef


def residuals(shift, keys, diffs):
    err = keys @ shift.T - diffs
    return np.sqrt(np.einsum("ij,ij->i", err, err)), np.sqrt(np.einsum("ij,ij->i", diffs, diffs))

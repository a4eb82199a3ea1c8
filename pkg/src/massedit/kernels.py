"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension ``massedit._ckernels`` is used when it was built and
``MASSEDIT_KERNELS`` is not set to ``python``. Inputs that are not float64
always take the numpy route.
"""
import os

import numpy as np

from . import _pykernels
from .errors import ShapeError, SingularMatrixError

_py = _pykernels
_c = None
if os.environ.get("MASSEDIT_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _c
    except ImportError:  # extension not built
        _c = None

BACKEND = "compiled" if _c is not None else "python"


def _impl(*arrays):
    if _c is not None and all(a.dtype == np.float64 for a in arrays):
        return _c
    return _py


def _c64(a):
    return np.ascontiguousarray(a)


# Systems larger than this are factored and solved in blocks: the kernels
# handle the diagonal blocks and BLAS does the off-diagonal updates.
BLOCK = 64


def cholesky(a, *, rel_tol=None, backend=None):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    A pivot at or below ``rel_tol * max|diag(a)|`` (default ``n * eps``)
    raises :class:`SingularMatrixError` carrying the pivot index.
    """
    a = _c64(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if rel_tol is None:
        rel_tol = n * np.finfo(a.dtype).eps
    scale = float(np.max(np.abs(np.diag(a)))) if n else 0.0
    impl = _select(backend, a)
    tol = rel_tol * scale
    if n <= BLOCK:
        L, pivot, value = impl.cholesky_lower(a, tol)
        if pivot >= 0:
            raise SingularMatrixError(pivot, value)
        return L
    # right-looking blocked factorization on a working copy of the lower triangle
    work = np.tril(a)
    L = np.zeros_like(work)
    for k0 in range(0, n, BLOCK):
        k1 = min(k0 + BLOCK, n)
        diag = np.ascontiguousarray(work[k0:k1, k0:k1])
        Lkk, pivot, value = impl.cholesky_lower(diag, tol)
        if pivot >= 0:
            raise SingularMatrixError(k0 + pivot, value)
        L[k0:k1, k0:k1] = Lkk
        if k1 < n:
            panel = impl.solve_lower_t_right(Lkk, np.ascontiguousarray(work[k1:, k0:k1]))
            L[k1:, k0:k1] = panel
            work[k1:, k1:] -= np.tril(panel @ panel.T)
    return L


def solve_lower_t_right(L, b, *, backend=None):
    """Solve ``X @ L.T = b`` for lower-triangular ``L``."""
    L, b = _c64(L), _c64(b)
    impl = _select(backend, L, b)
    n = L.shape[0]
    if n <= BLOCK:
        return impl.solve_lower_t_right(L, b)
    x = np.empty(b.shape, dtype=np.result_type(L, b))
    for j0 in range(0, n, BLOCK):
        j1 = min(j0 + BLOCK, n)
        rhs = b[:, j0:j1] - x[:, :j0] @ L[j0:j1, :j0].T
        x[:, j0:j1] = impl.solve_lower_t_right(np.ascontiguousarray(L[j0:j1, j0:j1]), np.ascontiguousarray(rhs))
    return x


def solve_lower_right(L, b, *, backend=None):
    """Solve ``X @ L = b`` for lower-triangular ``L``."""
    L, b = _c64(L), _c64(b)
    impl = _select(backend, L, b)
    n = L.shape[0]
    if n <= BLOCK:
        return impl.solve_lower_right(L, b)
    x = np.empty(b.shape, dtype=np.result_type(L, b))
    starts = list(range(0, n, BLOCK))
    for j0 in reversed(starts):
        j1 = min(j0 + BLOCK, n)
        rhs = b[:, j0:j1] - x[:, j1:] @ L[j1:, j0:j1]
        x[:, j0:j1] = impl.solve_lower_right(np.ascontiguousarray(L[j0:j1, j0:j1]), np.ascontiguousarray(rhs))
    return x


def cho_solve_right(L, b, *, backend=None):
    """Solve ``X @ (L @ L.T) = b`` for ``X``."""
    L, b = _c64(L), _c64(b)
    if b.ndim != 2 or b.shape[1] != L.shape[0]:
        raise ShapeError(f"right-hand side {b.shape} does not match factor {L.shape}")
    if L.shape[0] <= BLOCK:
        return _select(backend, L, b).cho_solve_right(L, b)
    return solve_lower_right(L, solve_lower_t_right(L, b, backend=backend), backend=backend)


def value_differences(pkeys, keys, pgrads, eta, *, backend=None):
    """Return ``(D, coef)`` with ``D[j] = coef[j] * pgrads[j]``,
    ``coef[j] = -eta * pkeys[j] . keys[j]``."""
    pkeys, keys, pgrads = _c64(pkeys), _c64(keys), _c64(pgrads)
    if pkeys.shape != keys.shape or pgrads.shape[0] != keys.shape[0]:
        raise ShapeError(
            f"factor shapes {pkeys.shape}, {pgrads.shape} do not match keys {keys.shape}"
        )
    return _select(backend, pkeys, keys, pgrads).value_differences(pkeys, keys, pgrads, float(eta))


def residual_norms(shift, keys, diffs, *, backend=None):
    """Return ``(||shift k_j - d_j||, ||d_j||)`` for every row ``j``."""
    shift, keys, diffs = _c64(shift), _c64(keys), _c64(diffs)
    if shift.shape != (diffs.shape[1], keys.shape[1]) or keys.shape[0] != diffs.shape[0]:
        raise ShapeError(
            f"shift {shift.shape} incompatible with keys {keys.shape} and diffs {diffs.shape}"
        )
    return _select(backend, shift, keys, diffs).residuals(shift, keys, diffs)


def _select(backend, *arrays):
    if backend is None:
        return _impl(*arrays)
    if backend == "python":
        return _py
    if backend == "compiled":
        if _c is None:
            raise RuntimeError("compiled kernels are not available")
        return _c
    raise ValueError(f"unknown backend {backend!r}")

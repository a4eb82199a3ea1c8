"""Combine per-token shifts into one weight shift per layer.

Matrices follow the column convention: keys ``U`` are ``(d, n)`` and value
differences ``D`` are ``(d', n)``. The normal-equation shift solves

    min_S ||S U - D||^2 + lam ||S||^2   =>   S (U U^T + lam I) = D U^T

through a Cholesky factorization; the Gram matrix can be accumulated over
column blocks so ``n`` is not bounded by memory.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels, memory
from .errors import ShapeError, SingularMatrixError

METHODS = ("normal_eq", "sum")


class SPDFactor:
    """Cholesky factor of a symmetric positive-definite matrix, reusable for solves."""

    def __init__(self, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"expected a square matrix, got {a.shape}")
        asym = np.max(np.abs(a - a.T)) if a.size else 0.0
        if asym > 1e-10 * max(1.0, float(np.max(np.abs(a))) if a.size else 1.0):
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
        self.lower = memory.track(kernels.cholesky(a))

    @property
    def size(self):
        return self.lower.shape[0]

    def solve_right(self, b):
        """``X`` with ``X @ A = b``."""
        b = np.asarray(b, dtype=np.float64)
        if b.ndim != 2 or b.shape[1] != self.size:
            raise ShapeError(f"right-hand side {b.shape} does not match {self.size}x{self.size} system")
        return memory.track(kernels.cho_solve_right(self.lower, b))


def solve_spd(a, b):
    """Solve ``X @ a = b`` for symmetric positive-definite ``a``."""
    return SPDFactor(a).solve_right(b)


class NormalEquation:
    """Streaming accumulator for ``U U^T`` and ``D U^T`` over row blocks of tokens."""

    def __init__(self, d, dp):
        self.gram = memory.track(np.zeros((d, d)))
        self.cross = memory.track(np.zeros((dp, d)))
        self.n = 0

    def add(self, keys_rows, diffs_rows):
        keys_rows = np.asarray(keys_rows, dtype=np.float64)
        diffs_rows = np.asarray(diffs_rows, dtype=np.float64)
        if keys_rows.shape[1] != self.gram.shape[0] or diffs_rows.shape != (len(keys_rows), self.cross.shape[0]):
            raise ShapeError(f"block shapes {keys_rows.shape}, {diffs_rows.shape} do not fit the system")
        self.gram += keys_rows.T @ keys_rows
        self.cross += diffs_rows.T @ keys_rows
        self.n += len(keys_rows)

    def factor(self, lam):
        if not lam > 0:
            raise ValueError(f"regularizer must be positive, got {lam}")
        a = self.gram + lam * np.eye(self.gram.shape[0])
        return SPDFactor(a)

    def solve(self, lam):
        """Return ``(shift, factor)``."""
        fac = self.factor(lam)
        return fac.solve_right(self.cross), fac


def aggregate_normal_eq(U, D, lam, *, block=None):
    """``S* = D U^T (U U^T + lam I)^{-1}``.

    With fewer tokens than key dimensions (and no ``block``) the equivalent
    ``S* = D (U^T U + lam I)^{-1} U^T`` is used: it factors the smaller
    matrix and keeps every row of ``S*`` in the span of the keys, so the
    ``1/lam`` directions outside that span see no rounding noise.
    """
    U = np.asarray(U, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if U.ndim != 2 or D.ndim != 2 or U.shape[1] != D.shape[1]:
        raise ShapeError(f"keys {U.shape} and value differences {D.shape} must share n")
    if not lam > 0:
        raise ValueError(f"regularizer must be positive, got {lam}")
    if block is None and U.shape[1] < U.shape[0]:
        return dual_factor(U, lam).solve_right(D) @ U.T
    eq = NormalEquation(U.shape[0], D.shape[0])
    n = U.shape[1]
    step = n if not block else block
    for start in range(0, n, max(step, 1)):
        eq.add(U[:, start:start + step].T, D[:, start:start + step].T)
    return eq.solve(lam)[0]


def dual_factor(U, lam):
    """Factor of ``U^T U + lam I`` (size ``n``)."""
    return SPDFactor(U.T @ U + lam * np.eye(U.shape[1]))


def aggregate_sum(factors, layer):
    """``sum_j -eta outer(pg_j, pk_j)`` formed as one matrix product."""
    pk = factors.pseudo_keys[layer]
    pg = factors.pseudo_grads[layer]
    if len(pk) == 0:
        raise ValueError(f"no factors for layer {layer}")
    if len(pk) != len(pg):
        raise ShapeError("pseudo keys and gradients differ in count")
    return -factors.eta[layer] * (pg.T @ pk)


def objective(S, U, D, lam):
    r = S @ U - D
    return float(np.sum(r * r) + lam * np.sum(S * S))


# ------------------------------------------------------------------ results

@dataclass
class AggregationResult:
    layer: str
    keys: np.ndarray
    diffs: np.ndarray
    lam: float
    shift: np.ndarray
    method: str

    def solve_residual(self):
        """Relative residual of ``S (U U^T + lam I) = D U^T`` (normal_eq only)."""
        U, D = self.keys, self.diffs
        lhs = self.shift @ (U @ U.T + self.lam * np.eye(U.shape[0]))
        rhs = D @ U.T
        return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))


@dataclass
class ResidualReport:
    """Per-token residuals ``||S u_j - d_j|| / ||d_j||``.

    Tokens with ``||d_j|| = 0`` are stored as NaN, excluded from the mean
    and counted in ``excluded``.
    """
    residuals: dict = field(default_factory=dict)

    @property
    def excluded(self):
        return int(sum(np.isnan(r).sum() for r in self.residuals.values()))

    @property
    def count(self):
        return int(sum(np.isfinite(r).sum() for r in self.residuals.values()))

    @property
    def mean_residual(self):
        total = sum(float(np.nansum(r)) for r in self.residuals.values())
        return total / self.count if self.count else float("nan")

    def merge(self, other):
        out = dict(self.residuals)
        out.update(other.residuals)
        return ResidualReport(out)

    def rows(self):
        for layer, r in self.residuals.items():
            for j, value in enumerate(r):
                yield layer, j, float(value)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer_id", "token_index", "residual"])
            for layer, j, value in self.rows():
                w.writerow([layer, j, repr(value)])


def residual_array(shift, keys_rows, diffs_rows):
    num, den = kernels.residual_norms(shift, keys_rows, diffs_rows)
    out = np.full(len(num), np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def residual_report(S, U, D, layer="layer"):
    """Residual report for one layer (column-convention ``U``, ``D``)."""
    U = np.asarray(U, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if U.shape[1] != D.shape[1]:
        raise ShapeError("keys and value differences must have the same number of columns")
    return ResidualReport({layer: residual_array(S, U.T, D.T)})


__all__ = [
    "AggregationResult", "NormalEquation", "ResidualReport", "SPDFactor", "SingularMatrixError",
    "aggregate_normal_eq", "aggregate_sum", "objective", "residual_report", "solve_spd",
]

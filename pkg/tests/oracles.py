"""Independent reference computations shared by unit and acceptance tests."""
import numpy as np


def ls_objective(S, U, D, lam):
    r = S @ U - D
    return float(np.sum(r * r) + lam * np.sum(S * S))


def gradient_descent_ls(U, D, lam, *, tol=1e-13, max_iter=500_000):
    """Minimize ``||S U - D||^2 + lam ||S||^2`` by plain gradient descent from zero.

    The step is ``1 / L`` with ``L`` the gradient's Lipschitz constant; the loop
    stops when the gradient norm falls below ``tol`` relative to its start.
    """
    U, D = np.asarray(U, dtype=np.float64), np.asarray(D, dtype=np.float64)
    L = 2.0 * (np.linalg.norm(U, 2) ** 2 + lam)
    S = np.zeros((D.shape[0], U.shape[0]))
    g0 = None
    for _ in range(max_iter):
        g = 2.0 * (S @ U - D) @ U.T + 2.0 * lam * S
        gn = np.linalg.norm(g)
        g0 = gn if g0 is None else g0
        if gn <= tol * max(g0, 1e-300):
            break
        S = S - g / L
    return S


def perturbation_wins(S, U, D, lam, rng, n_dirs=100, magnitudes=(1e-4, 1e-2, 1.0)):
    """Number of random perturbations ``S + eps`` that do not beat ``S``."""
    base = ls_objective(S, U, D, lam)
    scale = max(float(np.linalg.norm(S)), 1.0)
    wins = 0
    total = 0
    for mag in magnitudes:
        for _ in range(n_dirs):
            eps = rng.normal(size=S.shape)
            eps *= mag * scale / np.linalg.norm(eps)
            total += 1
            wins += base < ls_objective(S + eps, U, D, lam)
    return wins, total


def residual_by_hand(S, U, D):
    """Per-column residual ratios computed scalar by scalar."""
    out = []
    for j in range(U.shape[1]):
        num = den = 0.0
        for a in range(S.shape[0]):
            pred = 0.0
            for b in range(S.shape[1]):
                pred += S[a, b] * U[b, j]
            num += (pred - D[a, j]) ** 2
            den += D[a, j] ** 2
        out.append(np.sqrt(num) / np.sqrt(den))
    return out

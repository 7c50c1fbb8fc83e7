"""Least squares over products of probability simplices.

Solves ``min ||A x - b||^2 + mu ||x||^2`` where ``x`` splits into blocks, each
constrained to its own simplex. The main loop is accelerated projected
gradient with gradient-based restarts and exact Euclidean projection; once the
support settles, an equality-constrained solve on the support polishes the
iterate to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (final KKT residual {residual:.3g})")
        self.residual = residual


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = 1}`` (sort-based, exact)."""
    v = np.asarray(v, dtype=float)
    return project_rows(v[None, :])[0]


def project_rows(V: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Project each row of ``V`` onto the simplex over its ``mask``-ed entries."""
    V = np.array(V, dtype=float)
    if mask is not None:
        finite = np.where(mask, V, np.inf)
        lo = finite.min(axis=1, keepdims=True)
        hi = np.where(mask, V, -np.inf).max(axis=1, keepdims=True)
        V = np.where(mask, V, lo - 1e6 * (1 + hi - lo))
    m = V.shape[1]
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    k = np.arange(1, m + 1)
    cond = U - css / k > 0
    rho = m - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(V)), rho - 1] / rho
    X = np.maximum(V - theta[:, None], 0.0)
    if mask is not None:
        X[~mask] = 0.0
    return X


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    residual: float
    iterations: int
    polished: bool


class SimplexLSQ:
    """Quadratic ``||A x - b||^2 + mu ||x||^2`` over row-wise simplices.

    ``mask`` (J x m) marks admissible entries; ``A`` has ``J * m`` columns in
    row-major block order. ``blocks`` optionally adds separable terms
    ``sum_j ||A_j x_j - b_j||^2`` where ``A_j`` acts on row ``j`` only; these
    are applied block-diagonally rather than through a dense Gram matrix.
    """

    def __init__(self, A, b, mask, mu=0.0, blocks=None):
        self.mask = np.asarray(mask, bool)
        self.shape = self.mask.shape
        J, m = self.shape
        A = np.asarray(A, dtype=float).reshape(-1, J * m)
        b = np.asarray(b, dtype=float).reshape(-1)
        flat = self.mask.ravel()
        self.A = np.where(flat[None, :], A, 0.0)
        self.b = b
        self.mu = float(mu)
        self.grams = np.zeros((J, m, m))
        self.lin = np.zeros((J, m))
        self.bb = float(b @ b)
        for j, (Aj, bj) in enumerate(blocks or []):
            Aj = np.asarray(Aj, dtype=float)
            k = Aj.shape[1]
            self.grams[j, :k, :k] = Aj.T @ Aj
            self.lin[j, :k] = Aj.T @ bj
            self.bb += float(bj @ bj)
        self.grams *= self.mask[:, :, None] & self.mask[:, None, :]
        self.lin *= self.mask
        self.c = (self.A.T @ self.b).reshape(self.shape) + self.lin
        top = np.linalg.norm(self.A, 2) ** 2 if self.A.size else 0.0
        top += max((linalg.eigvalsh(G)[-1] for G in self.grams), default=0.0)
        self.L = 2.0 * (top + self.mu) or 1.0

    def _hess(self, X) -> np.ndarray:
        out = np.einsum("jkl,jl->jk", self.grams, X)
        if self.A.shape[0]:
            out += (self.A.T @ (self.A @ X.ravel())).reshape(self.shape)
        return out

    def _hess_sub(self, idx) -> np.ndarray:
        J, m = self.shape
        H = self.A[:, idx].T @ self.A[:, idx]
        rows, cols = np.divmod(idx, m)
        same = rows[:, None] == rows[None, :]
        H += np.where(same, self.grams[rows[:, None], cols[:, None], cols[None, :]], 0.0)
        return H

    def objective(self, X) -> float:
        X = np.asarray(X, dtype=float).reshape(self.shape)
        return float(np.sum(X * self._hess(X)) - 2 * np.sum(self.c * X) + self.bb + self.mu * np.sum(X * X))

    def gradient(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(self.shape)
        return 2.0 * (self._hess(X) - self.c + self.mu * X)

    def project(self, X) -> np.ndarray:
        return project_rows(X, self.mask)

    def residual(self, X) -> float:
        """Scaled gradient-mapping norm; zero exactly at a KKT point."""
        g = self.gradient(X)
        step = X - self.project(X - g / self.L)
        return float(self.L * np.max(np.abs(step)) / max(1.0, np.max(np.abs(g[self.mask]))))

    def uniform(self) -> np.ndarray:
        return self.mask / self.mask.sum(axis=1, keepdims=True)

    def polish(self, X, tol_support=1e-12):
        """Solve the equality-constrained problem on the current support."""
        S = (X > tol_support) & self.mask
        idx = np.flatnonzero(S.ravel())
        rows = np.nonzero(S)[0]
        J = self.shape[0]
        Q = 2.0 * (self._hess_sub(idx) + self.mu * np.eye(len(idx)))
        E = np.zeros((J, len(idx)))
        E[rows, np.arange(len(idx))] = 1.0
        K = np.block([[Q, E.T], [E, np.zeros((J, J))]])
        rhs = np.concatenate([2.0 * self.c.ravel()[idx], np.ones(J)])
        sol = linalg.lstsq(K, rhs, lapack_driver="gelsd")[0]
        z = sol[: len(idx)]
        if np.any(z < -1e-14):
            return None
        out = np.zeros(self.shape)
        out.ravel()[idx] = np.maximum(z, 0.0)
        out /= out.sum(axis=1, keepdims=True)
        return out

    def solve(self, x0=None, tol=1e-8, max_iter=10_000, check_every=25) -> QPResult:
        X = self.uniform() if x0 is None else self.project(np.asarray(x0, dtype=float).reshape(self.shape))
        Y = X.copy()
        t = 1.0
        res = self.residual(X)
        polished = False
        support = None
        for it in range(1, max_iter + 1):
            if res < tol:
                break
            X_new = self.project(Y - self.gradient(Y) / self.L)
            if np.sum((Y - X_new) * (X_new - X)) > 0:
                t = 1.0
                Y = X.copy()
                X_new = self.project(Y - self.gradient(Y) / self.L)
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            Y = X_new + ((t - 1) / t_new) * (X_new - X)
            X, t = X_new, t_new
            if it % check_every == 0:
                res = self.residual(X)
                if res < tol:
                    break
                now = X > 1e-12
                stable = support is not None and np.array_equal(now, support)
                support = now
                cand = self.polish(X) if stable else None
                if cand is not None:
                    r = self.residual(cand)
                    if r < tol and self.objective(cand) <= self.objective(X) + 1e-12 * (1 + abs(self.objective(X))):
                        X, res, polished = cand, r, True
                        break
        else:
            it = max_iter
        res = self.residual(X)
        if res >= tol:
            raise ConvergenceError(f"simplex least squares did not converge in {max_iter} iterations", res)
        return QPResult(X, self.objective(X), res, it, polished)

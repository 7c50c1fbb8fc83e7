"""Regression kernels: weighted least squares, logit and NB2 with cluster-robust covariance.

All fits return a :class:`RegressionFit`. Covariances are the one-way cluster
sandwich ``A^-1 (sum_c S_c S_c') A^-1`` without small-sample correction, so
that singleton clusters reproduce HC0 exactly. Per-cluster influence values
``psi_c = G A^-1 S_c`` are kept on the fit for multiplier-bootstrap use.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, special, stats

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-10


class SeparationError(ValueError):
    """Logistic likelihood has no finite maximiser (perfect or quasi-perfect separation)."""


@dataclass
class RegressionFit:
    names: list[str]
    coefficients: np.ndarray
    covariance: np.ndarray
    n_obs: int
    aliased: list[str] = field(default_factory=list)
    dispersion: float = 0.0
    converged: bool = True
    iterations: int = 0
    influence: np.ndarray | None = None
    cluster_labels: np.ndarray | None = None
    fitted: np.ndarray | None = None
    loglik_path: list[float] = field(default_factory=list)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no coefficient named {name!r}") from None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.index(name)])

    def se(self, name: str) -> float:
        k = self.index(name)
        return float(np.sqrt(self.covariance[k, k]))

    def is_aliased(self, name: str) -> bool:
        return name in self.aliased

    @property
    def kept(self) -> np.ndarray:
        return np.array([n not in self.aliased for n in self.names])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.coefficients)))


def _names(X, names):
    if names is None:
        return [f"x{k}" for k in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("names do not match design columns")
    return list(names)


def _as_design(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("design has zero rows")
    return X


def independent_columns(X: np.ndarray, tol: float = PIVOT_TOL) -> np.ndarray:
    """Indices of a maximal set of linearly independent columns, in original order.

    Pivoted QR; a column is aliased when its pivot falls below ``tol`` times
    the largest pivot.
    """
    if X.shape[1] == 0:
        return np.arange(0)
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0:
        return np.arange(0)
    rank = int(np.sum(d > tol * d[0]))
    return np.sort(piv[:rank])


def _cluster_index(clusters, n):
    if clusters is None:
        return np.arange(n), np.arange(n)
    labels, inv = np.unique(np.asarray(clusters), return_inverse=True)
    if len(inv) != n:
        raise ValueError("cluster labels do not match number of observations")
    return labels, inv


def sandwich(bread: np.ndarray, scores: np.ndarray, clusters=None):
    """Cluster-robust covariance and per-cluster influence.

    ``bread`` is the summed Hessian-type matrix ``A``; ``scores`` has one row
    per observation. Returns ``(cov, influence, labels)``.
    """
    n = scores.shape[0]
    labels, inv = _cluster_index(clusters, n)
    G = len(labels)
    S = np.zeros((G, scores.shape[1]))
    np.add.at(S, inv, scores)
    A_inv = linalg.inv(bread)
    A_inv = (A_inv + A_inv.T) / 2
    psi = G * S @ A_inv
    cov = psi.T @ psi / G**2
    return (cov + cov.T) / 2, psi, labels


def _embed(kept, p, beta, cov, psi):
    full_b = np.full(p, np.nan)
    full_b[kept] = beta
    full_c = np.full((p, p), np.nan)
    full_c[np.ix_(kept, kept)] = cov
    full_psi = np.full((psi.shape[0], p), np.nan)
    full_psi[:, kept] = psi
    return full_b, full_c, full_psi


def wls_fit(X, y, weights=None, clusters=None, names=None) -> RegressionFit:
    """Weighted least squares with pivoted alias detection and cluster-robust covariance."""
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = _names(X, names)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    sw = np.sqrt(w)
    kept = independent_columns(X * sw[:, None])
    if len(kept) < p:
        log.debug("wls_fit: aliased columns %s", [names[k] for k in np.setdiff1d(np.arange(p), kept)])
    Xk = X[:, kept]
    beta, *_ = linalg.lstsq(Xk * sw[:, None], y * sw, lapack_driver="gelsy")
    fitted = Xk @ beta
    resid = y - fitted
    bread = Xk.T @ (Xk * w[:, None])
    cov, psi, labels = sandwich(bread, Xk * (w * resid)[:, None], clusters)
    b, c, ps = _embed(kept, p, beta, cov, psi)
    return RegressionFit(
        names=names,
        coefficients=b,
        covariance=c,
        n_obs=n,
        aliased=[names[k] for k in range(p) if k not in set(kept)],
        influence=ps,
        cluster_labels=labels,
        fitted=fitted,
    )


def _logit_loglik(y, eta, w):
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logit_fit(X, y, clusters=None, names=None, weights=None, max_iter=100, tol=1e-9) -> RegressionFit:
    """Logistic regression by Newton-IRLS with step halving.

    Raises :class:`SeparationError` when fitted log-odds diverge, naming the
    column carrying the divergence.
    """
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = _names(X, names)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logit response must be 0/1")
    if y.min() == y.max():
        raise ValueError("logit response has a single class")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    kept = independent_columns(X)
    Xk = X[:, kept]

    beta = np.zeros(len(kept))
    ybar = np.average(y, weights=w)
    if np.allclose(Xk[:, 0], Xk[0, 0]) and Xk[0, 0] != 0:
        beta[0] = np.log(ybar / (1 - ybar)) / Xk[0, 0]
    eta = Xk @ beta
    ll = _logit_loglik(y, eta, w)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = special.expit(eta)
        grad = Xk.T @ (w * (y - mu))
        if np.linalg.norm(grad) / n < tol:
            converged = True
            break
        H = Xk.T @ (Xk * (w * mu * (1 - mu))[:, None])
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(H, grad)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = Xk @ cand
            ll_c = _logit_loglik(y, eta_c, w)
            if ll_c >= ll or t < 1e-10:
                break
            t /= 2
        if ll_c < ll:
            # no ascent possible at machine precision
            converged = np.linalg.norm(grad) / n < 1e-6
            break
        beta, eta, ll = cand, eta_c, ll_c
        path.append(ll)
        if np.max(np.abs(eta)) > 30:
            _raise_separation(Xk, beta, [names[k] for k in kept])
    mu = special.expit(eta)
    if not converged and np.max(np.abs(eta)) > 15:
        _raise_separation(Xk, beta, [names[k] for k in kept])
    bread = Xk.T @ (Xk * (w * mu * (1 - mu))[:, None])
    cov, psi, labels = sandwich(bread, Xk * (w * (y - mu))[:, None], clusters)
    b, c, ps = _embed(kept, p, beta, cov, psi)
    return RegressionFit(
        names=names,
        coefficients=b,
        covariance=c,
        n_obs=n,
        aliased=[names[k] for k in range(p) if k not in set(kept)],
        converged=converged,
        iterations=it,
        influence=ps,
        cluster_labels=labels,
        fitted=mu,
        loglik_path=path,
    )


def _raise_separation(X, beta, names):
    spread = X.std(axis=0)
    score = np.abs(beta) * np.where(spread > 0, spread, 0.0)
    k = int(np.argmax(score)) if score.max() > 0 else int(np.argmax(np.abs(beta)))
    raise SeparationError(
        f"logit separation: coefficient on {names[k]!r} diverges; "
        "fitted probabilities approach 0 or 1 (overlap failure)"
    )


def _nb_irls(X, y, offset, alpha, beta, max_iter=100, tol=1e-12):
    for it in range(1, max_iter + 1):
        eta = np.clip(X @ beta + offset, -700, 700)
        mu = np.exp(eta)
        w = mu / (1 + alpha * mu)
        z = eta - offset + (y - mu) / mu
        sw = np.sqrt(w)
        new = linalg.lstsq(X * sw[:, None], z * sw, lapack_driver="gelsy")[0]
        done = np.max(np.abs(new - beta)) < tol * (1 + np.max(np.abs(beta)))
        beta = new
        if done:
            return beta, it, True
    return beta, max_iter, False


def _moment_dispersion(y, mu, dof):
    """NB2 dispersion solving the Pearson moment condition sum (y-mu)^2/(mu(1+a mu)) = n - p."""
    def pearson(a):
        return np.sum((y - mu) ** 2 / (mu * (1 + a * mu))) - dof

    if pearson(0.0) <= 0:
        return 0.0
    hi = 1.0
    while pearson(hi) > 0:
        hi *= 2
        if hi > 1e8:
            return hi
    return optimize.brentq(pearson, 0.0, hi, xtol=1e-14, rtol=1e-12)


def negbin_fit(X, y, offset=None, clusters=None, names=None, dispersion=None, max_outer=200) -> RegressionFit:
    """NB2 regression ``log mu = X b + offset`` with variance ``mu + a mu^2``.

    ``b`` is fit by IRLS at fixed ``a``; ``a`` is updated from the Pearson
    moment condition; the two steps alternate to joint convergence. Passing
    ``dispersion=0`` gives Poisson regression.
    """
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = _names(X, names)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("negative-binomial response must be non-negative integers")
    if np.all(y == 0):
        raise ValueError("negative-binomial response is identically zero")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if not np.all(np.isfinite(offset)):
        raise ValueError("offset must be finite")
    kept = independent_columns(X)
    Xk = X[:, kept]

    mu0 = (y + y.mean()) / 2
    z0 = np.log(mu0) - offset
    beta = linalg.lstsq(Xk, z0, lapack_driver="gelsy")[0]
    fixed = dispersion is not None
    alpha = float(dispersion) if fixed else 0.0
    converged = False
    total = 0
    for outer in range(1, max_outer + 1):
        beta_new, it, ok = _nb_irls(Xk, y, offset, alpha, beta)
        total += it
        mu = np.exp(Xk @ beta_new + offset)
        if fixed:
            beta, converged = beta_new, ok
            break
        alpha_new = _moment_dispersion(y, mu, n - len(kept))
        db = np.max(np.abs(beta_new - beta)) / (1 + np.max(np.abs(beta)))
        da = abs(alpha_new - alpha) / (1 + alpha)
        beta, alpha = beta_new, alpha_new
        if ok and db < 1e-10 and da < 1e-10:
            converged = True
            break
    if not converged:
        log.warning("negbin_fit did not converge after %d outer iterations", max_outer)
    mu = np.exp(Xk @ beta + offset)
    w = mu / (1 + alpha * mu)
    bread = Xk.T @ (Xk * w[:, None])
    scores = Xk * ((y - mu) / (1 + alpha * mu))[:, None]
    cov, psi, labels = sandwich(bread, scores, clusters)
    b, c, ps = _embed(kept, p, beta, cov, psi)
    return RegressionFit(
        names=names,
        coefficients=b,
        covariance=c,
        n_obs=n,
        aliased=[names[k] for k in range(p) if k not in set(kept)],
        dispersion=alpha,
        converged=converged,
        iterations=total,
        influence=ps,
        cluster_labels=labels,
        fitted=mu,
    )


def poisson_fit(X, y, offset=None, clusters=None, names=None) -> RegressionFit:
    return negbin_fit(X, y, offset=offset, clusters=clusters, names=names, dispersion=0.0)


def irr(fit: RegressionFit, name: str, level: float = 0.95) -> tuple[float, tuple[float, float]]:
    """Incidence-rate ratio ``exp(b)`` with the interval ``exp(b -/+ z se)``."""
    if fit.is_aliased(name):
        raise ValueError(f"coefficient {name!r} is aliased")
    b, se = fit.coef(name), fit.se(name)
    z = stats.norm.ppf(0.5 + level / 2)
    return float(np.exp(b)), (float(np.exp(b - z * se)), float(np.exp(b + z * se)))

"""Dense linear algebra shared by the agents.

Rank-one inverse maintenance, Cholesky solves, G-optimal design via
Frank-Wolfe and the integer rounding of a design into a pull budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, DecompositionError, InvalidArgumentError, RankError

REVALIDATE_EVERY = 1000
INVERSE_TOL = 1e-8


@dataclass
class CovarianceState:
    """``A = lam * I + sum x x^T`` with its inverse and log-determinant.

    The inverse is kept current with Sherman-Morrison updates and checked
    against ``A`` every ``REVALIDATE_EVERY`` updates; if drift exceeds
    ``INVERSE_TOL`` (Frobenius) the inverse is recomputed from scratch.
    """

    A: np.ndarray
    A_inv: np.ndarray
    logdet: float
    lam: float
    n_updates: int = 0
    n_refreshes: int = 0

    @classmethod
    def identity(cls, d: int, lam: float = 1.0) -> "CovarianceState":
        if lam <= 0:
            raise InvalidArgumentError(f"lambda must be positive, got {lam}")
        return cls(A=lam * np.eye(d), A_inv=np.eye(d) / lam, logdet=d * math.log(lam), lam=lam)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def update(self, x) -> "CovarianceState":
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise InvalidArgumentError(f"expected vector of length {self.d}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("update vector must be finite")
        Ax = self.A_inv @ x
        denom = 1.0 + x @ Ax
        self.A += np.outer(x, x)
        self.A_inv -= np.outer(Ax, Ax) / denom
        self.logdet += math.log(denom)
        self.n_updates += 1
        if self.n_updates % REVALIDATE_EVERY == 0:
            self.revalidate()
        return self

    def inverse_error(self) -> float:
        return float(np.linalg.norm(self.A @ self.A_inv - np.eye(self.d)))

    def revalidate(self) -> None:
        if self.inverse_error() > INVERSE_TOL:
            self.A_inv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(self.A), np.eye(self.d))
            self.n_refreshes += 1
        # symmetrise to stop slow drift of the rank-one recursion
        self.A_inv = 0.5 * (self.A_inv + self.A_inv.T)


def sherman_morrison_update(state: CovarianceState, x) -> CovarianceState:
    """``A <- A + x x^T`` with ``A_inv`` and ``logdet`` kept consistent (in place)."""
    return state.update(x)


def chol_solve(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A``."""
    A = np.asarray(A, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(A, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DecompositionError(f"matrix is not symmetric positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, np.asarray(b, dtype=float))


@dataclass
class DesignWeights:
    """A probability distribution over the arm set.

    ``weights`` has one entry per arm (zeros off the support); ``value`` is
    the design criterion ``max_x ||x||^2_{V(zeta)^-1}``.
    """

    weights: np.ndarray
    value: float
    iterations: int = 0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)


def design_matrix(X: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (X * weights[:, None]).T @ X


def leverages(X: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``||x||^2_{V(zeta)^-1}`` for every row of ``X``."""
    V = design_matrix(X, weights)
    try:
        factor = scipy.linalg.cho_factor(V)
    except np.linalg.LinAlgError:
        return np.full(X.shape[0], np.inf)
    return np.einsum("ij,ji->i", X, scipy.linalg.cho_solve(factor, X.T))


def g_optimal_design(arms, tol: float = 0.01, max_iters: int | None = None) -> DesignWeights:
    """Approximate G-optimal design over the arm set.

    Solved as the equivalent D-optimal problem with Frank-Wolfe (Fedorov-Wynn
    exact line search, plus away steps) from the uniform design, stopping
    once ``max_x ||x||^2_{V^-1} <= d (1 + tol)``. Weights below ``1e-6 / K``
    are dropped and the rest renormalised.
    """
    X = np.asarray(getattr(arms, "features", arms), dtype=float)
    K, d = X.shape
    if np.linalg.matrix_rank(X) < d:
        raise RankError(f"arm features span rank {np.linalg.matrix_rank(X)} < d = {d}")
    if max_iters is None:
        max_iters = 10 * K * d
    target = d * (1.0 + tol)
    w = np.full(K, 1.0 / K)
    best_w, best_val = w.copy(), np.inf
    it = 0
    while True:
        g = leverages(X, w)
        val = float(g.max())
        if val < best_val:
            best_w, best_val = w.copy(), val
        if val <= target:
            break
        if it >= max_iters:
            raise ConvergenceError(
                f"design value {best_val:.6g} > {target:.6g} after {max_iters} iterations",
                best=_finalize(X, best_w, best_val, it),
            )
        k_up = int(np.argmax(g))
        supp = np.flatnonzero(w > 0)
        k_down = int(supp[np.argmin(g[supp])])
        if g[k_up] - d >= d - g[k_down] or w[k_down] >= 1.0:
            gk = g[k_up]
            step = (gk / d - 1.0) / (gk - 1.0)
            w *= 1.0 - step
            w[k_up] += step
        else:
            gk = g[k_down]
            # negative step moves mass off k_down; clip to keep w >= 0.
            # for gk <= 1 the objective keeps rising, so drop k_down entirely
            step = -w[k_down] / (1.0 - w[k_down])
            if gk > 1.0:
                step = max(step, (gk / d - 1.0) / (gk - 1.0))
            w *= 1.0 - step
            w[k_down] += step
            w[w < 0] = 0.0
        w /= w.sum()
        it += 1
    return _finalize(X, w, val, it)


def _finalize(X, w, val, it) -> DesignWeights:
    K = X.shape[0]
    w = np.where(w < 1e-6 / K, 0.0, w)
    w /= w.sum()
    g = leverages(X, w)
    return DesignWeights(weights=w, value=float(g.max()) if np.all(np.isfinite(g)) else val,
                         iterations=it)


def round_design(tau: int, zeta, eps: float = 0.5, d: int | None = None) -> np.ndarray:
    """Integer pull counts for the support of a design, summing to ``tau``.

    ``zeta`` holds the (positive) support weights. Counts start at
    ``ceil((tau - p/2) * zeta_i)`` and are balanced one unit at a time: add to
    ``argmin (N_i - 1)/zeta_i`` while short, remove from ``argmax`` while over.
    When ``d`` is given the lower bound ``ceil(r(eps) / p)`` with
    ``r(eps) = (d(d+1)/2 + 1) / eps`` is applied and the budget rebalanced.
    """
    zeta = np.asarray(zeta, dtype=float).ravel()
    p = zeta.size
    if p == 0 or np.any(zeta <= 0):
        raise InvalidArgumentError("support weights must be positive and non-empty")
    if not 0 < eps < 1:
        raise InvalidArgumentError(f"eps must lie in (0, 1), got {eps}")
    if tau < p:
        raise InvalidArgumentError(f"tau = {tau} is smaller than the support size {p}")
    zeta = zeta / zeta.sum()
    counts = np.ceil((tau - p / 2.0) * zeta).astype(np.int64)
    _balance(counts, zeta, tau)
    if d is not None:
        r = (d * (d + 1) / 2.0 + 1.0) / eps
        floor = int(math.ceil(r / p))
        np.maximum(counts, floor, out=counts)
        _balance(counts, zeta, tau)
    return counts


def _balance(counts: np.ndarray, zeta: np.ndarray, tau: int) -> None:
    total = int(counts.sum())
    while total != tau:
        score = (counts - 1) / zeta
        if total < tau:
            j = int(np.argmin(score))
            counts[j] += 1
            total += 1
        else:
            j = int(np.argmax(score))
            counts[j] -= 1
            total -= 1

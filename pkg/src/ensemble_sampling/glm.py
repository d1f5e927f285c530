"""Generalized linear reward models.

Link functions, the lambda-regularised negative log-likelihood

    L(theta) = lam/2 ||theta||^2 - sum_l (y_l x_l^T theta - b(x_l^T theta)),   b' = mu,

its gradient, gradient-descent maximum likelihood, and the G-optimal warm-up
schedule used by GLM-ES.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import DivergenceError, InvalidArgumentError
from .linalg import g_optimal_design, round_design


class LinkKind(str, Enum):
    IDENTITY = "identity"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class LinkFunction:
    """A strictly increasing link with derivative bounds on ``|u| <= S``.

    ``M`` is the self-concordance constant: ``|mu''(u)| <= M mu'(u)``.
    """

    kind: LinkKind
    mu_dot_min: float
    mu_dot_max: float
    M: float

    @classmethod
    def identity(cls) -> "LinkFunction":
        return cls(LinkKind.IDENTITY, 1.0, 1.0, 1.0)

    @classmethod
    def logistic(cls, S: float = 1.0) -> "LinkFunction":
        s = expit(S)
        return cls(LinkKind.LOGISTIC, float(s * (1 - s)), 0.25, 1.0)

    @classmethod
    def from_name(cls, name: str, S: float = 1.0) -> "LinkFunction":
        if name == LinkKind.IDENTITY.value:
            return cls.identity()
        if name == LinkKind.LOGISTIC.value:
            return cls.logistic(S)
        raise InvalidArgumentError(f"unknown link {name!r}")

    @property
    def is_logistic(self) -> bool:
        return self.kind is LinkKind.LOGISTIC

    def value(self, u):
        return expit(u) if self.is_logistic else np.asarray(u, dtype=float) * 1.0

    def derivative(self, u):
        if self.is_logistic:
            s = expit(u)
            return s * (1.0 - s)
        return np.ones_like(np.asarray(u, dtype=float))

    def cumulant(self, u):
        """``b(u)`` with ``b' = mu``: ``u^2/2`` or an overflow-free softplus."""
        u = np.asarray(u, dtype=float)
        if self.is_logistic:
            return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
        return 0.5 * u * u


def link_value(link: LinkFunction, u):
    return link.value(u)


def link_derivative(link: LinkFunction, u):
    return link.derivative(u)


@dataclass
class GlmDataset:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float).ravel()
        if xs.size == 0:
            xs = xs.reshape(0, xs.shape[-1] if xs.ndim == 2 else 0)
        if xs.ndim != 2:
            raise InvalidArgumentError(f"xs must be 2-d, got shape {xs.shape}")
        if xs.shape[0] != ys.shape[0]:
            raise InvalidArgumentError(f"{xs.shape[0]} feature rows but {ys.shape[0]} targets")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise InvalidArgumentError("dataset contains non-finite values")
        if xs.shape[0] and np.linalg.norm(xs, axis=1).max() > 1 + 1e-12:
            raise InvalidArgumentError("feature vectors must have norm <= 1")
        self.xs, self.ys = xs, ys

    @classmethod
    def empty(cls, d: int) -> "GlmDataset":
        return cls(np.zeros((0, d)), np.zeros(0))

    def __len__(self):
        return self.xs.shape[0]


def nll_value_grad(theta, data: GlmDataset, lam: float, link: LinkFunction):
    """Value and gradient of the regularised negative log-likelihood."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("theta must be finite")
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    u = data.xs @ theta
    value = 0.5 * lam * theta @ theta - np.sum(data.ys * u - link.cumulant(u))
    grad = data.xs.T @ (link.value(u) - data.ys) + lam * theta
    return float(value), grad


def stable_step(lam: float, link: LinkFunction, n: int) -> float:
    """Largest step for which GD on ``n`` samples is guaranteed monotone.

    The Hessian is bounded by ``(lam + mu_dot_max * n) I`` when every feature
    has norm at most one.
    """
    return 1.0 / (lam + link.mu_dot_max * n)


def fit_mle(data: GlmDataset, lam: float, link: LinkFunction, iters: int = 100,
            step: float = 0.01, theta_init=None, return_trace: bool = False):
    """Regularised MLE by ``iters`` full-batch gradient steps.

    Starts from ``theta_init`` (warm start) or zero. The objective is tracked
    at every iterate: an increase is an error when ``step`` is below
    :func:`stable_step`, and only a warning otherwise.
    """
    if iters < 1:
        raise InvalidArgumentError(f"iters must be >= 1, got {iters}")
    if step <= 0:
        raise InvalidArgumentError(f"step must be positive, got {step}")
    d = data.xs.shape[1]
    theta = np.zeros((1, d)) if theta_init is None else np.array(theta_init, dtype=float).reshape(1, d)
    losses = np.empty((1, iters + 1))
    with np.errstate(over="ignore", invalid="ignore"):
        kernels.glm_gd(theta, np.ascontiguousarray(data.xs), np.ones(len(data)),
                       np.ascontiguousarray(data.ys[None, :]), float(lam), link.is_logistic,
                       int(iters), float(step), losses)
    trace = losses[0]
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(trace))):
        raise DivergenceError(f"gradient descent diverged (step={step}, n={len(data)})")
    rises = np.diff(trace) > 1e-9 * np.maximum(1.0, np.abs(trace[:-1]))
    if np.any(rises):
        msg = f"objective increased during gradient descent (step={step}, n={len(data)})"
        if step <= stable_step(lam, link, len(data)):
            raise AssertionError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if return_trace:
        return theta[0], trace
    return theta[0]


def interleave_counts(support, counts) -> list[int]:
    """Round-robin over support arms, each emitted ``counts[i]`` times."""
    remaining = list(int(c) for c in counts)
    order = []
    while any(remaining):
        for i, arm in enumerate(support):
            if remaining[i]:
                order.append(int(arm))
                remaining[i] -= 1
    return order


def glm_warmup_schedule(arms, tau: int, eps: float = 0.5, tol: float = 0.01) -> list[int]:
    """Arm indices for ``tau`` warm-up pulls following a G-optimal design."""
    X = np.asarray(getattr(arms, "features", arms), dtype=float)
    d = X.shape[1]
    if tau < d:
        raise InvalidArgumentError(f"tau = {tau} must be at least d = {d}")
    design = g_optimal_design(X, tol=tol)
    support = design.support
    counts = round_design(tau, design.weights[support], eps, d=d)
    return interleave_counts(support, counts)


def warmup_length_theory(iota: float, d: int, mu_dot_min: float) -> int:
    """``ceil(1.5 iota^2 d / mu_dot_min)``."""
    if iota <= 0 or d <= 0 or mu_dot_min <= 0:
        raise InvalidArgumentError("iota, d and mu_dot_min must be positive")
    # float noise just above an integer must not bump the ceiling
    return int(math.ceil(round(1.5 * iota ** 2 * d / mu_dot_min, 9)))


def theoretical_lambda(d: int, M: float, S: float, T: int, lipschitz: float = 0.25,
                       delta: float = 0.05) -> float:
    """Regulariser from the GLM-ES regret analysis:
    ``1 v (2 d M / S) log(e sqrt(1 + T L / d) v 1/delta)``.
    """
    inner = max(math.e * math.sqrt(1 + T * lipschitz / d), 1.0 / delta)
    return max(1.0, 2 * d * M / S * math.log(inner))

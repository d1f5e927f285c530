"""Bias-free ReLU network used by Neural-ES, with NTK diagnostics.

The network is ``f(x; theta) = sqrt(N) W_L relu(W_{L-1} relu(... relu(W_1 x)))``
with ``W_1`` of shape (N, d), ``L - 2`` hidden (N, N) layers and ``W_L`` of
shape (1, N). The flat parameter vector concatenates the layers in order,
each flattened row-major.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DivergenceError, InvalidArgumentError
from .glm import GlmDataset
from .kernels import layer_offsets


def param_count(d: int, width: int, depth: int) -> int:
    return width * d + (depth - 2) * width * width + width


@dataclass
class NetworkParams:
    """Flat parameter vector plus the (d, N, L) shape needed to read it."""

    flat: np.ndarray
    d: int
    width: int
    depth: int

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        if self.depth < 2:
            raise InvalidArgumentError(f"depth must be >= 2, got {self.depth}")
        if self.flat.shape != (param_count(self.d, self.width, self.depth),):
            raise InvalidArgumentError(
                f"flat vector has shape {self.flat.shape}, expected "
                f"({param_count(self.d, self.width, self.depth)},)"
            )

    @property
    def layers(self) -> list[np.ndarray]:
        """Views of the weight matrices; ``W_L`` is returned with shape (1, N)."""
        offs = layer_offsets(self.d, self.width, self.depth)
        N = self.width
        out = [self.flat[offs[0]:offs[1]].reshape(N, self.d)]
        for l in range(1, self.depth - 1):
            out.append(self.flat[offs[l]:offs[l + 1]].reshape(N, N))
        out.append(self.flat[offs[-2]:offs[-1]].reshape(1, N))
        return out

    @classmethod
    def from_layers(cls, layers) -> "NetworkParams":
        layers = [np.asarray(W, dtype=float) for W in layers]
        width, d = layers[0].shape
        flat = np.concatenate([W.ravel() for W in layers])
        return cls(flat, d, width, len(layers))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.flat.copy(), self.d, self.width, self.depth)


def duplicate_context(x) -> np.ndarray:
    """``[x; x] / sqrt(2)``: same norm, identical halves."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, x], axis=-1) / math.sqrt(2.0)


def init_network(d: int, width: int, depth: int, rng: np.random.Generator) -> NetworkParams:
    """Mirror-symmetric initialisation.

    Every layer but the last is ``blockdiag(W, W)`` with entries of ``W`` drawn
    from N(0, 4/N); the output layer is ``(w, -w)`` with entries N(0, 2/N).
    Inputs with identical halves therefore produce an output of exactly zero.
    """
    if d % 2 or width % 2:
        raise InvalidArgumentError(f"d and width must be even, got d={d}, width={width}")
    if depth < 2:
        raise InvalidArgumentError(f"depth must be >= 2, got {depth}")
    h = width // 2
    layers = []
    fan_in = d
    for _ in range(depth - 1):
        W = rng.normal(0.0, math.sqrt(4.0 / width), size=(h, fan_in // 2))
        block = np.zeros((width, fan_in))
        block[:h, :fan_in // 2] = W
        block[h:, fan_in // 2:] = W
        layers.append(block)
        fan_in = width
    w = rng.normal(0.0, math.sqrt(2.0 / width), size=h)
    layers.append(np.concatenate([w, -w])[None, :])
    return NetworkParams.from_layers(layers)


def _check_input(params: NetworkParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != params.d:
        raise InvalidArgumentError(f"input dimension {X.shape[-1]} != network input {params.d}")
    return X


def forward_batch(params: NetworkParams, X) -> np.ndarray:
    X = np.atleast_2d(_check_input(params, X))
    layers = params.layers
    h = X
    for W in layers[:-1]:
        h = np.maximum(h @ W.T, 0.0)
    return math.sqrt(params.width) * (h @ layers[-1][0])


def forward(params: NetworkParams, x) -> float:
    x = _check_input(params, x)
    if x.ndim != 1:
        raise InvalidArgumentError(f"x must be a vector, got shape {x.shape}")
    return float(forward_batch(params, x[None, :])[0])


def grad_params(params: NetworkParams, x) -> np.ndarray:
    """Gradient of ``f(x; theta)`` w.r.t. the flat parameters (ReLU'(0) = 0)."""
    x = _check_input(params, x)
    if x.ndim != 1:
        raise InvalidArgumentError(f"x must be a vector, got shape {x.shape}")
    layers = params.layers
    sq = math.sqrt(params.width)
    acts = [x]
    for W in layers[:-1]:
        acts.append(np.maximum(W @ acts[-1], 0.0))
    grads = [None] * len(layers)
    grads[-1] = sq * acts[-1][None, :]
    delta = sq * layers[-1][0] * (acts[-1] > 0)
    for l in range(len(layers) - 2, -1, -1):
        grads[l] = np.outer(delta, acts[l])
        if l:
            delta = (layers[l].T @ delta) * (acts[l] > 0)
    return np.concatenate([g.ravel() for g in grads])


def _flat(theta) -> np.ndarray:
    return theta.flat if isinstance(theta, NetworkParams) else np.asarray(theta, dtype=float)


def neural_loss_grad(theta: NetworkParams, data: GlmDataset, lam: float, width: int,
                     theta0: NetworkParams):
    """Value and gradient of ``1/2 sum (f(x_l) - y_l)^2 + 1/2 lam N ||theta - theta0||^2``."""
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    flat, flat0 = _flat(theta), _flat(theta0)
    if not np.all(np.isfinite(flat)):
        raise InvalidArgumentError("parameters must be finite")
    diff = flat - flat0
    value = 0.5 * lam * width * diff @ diff
    grad = lam * width * diff
    if len(data):
        resid = forward_batch(theta, data.xs) - data.ys
        value += 0.5 * resid @ resid
        for r, x in zip(resid, data.xs):
            if r:
                grad = grad + r * grad_params(theta, x)
    return float(value), grad


def train_gd(theta_init: NetworkParams, data: GlmDataset, lam: float, width: int,
             theta0: NetworkParams, iters: int = 100, step: float = 0.01,
             return_trace: bool = False, n_threads: int = 1):
    """``iters`` full-batch gradient steps on :func:`neural_loss_grad` from ``theta_init``."""
    if iters < 1:
        raise InvalidArgumentError(f"iters must be >= 1, got {iters}")
    if step <= 0:
        raise InvalidArgumentError(f"step must be positive, got {step}")
    if width != theta_init.width:
        raise InvalidArgumentError(f"width {width} does not match the network ({theta_init.width})")
    params = theta_init.flat.copy()[None, :]
    params0 = np.ascontiguousarray(_flat(theta0)[None, :])
    ys = data.ys
    losses = np.empty((1, iters + 1))
    with np.errstate(over="ignore", invalid="ignore"):
        kernels.neural_gd(params, params0, np.ascontiguousarray(data.xs), np.ones(len(data)),
                          np.ascontiguousarray(ys[None, :]), np.ascontiguousarray((ys * ys)[None, :]),
                          theta_init.width, theta_init.depth, float(lam), int(iters), float(step),
                          losses, n_threads)
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(losses))):
        raise DivergenceError(f"gradient descent diverged (step={step}, n={len(data)})")
    out = NetworkParams(params[0], theta_init.d, theta_init.width, theta_init.depth)
    if return_trace:
        return out, losses[0]
    return out


# --- NTK diagnostics -------------------------------------------------------

@dataclass
class NtkDiagnostics:
    gram: np.ndarray
    effective_dim: float
    S_neural: float


def ntk_gram(params0: NetworkParams, X) -> np.ndarray:
    """``<g(x_i; theta0), g(x_j; theta0)> / N`` over the rows of ``X``."""
    G = np.stack([grad_params(params0, x) for x in np.atleast_2d(X)])
    gram = G @ G.T / params0.width
    return 0.5 * (gram + gram.T)


def effective_dimension(gram, T: float, K: int, lam: float) -> float:
    """``log det(I + T H / lam) / log(1 + T K / lam)``."""
    H = np.asarray(gram, dtype=float)
    eig = np.linalg.eigvalsh(0.5 * (H + H.T))
    if eig.size and eig.min() < -1e-8:
        raise InvalidArgumentError(f"gram matrix is not PSD (min eigenvalue {eig.min():.3g})")
    eig = np.clip(eig, 0.0, None)
    return float(np.sum(np.log1p(T * eig / lam)) / math.log1p(T * K / lam))


def ntk_diagnostics(params0: NetworkParams, X, h, T: int, lam: float) -> NtkDiagnostics:
    """Gram matrix, effective dimension and ``sqrt(2 h^T H^-1 h)`` on the arm set."""
    gram = ntk_gram(params0, X)
    h = np.asarray(h, dtype=float)
    sol = np.linalg.lstsq(gram, h, rcond=None)[0]
    return NtkDiagnostics(gram=gram, effective_dim=effective_dimension(gram, T, gram.shape[0], lam),
                          S_neural=float(math.sqrt(max(2.0 * h @ sol, 0.0))))


def alpha_t(sigma: float, logdet_A: float, dim: int, lam: float, delta: float, S: float) -> float:
    """``sqrt(sigma^2 log(det A_t / (delta^2 det(lam I)))) + sqrt(lam) S``."""
    log_ratio = logdet_A - 2.0 * math.log(delta) - dim * math.log(lam)
    return math.sqrt(sigma ** 2 * max(log_ratio, 0.0)) + math.sqrt(lam) * S


def theoretical_sigma_r(alpha_T: float, lam: float, lambda_K: float) -> float:
    """``alpha_T (1 - lam / lambda_K(A_K))^(-1/2)``; needs ``lambda_K > lam``."""
    if not lambda_K > lam:
        raise InvalidArgumentError(f"lambda_K(A_K) = {lambda_K} must exceed lambda = {lam}")
    if math.isinf(lambda_K):
        return float(alpha_T)
    return alpha_T / math.sqrt(1.0 - lam / lambda_K)

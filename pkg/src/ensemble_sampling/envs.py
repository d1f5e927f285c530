"""Synthetic bandit environments.

Each environment is a fixed arm set plus a reward model ``Y = h(X) + eta``
with Gaussian noise ``eta ~ N(0, sigma^2)``. Four reward models are
provided: linear, logistic, distance and quadratic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import InvalidArgumentError

NORM_TOL = 1e-12

# spawn-key namespace for instance generation; keeps it apart from the
# episode streams derived from the same seed
_INSTANCE_STREAM = 1_000


class RewardKind(str, Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    DISTANCE = "distance"
    QUADRATIC = "quadratic"

    @classmethod
    def parse(cls, kind) -> "RewardKind":
        if isinstance(kind, cls):
            return kind
        try:
            return cls(str(kind).lower())
        except ValueError:
            raise InvalidArgumentError(
                f"unknown reward kind {kind!r}; expected one of "
                f"{[k.value for k in cls]}"
            ) from None


@dataclass(frozen=True)
class ArmSet:
    """Fixed finite set of ``K`` arm feature vectors in R^d, one per row."""

    features: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        if x.ndim != 2:
            raise InvalidArgumentError(f"features must be 2-d (K, d), got shape {x.shape}")
        if x.shape[0] < 2:
            raise InvalidArgumentError(f"need at least 2 arms, got {x.shape[0]}")
        if x.shape[1] < 1:
            raise InvalidArgumentError("feature dimension must be positive")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("arm features must be finite")
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms > 1.0 + NORM_TOL):
            raise InvalidArgumentError(
                f"arm {int(np.argmax(norms))} has norm {norms.max():.6g} > 1"
            )
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.K

    def __getitem__(self, i):
        return self.features[i]


@dataclass(frozen=True)
class RewardModel:
    """Mean-reward function ``h`` with its hidden parameter and noise level.

    ``theta_star`` is used by the linear, logistic and distance models;
    ``A`` only by the quadratic model, whose mean is ``1e-2 * x^T A A^T x``.
    """

    kind: RewardKind
    theta_star: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    noise_sigma: float = 0.5
    S: float = 1.0

    def __post_init__(self):
        kind = RewardKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.noise_sigma < 0 or not np.isfinite(self.noise_sigma):
            raise InvalidArgumentError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if kind is RewardKind.QUADRATIC:
            if self.A is None:
                raise InvalidArgumentError("quadratic model needs the matrix A")
            A = np.array(self.A, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise InvalidArgumentError(f"A must be square, got shape {A.shape}")
            A.setflags(write=False)
            object.__setattr__(self, "A", A)
        else:
            if self.theta_star is None:
                raise InvalidArgumentError(f"{kind.value} model needs theta_star")
            th = np.array(self.theta_star, dtype=float).ravel()
            if kind in (RewardKind.LINEAR, RewardKind.LOGISTIC):
                if np.linalg.norm(th) > self.S * (1 + 1e-12):
                    raise InvalidArgumentError(
                        f"||theta_star|| = {np.linalg.norm(th):.6g} exceeds S = {self.S}"
                    )
            th.setflags(write=False)
            object.__setattr__(self, "theta_star", th)

    @property
    def d(self) -> int:
        if self.kind is RewardKind.QUADRATIC:
            return self.A.shape[0]
        return self.theta_star.shape[0]

    def mean_rewards(self, X) -> np.ndarray:
        """Vectorised ``h`` over the rows of ``X`` (shape ``(n, d)``)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise InvalidArgumentError(f"expected dimension {self.d}, got {X.shape[1]}")
        if self.kind is RewardKind.LINEAR:
            return X @ self.theta_star
        if self.kind is RewardKind.LOGISTIC:
            return expit(X @ self.theta_star)
        if self.kind is RewardKind.DISTANCE:
            return -np.linalg.norm(X - self.theta_star, axis=1)
        proj = X @ self.A
        return 1e-2 * np.einsum("ij,ij->i", proj, proj)

    def mean_reward(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise InvalidArgumentError(f"x must be a vector, got shape {x.shape}")
        return float(self.mean_rewards(x[None, :])[0])

    def sample_reward(self, x, rng: np.random.Generator) -> float:
        """One noisy observation at ``x``.

        Exactly one standard normal is drawn from ``rng`` per call, whatever
        the noise level, so streams stay aligned across noise settings.
        """
        mean = self.mean_reward(x)
        z = rng.standard_normal()
        if self.noise_sigma == 0:
            return mean
        return mean + self.noise_sigma * z


def mean_reward(model: RewardModel, x) -> float:
    return model.mean_reward(x)


def sample_reward(model: RewardModel, x, rng: np.random.Generator) -> float:
    return model.sample_reward(x, rng)


def optimal_arm(model: RewardModel, arms: ArmSet) -> tuple[int, float]:
    """Index and mean reward of the best arm; ties go to the lowest index."""
    feats = arms.features if isinstance(arms, ArmSet) else np.asarray(arms, dtype=float)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise InvalidArgumentError("arm set is empty")
    values = model.mean_rewards(feats)
    i = int(np.argmax(values))
    return i, float(values[i])


def _sample_ball(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    radius = rng.uniform(size=n) ** (1.0 / d)
    return g * radius[:, None]


def generate_instance(kind, K: int, d: int, seed: int, noise_sigma: float = 0.5,
                      S: float = 1.0) -> tuple[ArmSet, RewardModel]:
    """Sample an arm set and reward model; a pure function of its arguments.

    Arm directions are uniform on the unit sphere with radius ``U^(1/d)``
    (uniform in the unit ball). ``theta_star`` is a uniform direction scaled
    to norm ``S``; the quadratic ``A`` has i.i.d. N(0, 1) entries.
    """
    kind = RewardKind.parse(kind)
    if K < 2:
        raise InvalidArgumentError(f"K must be >= 2, got {K}")
    if d < 1:
        raise InvalidArgumentError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_INSTANCE_STREAM,)))
    arms = ArmSet(_sample_ball(rng, K, d))
    direction = rng.standard_normal(d)
    theta = S * direction / np.linalg.norm(direction)
    if kind is RewardKind.QUADRATIC:
        model = RewardModel(kind, A=rng.standard_normal((d, d)), noise_sigma=noise_sigma, S=S)
    else:
        model = RewardModel(kind, theta_star=theta, noise_sigma=noise_sigma, S=S)
    return arms, model

"""Ensemble-sampling agents, baselines, the anytime wrapper and the episode loop.

Every agent follows the same protocol: ``select()`` returns the arm to pull
and ``observe(arm, reward)`` feeds back the reward. Ensemble agents keep
``m`` models fitted on the shared history with member-specific reward
perturbations; each round draws exactly one fresh perturbation per member
and never redraws past ones.

Random streams are derived from the episode seed with fixed spawn keys
(see :func:`make_rng`), one per ensemble member plus one for model selection
and one for environment noise, so results do not depend on execution order.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from . import kernels
from .envs import ArmSet, RewardModel
from .errors import DivergenceError, InvalidArgumentError, StateError
from .glm import LinkFunction, glm_warmup_schedule, stable_step
from .linalg import CovarianceState
from .neural import duplicate_context, init_network, param_count

# spawn-key slots; agent streams are keyed (segment, slot, member)
ENV_NOISE = 0
SELECT = 1
PERTURB = 2
INIT = 3
POLICY = 4

GOLDEN_B = (3.0 + math.sqrt(5.0)) / 2.0


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for stream ``key`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


class Variant(str, Enum):
    LIN_ES = "LinES"
    GLM_ES = "GlmES"
    NEURAL_ES = "NeuralES"
    LIN_UCB = "LinUCB"
    LIN_TS = "LinTS"
    UNIFORM = "UniformRandom"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise InvalidArgumentError(
                f"unknown variant {value!r}; expected one of {[v.value for v in cls]}"
            ) from None


class StepRule(str, Enum):
    """How the configured step size is applied to the summed loss over ``n`` samples.

    ``fixed`` uses it as is; ``capped`` uses ``min(step, 1 / (lam + mu_dot_max n))``
    (GLM only); ``per_sample`` uses ``step / n``, i.e. descent on the mean loss.
    """

    FIXED = "fixed"
    CAPPED = "capped"
    PER_SAMPLE = "per_sample"


DEFAULT_STEP_RULE = {"GlmES": StepRule.PER_SAMPLE, "NeuralES": StepRule.PER_SAMPLE}


@dataclass(frozen=True)
class DoublingSchedule:
    """Restart points ``T_i = floor(t0 b^i)`` and the per-segment parameter rule.

    A segment of planned length ``tau_i`` runs with
    ``m = max(1, ceil(m_coef ln tau_i))`` members and
    ``sigma_r = sigma_coef ln tau_i``.
    """

    t0: int = 100
    b: float = GOLDEN_B
    m_coef: float = 2.0
    sigma_coef: float = 0.02

    def __post_init__(self):
        if self.t0 < 1:
            raise InvalidArgumentError(f"t0 must be >= 1, got {self.t0}")
        if not self.b > 1:
            raise InvalidArgumentError(f"b must exceed 1, got {self.b}")

    def boundary(self, i: int) -> int:
        return int(math.floor(self.t0 * self.b ** i))

    def segment_length(self, i: int) -> int:
        return self.boundary(0) if i == 0 else self.boundary(i) - self.boundary(i - 1)

    def segment_params(self, i: int) -> tuple[int, float]:
        log_tau = math.log(self.segment_length(i))
        return max(1, math.ceil(self.m_coef * log_tau)), self.sigma_coef * log_tau


def doubling_boundaries(schedule: DoublingSchedule, horizon: int) -> list[int]:
    """All ``T_i <= horizon``."""
    out = []
    i = 0
    while True:
        Ti = schedule.boundary(i)
        if Ti > horizon:
            return out
        if out and Ti <= out[-1]:
            raise InvalidArgumentError(f"schedule is not strictly increasing at i={i}")
        out.append(Ti)
        i += 1


@dataclass
class AgentConfig:
    variant: Variant
    name: str = ""
    m: int = 10
    lam: float = 1.0
    sigma_r: float = 0.1
    tau: int = 0
    iters: int = 100
    step: float = 0.01
    step_rule: Optional[StepRule] = None
    warm_start: bool = True
    link: str = "logistic"
    eps: float = 0.5
    design_tol: float = 0.01
    width: int = 20
    depth: int = 3
    prior_scale: float = 1.0
    alpha: float = 1.0
    posterior_scale: float = 0.5
    n_threads: int = 1
    anytime: Optional[DoublingSchedule] = None

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if not self.name:
            self.name = self.variant.value
        if self.step_rule is None:
            self.step_rule = DEFAULT_STEP_RULE.get(self.variant.value, StepRule.FIXED)
        self.step_rule = StepRule(self.step_rule)
        for key, ok in (("m", self.m >= 1), ("sigma_r", self.sigma_r >= 0), ("tau", self.tau >= 0),
                        ("lambda", self.lam > 0), ("iters", self.iters >= 1), ("step", self.step > 0),
                        ("width", self.width >= 2 and self.width % 2 == 0), ("depth", self.depth >= 2),
                        ("alpha", self.alpha >= 0), ("prior_scale", self.prior_scale >= 0),
                        ("posterior_scale", self.posterior_scale >= 0),
                        ("n_threads", self.n_threads >= 1), ("eps", 0 < self.eps < 1)):
            if not ok:
                raise InvalidArgumentError(f"invalid value for {key!r}")
        if self.step_rule is StepRule.CAPPED and self.variant is not Variant.GLM_ES:
            raise InvalidArgumentError("step_rule 'capped' is only defined for GlmES")


# --- agents ----------------------------------------------------------------

class Agent:
    """Common bookkeeping: arm set, seed, stream segment and draw counters."""

    def __init__(self, config: AgentConfig, arms: ArmSet, seed: int, segment: int = 0):
        self.config = config
        self.arms = arms
        self.X = np.ascontiguousarray(arms.features)
        self.seed = seed
        self.segment = segment
        self.t = 0
        self.perturbation_draws = 0

    @property
    def name(self) -> str:
        return self.config.name

    def select(self) -> int:
        raise NotImplementedError

    def observe(self, arm: int, reward: float) -> None:
        raise NotImplementedError


class EnsembleAgent(Agent):
    """Shared machinery of Lin-ES, GLM-ES and Neural-ES.

    Subclasses provide ``_warmup_schedule``, ``_record`` (fold one perturbed
    observation into the per-member statistics), ``_refit`` and ``predict``.
    """

    def __init__(self, config, arms, seed, segment=0, horizon_hint=None):
        super().__init__(config, arms, seed, segment)
        self.m = config.m
        self.sigma_r = config.sigma_r
        self._z_rngs = [make_rng(seed, segment, PERTURB, j) for j in range(self.m)]
        self._select_rng = make_rng(seed, segment, SELECT)
        self._z_log: list[np.ndarray] = []
        self.model_counts = np.zeros(self.m, dtype=np.int64)
        self.last_model: Optional[int] = None
        self.warmup = self._warmup_schedule(horizon_hint)
        self.fitted = len(self.warmup) == 0

    def _warmup_schedule(self, horizon_hint) -> list[int]:
        return []

    @property
    def in_warmup(self) -> bool:
        return self.t < len(self.warmup)

    @property
    def perturbation_history(self) -> np.ndarray:
        """(t, m) array of every perturbation drawn so far, in round order."""
        if not self._z_log:
            return np.zeros((0, self.m))
        return np.stack(self._z_log)

    def draw_perturbations(self) -> np.ndarray:
        z = np.array([g.standard_normal() for g in self._z_rngs]) * self.sigma_r
        self.perturbation_draws += self.m
        self._z_log.append(z)
        return z

    def predict(self, j: int) -> np.ndarray:
        raise NotImplementedError

    def select_arm(self) -> tuple[int, int]:
        """Sample a member uniformly and return (its greedy arm, member index)."""
        if not self.fitted:
            raise StateError("ensemble is not initialised; warm-up has not finished")
        j = int(self._select_rng.integers(self.m))
        scores = self.predict(j)
        self.last_model = j
        self.model_counts[j] += 1
        return int(np.argmax(scores)), j

    def select(self) -> int:
        if self.in_warmup:
            return self.warmup[self.t]
        return self.select_arm()[0]

    def observe(self, arm: int, reward: float) -> None:
        if not np.isfinite(reward):
            raise InvalidArgumentError(f"reward must be finite, got {reward}")
        z = self.draw_perturbations()
        self._record(int(arm), float(reward), z)
        self.t += 1
        if not self.in_warmup:
            self._refit()
            self.fitted = True

    def _record(self, arm, reward, z):
        raise NotImplementedError

    def _refit(self):
        raise NotImplementedError


class LinES(EnsembleAgent):
    """Linear ensemble sampling with closed-form perturbed ridge estimates.

    Members share ``A = lam I + sum x x^T`` (inverse kept by Sherman-Morrison)
    and differ in ``b_j = sum x (y + z_j)``; member ``j`` predicts with
    ``theta_j = A^-1 b_j``. Each ``b_j`` starts at ``sqrt(lam) prior_scale w_j``
    with ``w_j ~ N(0, I_d)`` drawn once from the member's init stream: the
    ridge penalty of member ``j`` is centred on its own draw from
    N(0, prior_scale^2 / lam I), so members also disagree along directions
    never pulled. These draws are not per-round perturbations and are not
    counted. ``prior_scale = 0`` gives the plain perturbed-reward ensemble
    and ``sigma_r = 0`` disables the prior draw too, leaving greedy ridge.
    ``resample_all`` redraws the whole perturbation history every round
    (perturbed-history exploration); test use only.
    """

    def __init__(self, config, arms, seed, segment=0, horizon_hint=None, resample_all=False):
        super().__init__(config, arms, seed, segment, horizon_hint)
        self.cov = CovarianceState.identity(arms.d, config.lam)
        self.B = np.zeros((self.m, arms.d))
        scale = config.prior_scale
        if scale > 0 and config.sigma_r > 0:
            self.B0 = np.stack([make_rng(seed, segment, INIT, j).standard_normal(arms.d)
                                for j in range(self.m)]) * (math.sqrt(config.lam) * scale)
        else:
            self.B0 = np.zeros((self.m, arms.d))
        self.B += self.B0
        self.resample_all = resample_all
        self._xs: list[np.ndarray] = []
        self._ys: list[float] = []

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([self.cov.A_inv @ b for b in self.B])

    def predict(self, j):
        return self.X @ (self.cov.A_inv @ self.B[j])

    def draw_perturbations(self):
        if not self.resample_all:
            return super().draw_perturbations()
        n = len(self._ys) + 1
        z = np.stack([g.standard_normal(n) for g in self._z_rngs]) * self.sigma_r
        self.perturbation_draws += self.m * n
        return z

    def _record(self, arm, reward, z):
        x = self.X[arm]
        self.cov.update(x)
        if self.resample_all:
            self._xs.append(x)
            self._ys.append(reward)
            targets = np.asarray(self._ys)[None, :] + z
            self.B = self.B0 + targets @ np.stack(self._xs)
        else:
            self.B += np.outer(reward + z, x)

    def _refit(self):
        pass  # closed form evaluated lazily in predict()


class GlmES(EnsembleAgent):
    """Generalized-linear ensemble sampling.

    Warm-up pulls follow a rounded G-optimal design. Per-member statistics
    are aggregated by arm (pull counts and sums of perturbed rewards), which
    gives the same likelihood as the raw history because the arm set is
    fixed. Each refit runs ``iters`` gradient steps warm-started from the
    previous estimate.
    """

    def __init__(self, config, arms, seed, segment=0, horizon_hint=None):
        self.link = LinkFunction.from_name(config.link)
        super().__init__(config, arms, seed, segment, horizon_hint)
        self.counts = np.zeros(arms.K)
        self.sums = np.zeros((self.m, arms.K))
        self.thetas = np.zeros((self.m, arms.d))

    def _warmup_schedule(self, horizon_hint):
        tau = self.config.tau
        if tau == 0:
            return []
        if horizon_hint is not None and horizon_hint < tau:
            # short anytime segment: rounded design for the segment when it
            # still covers the dimension, else the prefix of the full one
            if horizon_hint >= self.arms.d:
                try:
                    return glm_warmup_schedule(self.arms, horizon_hint, self.config.eps,
                                               self.config.design_tol)
                except InvalidArgumentError:
                    pass
            return glm_warmup_schedule(self.arms, tau, self.config.eps,
                                       self.config.design_tol)[:horizon_hint]
        return glm_warmup_schedule(self.arms, tau, self.config.eps, self.config.design_tol)

    def effective_step(self) -> float:
        n = self.t
        rule = self.config.step_rule
        if rule is StepRule.CAPPED:
            return min(self.config.step, stable_step(self.config.lam, self.link, n))
        if rule is StepRule.PER_SAMPLE:
            return self.config.step / max(n, 1)
        return self.config.step

    def predict(self, j):
        return self.link.value(self.X @ self.thetas[j])

    def _record(self, arm, reward, z):
        self.counts[arm] += 1
        self.sums[:, arm] += reward + z

    def _refit(self):
        if not self.config.warm_start:
            self.thetas[:] = 0.0
        with np.errstate(over="ignore", invalid="ignore"):
            kernels.glm_gd(self.thetas, self.X, self.counts, self.sums, self.config.lam,
                           self.link.is_logistic, self.config.iters, self.effective_step(),
                           None, self.config.n_threads)
        if not np.all(np.isfinite(self.thetas)):
            raise DivergenceError(f"GLM-ES refit diverged at round {self.t}")


class NeuralES(EnsembleAgent):
    """Neural ensemble sampling.

    Each member is a mirror-initialised ReLU network on the duplicated arm
    features ``[x; x]/sqrt(2)``, regularised towards its own initial
    parameters. Warm-up pulls arms round-robin ``tau`` times (``tau = K``
    pulls each arm once).
    """

    def __init__(self, config, arms, seed, segment=0, horizon_hint=None):
        super().__init__(config, arms, seed, segment, horizon_hint)
        self.Xin = np.ascontiguousarray(duplicate_context(self.X))
        din = self.Xin.shape[1]
        self.params0 = np.stack([
            init_network(din, config.width, config.depth, make_rng(seed, segment, INIT, j)).flat
            for j in range(self.m)
        ])
        self.params = self.params0.copy()
        self.counts = np.zeros(arms.K)
        self.sums = np.zeros((self.m, arms.K))
        self.sumsq = np.zeros((self.m, arms.K))

    def _warmup_schedule(self, horizon_hint):
        tau = self.config.tau
        if horizon_hint is not None:
            tau = min(tau, horizon_hint)
        return [t % self.arms.K for t in range(tau)]

    def effective_step(self) -> float:
        if self.config.step_rule is StepRule.PER_SAMPLE:
            return self.config.step / max(self.t, 1)
        return self.config.step

    def predict(self, j):
        return kernels.neural_forward(self.params[j:j + 1], self.Xin, self.config.width,
                                      self.config.depth)[0]

    def _record(self, arm, reward, z):
        target = reward + z
        self.counts[arm] += 1
        self.sums[:, arm] += target
        self.sumsq[:, arm] += target * target

    def _refit(self):
        if not self.config.warm_start:
            self.params[:] = self.params0
        with np.errstate(over="ignore", invalid="ignore"):
            kernels.neural_gd(self.params, self.params0, self.Xin, self.counts, self.sums,
                              self.sumsq, self.config.width, self.config.depth, self.config.lam,
                              self.config.iters, self.effective_step(), None, self.config.n_threads)
        if not np.all(np.isfinite(self.params)):
            raise DivergenceError(f"Neural-ES refit diverged at round {self.t}")


class LinUCB(Agent):
    """Ridge regression with an optimism bonus.

    Score of arm ``x``: ``x^T theta + alpha * sqrt(x^T A^-1 x)`` with
    ``theta = A^-1 b``, ``A = lam I + sum x x^T``, ``b = sum y x``.
    ``alpha = 0`` is greedy ridge regression.
    """

    def __init__(self, config, arms, seed, segment=0, horizon_hint=None):
        super().__init__(config, arms, seed, segment)
        self.cov = CovarianceState.identity(arms.d, config.lam)
        self.b = np.zeros(arms.d)

    @property
    def theta(self):
        return self.cov.A_inv @ self.b

    def scores(self):
        means = self.X @ self.theta
        if self.config.alpha == 0:
            return means
        width = np.sqrt(np.einsum("ij,jk,ik->i", self.X, self.cov.A_inv, self.X))
        return means + self.config.alpha * width

    def select(self):
        return int(np.argmax(self.scores()))

    def observe(self, arm, reward):
        x = self.X[arm]
        self.cov.update(x)
        self.b += reward * x
        self.t += 1


class LinTS(LinUCB):
    """Linear Thompson sampling: ``theta~ = theta + v L z`` with ``L L^T = A^-1``,
    ``z ~ N(0, I)`` and ``v = posterior_scale``. ``v = 0`` is greedy ridge.
    """

    def __init__(self, config, arms, seed, segment=0, horizon_hint=None):
        super().__init__(config, arms, seed, segment)
        self._rng = make_rng(seed, segment, POLICY)

    def scores(self):
        z = self._rng.standard_normal(self.arms.d)
        theta = self.theta
        v = self.config.posterior_scale
        if v:
            theta = theta + v * (np.linalg.cholesky(self.cov.A_inv) @ z)
        return self.X @ theta


class UniformRandom(Agent):
    def __init__(self, config, arms, seed, segment=0, horizon_hint=None):
        super().__init__(config, arms, seed, segment)
        self._rng = make_rng(seed, segment, POLICY)

    def select(self):
        return int(self._rng.integers(self.arms.K))

    def observe(self, arm, reward):
        self.t += 1


AGENT_CLASSES = {
    Variant.LIN_ES: LinES,
    Variant.GLM_ES: GlmES,
    Variant.NEURAL_ES: NeuralES,
    Variant.LIN_UCB: LinUCB,
    Variant.LIN_TS: LinTS,
    Variant.UNIFORM: UniformRandom,
}


class AnytimeAgent(Agent):
    """Doubling-trick wrapper: restarts a fresh agent after every ``T_i``.

    Segment ``i`` covers rounds ``T_{i-1} + 1 .. T_i`` (the first one rounds
    ``1 .. T_0``) and its member count and perturbation scale come from the
    segment length via :class:`DoublingSchedule`. Warm-up is re-run in every
    segment. ``restarts`` lists the ``T_i`` after which a restart happened.
    """

    def __init__(self, config: AgentConfig, arms: ArmSet, seed: int, schedule: DoublingSchedule):
        super().__init__(config, arms, seed)
        self.schedule = schedule
        self.base = replace(config, anytime=None)
        self.restarts: list[int] = []
        self.segment_configs: list[AgentConfig] = []
        self._finished_draws = 0
        self._begin(0)

    def _begin(self, i: int) -> None:
        m, sigma = self.schedule.segment_params(i)
        cfg = replace(self.base, m=m, sigma_r=sigma)
        self.segment_configs.append(cfg)
        self.segment = i
        self.inner = AGENT_CLASSES[cfg.variant](cfg, self.arms, self.seed, segment=i,
                                                horizon_hint=self.schedule.segment_length(i))
        self._next_boundary = self.schedule.boundary(i)

    @property
    def perturbation_draws(self) -> int:
        return self._finished_draws + self.inner.perturbation_draws

    @perturbation_draws.setter
    def perturbation_draws(self, value):
        pass  # derived from the inner agents

    def select(self) -> int:
        if self.t == self._next_boundary:
            self.restarts.append(self.t)
            self._finished_draws += self.inner.perturbation_draws
            self._begin(self.segment + 1)
        return self.inner.select()

    def observe(self, arm, reward):
        self.inner.observe(arm, reward)
        self.t += 1


def make_agent(config: AgentConfig, arms: ArmSet, seed: int, segment: int = 0,
               horizon_hint: Optional[int] = None) -> Agent:
    if config.anytime is not None:
        return AnytimeAgent(config, arms, seed, config.anytime)
    return AGENT_CLASSES[config.variant](config, arms, seed, segment=segment,
                                         horizon_hint=horizon_hint)


def anytime_wrap(config: AgentConfig, schedule: DoublingSchedule) -> AgentConfig:
    """Config for the doubling-trick version of ``config``."""
    return replace(config, anytime=schedule)


def select_arm(agent: EnsembleAgent) -> tuple[int, int]:
    return agent.select_arm()


def update_ensemble(agent: EnsembleAgent, arm: int, reward: float) -> EnsembleAgent:
    agent.observe(arm, reward)
    return agent


# --- episodes --------------------------------------------------------------

@dataclass
class RegretTrace:
    """Per-round pulled arm, instantaneous and cumulative pseudo-regret (rounds 1..T)."""

    arms: np.ndarray
    inst: np.ndarray
    cum: np.ndarray
    seed: int
    restarts: list[int] = field(default_factory=list)
    agent: str = ""
    perturbation_draws: int = 0
    wall_seconds: float = 0.0
    update_seconds: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.arms.shape[0]

    @property
    def rounds(self) -> np.ndarray:
        return np.arange(1, self.T + 1)

    def regret_at(self, t: int) -> float:
        return float(self.cum[t - 1])


def run_episode(model: RewardModel, arms: ArmSet, config: AgentConfig, T: int, seed: int,
                record_timing: bool = False) -> RegretTrace:
    """Run one agent for ``T`` rounds; the trace is a pure function of the inputs."""
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    if config.anytime is None and config.variant in (Variant.GLM_ES, Variant.NEURAL_ES) \
            and T <= config.tau:
        raise InvalidArgumentError(f"horizon T = {T} must exceed the warm-up tau = {config.tau}")
    noise = make_rng(seed, ENV_NOISE)
    means = model.mean_rewards(arms.features)
    best = float(means.max())
    gaps = best - means
    agent = make_agent(config, arms, seed)
    pulled = np.empty(T, dtype=np.int64)
    inst = np.empty(T)
    timing = np.empty(T) if record_timing else None
    start = time.perf_counter()
    for t in range(T):
        a = agent.select()
        y = model.sample_reward(arms.features[a], noise)
        if record_timing:
            t0 = time.perf_counter()
            agent.observe(a, y)
            timing[t] = time.perf_counter() - t0
        else:
            agent.observe(a, y)
        pulled[t] = a
        inst[t] = gaps[a]
    wall = time.perf_counter() - start
    return RegretTrace(
        arms=pulled,
        inst=inst,
        cum=np.cumsum(inst),
        seed=seed,
        restarts=list(getattr(agent, "restarts", [])),
        agent=config.name,
        perturbation_draws=agent.perturbation_draws,
        wall_seconds=wall,
        update_seconds=timing,
    )


def ensemble_size_theory(K: int, T: float, delta: float, p_n: float) -> int:
    """``ceil(8 / p_n^2 * (K ln T + ln(1/delta)))``."""
    if K <= 0 or T <= 0 or p_n <= 0 or not 0 < delta <= 1:
        raise InvalidArgumentError("K, T, p_n must be positive and delta in (0, 1]")
    return int(math.ceil(round(8.0 / p_n ** 2 * (K * math.log(T) + math.log(1.0 / delta)), 9)))

"""Ensemble sampling for linear, generalized-linear and neural contextual bandits."""
from importlib import resources

from .engine import (AgentConfig, AnytimeAgent, DoublingSchedule, GlmES, LinES, LinTS, LinUCB,
                     NeuralES, RegretTrace, StepRule, UniformRandom, Variant, anytime_wrap,
                     doubling_boundaries, ensemble_size_theory, make_agent, run_episode)
from .envs import ArmSet, RewardKind, RewardModel, generate_instance, mean_reward, optimal_arm, sample_reward
from .errors import (BanditError, ConvergenceError, DecompositionError, DivergenceError,
                     InvalidArgumentError, RankError, SpecError, StateError)
from .kernels import BACKEND

__version__ = "0.1.0"


def bundled_spec(name: str = "standard_suite.yaml"):
    """Path to a spec shipped with the package."""
    return resources.files(__package__) / "configs" / name


__all__ = [
    "AgentConfig", "AnytimeAgent", "ArmSet", "BACKEND", "BanditError", "ConvergenceError",
    "DecompositionError", "DivergenceError", "DoublingSchedule", "GlmES", "InvalidArgumentError",
    "LinES", "LinTS", "LinUCB", "NeuralES", "RankError", "RegretTrace", "RewardKind", "RewardModel",
    "SpecError", "StateError", "StepRule", "UniformRandom", "Variant", "anytime_wrap",
    "bundled_spec", "doubling_boundaries", "ensemble_size_theory", "generate_instance",
    "make_agent", "mean_reward", "optimal_arm", "run_episode", "sample_reward",
]

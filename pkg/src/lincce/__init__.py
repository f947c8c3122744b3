"""Independent-learner coarse correlated equilibria in Markov games with linear features."""

from .coreset import CoreSet, FeatureMap, c_max, explore, one_hot_features
from .ftrl import LearnerParams, LinConfidentFTRL, RestartBudgetExceeded, run_lin_confident_ftrl
from .game import MarkovGame, ProductPolicy, StepMixturePolicy, validate_game
from .harness import ExperimentConfig, RunRecord, run_experiment, sweep
from .oracle import best_response, cce_gap, evaluate_values, monte_carlo_value
from .random_access import RAParams, mixture_weights, run_random_access, select_core_sets
from .simulator import AccessProtocol, ProtocolViolation, Simulator

__all__ = [
    "AccessProtocol", "CoreSet", "ExperimentConfig", "FeatureMap", "LearnerParams", "LinConfidentFTRL",
    "MarkovGame", "ProductPolicy", "ProtocolViolation", "RAParams", "RestartBudgetExceeded", "RunRecord",
    "Simulator", "StepMixturePolicy", "best_response", "c_max", "cce_gap", "evaluate_values", "explore",
    "mixture_weights", "monte_carlo_value", "one_hot_features", "run_experiment",
    "run_lin_confident_ftrl", "run_random_access", "select_core_sets", "sweep", "validate_game",
]

"""Robust sequential experimental design for A/B testing.

Worst-case MSE objectives via sieve orthogonalization, dynamic-programming
allocation trained on synthetic rollouts, a hierarchical DP+RL designer for
carryover settings, baseline designs, simulated environments, ATE
estimators, and a reproducible replication harness.
"""

__version__ = "0.1.0"

from .baselines import BaselineKind, baseline_allocate
from .designer_bandit import BanditDesignPolicy, allocate, train_policy
from .designer_dynamic import HierarchicalPolicy, act_day, train_hierarchical
from .errors import (
    ConfigError,
    DegenerateDesign,
    HorizonExceeded,
    InsufficientData,
    NonFiniteLoss,
    NotSPD,
    RobdesignError,
    SingularDesign,
    SingularSigma,
)
from .objective import (
    DesignPriors,
    additive_bound,
    dynamic_reward,
    exact_conditional_mse,
    interactive_bound,
)
from .sieve import PopulationMoments, SieveBasis, estimate_moments, featurize, legendre
from .sim import BanditDgp, DynamicDgp, RunReport, run_dynamic_experiment, run_experiment
from .state import AdditiveState, DayState, InteractiveState
from .valuenet import NetParams, NetSpec, TrainConfig, net_init, net_predict, net_train

__all__ = [
    "AdditiveState",
    "BanditDesignPolicy",
    "BanditDgp",
    "BaselineKind",
    "ConfigError",
    "DayState",
    "DegenerateDesign",
    "DesignPriors",
    "DynamicDgp",
    "HierarchicalPolicy",
    "HorizonExceeded",
    "InsufficientData",
    "InteractiveState",
    "NetParams",
    "NetSpec",
    "NonFiniteLoss",
    "NotSPD",
    "PopulationMoments",
    "RobdesignError",
    "RunReport",
    "SieveBasis",
    "SingularDesign",
    "SingularSigma",
    "TrainConfig",
    "act_day",
    "additive_bound",
    "allocate",
    "baseline_allocate",
    "dynamic_reward",
    "estimate_moments",
    "exact_conditional_mse",
    "featurize",
    "interactive_bound",
    "legendre",
    "net_init",
    "net_predict",
    "net_train",
    "run_dynamic_experiment",
    "run_experiment",
    "train_hierarchical",
    "train_policy",
]

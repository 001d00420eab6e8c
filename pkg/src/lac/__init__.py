"""Learning-augmented control: λ-confident MPC with delayed confidence learning."""

from .confidence import (
    DelayedConfidenceLearner,
    FTLSelfTuning,
    SurrogateLoss,
    lambda_star,
    varpi_gram,
    varpi_rho,
    xi_grad,
    xi_t,
)
from .lqc import LqcGains, clairvoyant_optimal_lqc, lqc_receding_action, solve_dare
from .model import (
    Ball,
    Box,
    PredictionBundle,
    RevealViolation,
    SystemModel,
    make_lqc_tracking_system,
    make_robot_arm_system,
)
from .policies import LAC, FixedLambda, SelfTuning, make_policy
from .sim import ErrorSchedule, competitive_report, inject_errors, offline_optimum, run_closed_loop
from .trajopt import MpcProblem, solve_mpc

__version__ = "0.1.0"

__all__ = [
    "DelayedConfidenceLearner",
    "FTLSelfTuning",
    "SurrogateLoss",
    "lambda_star",
    "varpi_gram",
    "varpi_rho",
    "xi_grad",
    "xi_t",
    "LqcGains",
    "clairvoyant_optimal_lqc",
    "lqc_receding_action",
    "solve_dare",
    "Ball",
    "Box",
    "PredictionBundle",
    "RevealViolation",
    "SystemModel",
    "make_lqc_tracking_system",
    "make_robot_arm_system",
    "LAC",
    "FixedLambda",
    "SelfTuning",
    "make_policy",
    "ErrorSchedule",
    "competitive_report",
    "inject_errors",
    "offline_optimum",
    "run_closed_loop",
    "MpcProblem",
    "solve_mpc",
]

"""Active state tracking for finite-state Markov chains under controlled Gaussian sensing."""
from .filtering import FilterStep, bayes_update, run_bayes, run_filter, update
from .model import MarkovModel, ObservationModel, TrackingModel, load_model, validate_model
from .policy import BeliefGrid, GreedyPolicy, Policy, StaticPolicy, backward_induction, evaluate_policy
from .sim import aggregate_metrics, map_detect, run_trials, sample_trajectory
from .smoother import fixed_interval_smooth, fixed_lag_smooth, fixed_point_smooth

__all__ = [
    "FilterStep",
    "bayes_update",
    "run_bayes",
    "run_filter",
    "update",
    "MarkovModel",
    "ObservationModel",
    "TrackingModel",
    "load_model",
    "validate_model",
    "BeliefGrid",
    "GreedyPolicy",
    "Policy",
    "StaticPolicy",
    "backward_induction",
    "evaluate_policy",
    "aggregate_metrics",
    "map_detect",
    "run_trials",
    "sample_trajectory",
    "fixed_interval_smooth",
    "fixed_lag_smooth",
    "fixed_point_smooth",
]

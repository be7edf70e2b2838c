"""Reward machines with numeric features, their unrolled Boolean, agenda and
coupled forms, gridworld tasks, and tabular QRM / CRM / CoRM learners."""
from .core import (
    DEC, DONE, LIVE, DeterminismError, DomainError, GuardError, Kind, NumericFeatureValue,
    NumericVariable, RMError, RewardMachine, StateLabel, Transition, TruthAssignment,
    eval_guard, eval_numeric_feature, rm_step, validate_rm,
)
from .translate import (
    ParseError, TranslationError, ValidationError, compile_rm, export_dot, format_rm,
    parse_bindings, parse_rm, split_to_coupled, unroll_to_agenda, unroll_to_boolean,
)
from .envs import (
    GridMap, GridState, ResourceError, StepOutcome, bfs_optimal_length, env_reset, env_step,
    feature_catalog, load_map, make_env, office_map, random_delivery_map, two_box_map,
)
from .learners import (
    EtaTable, Hyperparams, Learner, QTable, RewardParams, final_reward, greedy_rollout,
    run_episode,
)
from .harness import ExperimentConfig, run_batch, scaling_report, verify_policy

__version__ = "0.1.0"

"""Counterfactual safe-RL laboratory for traffic signal control.

The package bundles a rewindable intersection microsimulator, a from-scratch
neural substrate, a structural causal model of transitions and rewards
trained adversarially with an encoder for noise inference, counterfactual
trajectory construction, Q-learning agents with three counterfactual
objectives, and a seeded experiment harness.
"""

from .agent import (Batch, CfRow, QNet, ReplayBuffer, SimpleQ, Transition,
                    UnsafeLabeler, cf_divergence, cfloss_update, epsilon_at,
                    qcf_update, sample_training_batch, scalar_reward,
                    select_action, synq_compose, td_update)
from .ctc import (CFTrajectory, PreCollisionRecord, ctc, pair_fidelity,
                  safe_sign_agreement, simulator_ctc_oracle, write_cf_dump)
from .errors import (CfsignalError, ConfigError, DomainError,
                     EpisodeFinishedError, IncompatibleSnapshotError,
                     InvalidActionError, NoDataError, NotFoundError,
                     NotReadyError, ShapeError, SnapshotFormatError,
                     StateError)
from .harness import (EpochReport, RunConfig, RunResult, export_case_study,
                      noise_experiment, run_ablation, train, weight_sweep)
from .nn import Adam, AdamW, Mlp, kl_div, load_mlp, monotonicity_penalty, save_mlp
from .scm import (ScmModel, infer_noise, load_scm, predict_counterfactual,
                  save_scm, scm_train_epoch)
from .sim import (IntersectionSim, LaneChangeConfig, LaneChangeSim,
                  ScenarioConfig, SimState, Snapshot, add_grid_noise,
                  conflict_trial_config, default_phases, desk_config,
                  encode_grid)
from .tabular import RingMdp, double_q_learn, value_iteration

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamW", "Batch", "CFTrajectory", "CfRow", "CfsignalError",
    "ConfigError", "DomainError", "EpochReport", "EpisodeFinishedError",
    "IncompatibleSnapshotError", "IntersectionSim", "InvalidActionError",
    "LaneChangeConfig", "LaneChangeSim", "Mlp", "NoDataError",
    "NotFoundError", "NotReadyError", "PreCollisionRecord", "QNet",
    "ReplayBuffer", "RingMdp", "RunConfig", "RunResult", "ScenarioConfig",
    "ScmModel", "ShapeError", "SimState", "SimpleQ", "Snapshot",
    "SnapshotFormatError", "StateError", "Transition", "UnsafeLabeler",
    "add_grid_noise", "cf_divergence", "cfloss_update", "conflict_trial_config",
    "ctc", "default_phases", "desk_config", "double_q_learn", "encode_grid",
    "epsilon_at", "export_case_study", "infer_noise", "kl_div", "load_mlp",
    "load_scm", "monotonicity_penalty", "noise_experiment", "pair_fidelity",
    "predict_counterfactual", "qcf_update", "run_ablation",
    "safe_sign_agreement", "sample_training_batch", "save_mlp", "save_scm",
    "scalar_reward", "scm_train_epoch", "select_action", "simulator_ctc_oracle",
    "synq_compose", "td_update", "train", "value_iteration", "weight_sweep",
    "write_cf_dump",
]

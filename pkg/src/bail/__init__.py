"""Best-action imitation learning for batch (offline) reinforcement learning.

Pipeline: Monte Carlo returns over a fixed batch, an upper envelope of those
returns fit with a penalty loss, selection of the transitions whose returns
sit closest to the envelope, then behavior cloning on the selected subset.
"""

from bail._accel import backend_name
from bail.dataset import (
    Batch,
    ReturnsTable,
    SplitIndex,
    compute_augmented_returns,
    compute_returns,
    load_batch,
    save_batch,
    split_train_validation,
)
from bail.envelope import EnvelopeConfig, UpperEnvelope, envelope_value, train_upper_envelope
from bail.envs import make_env, rollout
from bail.harness import RunConfig, evaluate_policy, run_pipeline
from bail.imitation import PolicyConfig, train_bc_all, train_policy_bc, train_progressive_bail
from bail.selection import select, select_difference, select_ratio

__version__ = "0.1.0"

__all__ = [
    "Batch", "ReturnsTable", "SplitIndex", "compute_returns", "compute_augmented_returns",
    "split_train_validation", "save_batch", "load_batch", "make_env", "rollout",
    "EnvelopeConfig", "UpperEnvelope", "train_upper_envelope", "envelope_value",
    "select", "select_ratio", "select_difference", "PolicyConfig", "train_policy_bc",
    "train_bc_all", "train_progressive_bail", "RunConfig", "run_pipeline", "evaluate_policy",
    "backend_name",
]

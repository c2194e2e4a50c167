"""Desk-scale heterogeneous grouped mixture-of-experts.

Group-sized experts with a two-level router, width-aware and intra-group
balance losses, a parameter-balanced expert-to-GPU placement, and a
simulator that trains toy gating and measures routing balance.
"""

from hetmoe.allocation import (
    PlacementPlan,
    allocate,
    naive_group_allocation,
    parameter_spread,
    per_gpu_params,
)
from hetmoe.config import ModelConfig, build_group_widths, load_config, preset, validate
from hetmoe.layer import (
    GroupedExpertLayer,
    count_parameters,
    layer_forward,
    layer_gradients,
    load_weights,
    save_weights,
)
from hetmoe.losses import accumulate_stats, group_wise_loss, intra_group_loss, loss_gradients
from hetmoe.routing import GatingParameters, RoutingBatch, route
from hetmoe.simulator import (
    LoadReport,
    TokenStream,
    TrainingDiverged,
    difficulty_analysis,
    replay_load_sim,
    run_load_sim,
    train_toy,
)

__all__ = [
    "GatingParameters",
    "GroupedExpertLayer",
    "LoadReport",
    "ModelConfig",
    "PlacementPlan",
    "RoutingBatch",
    "TokenStream",
    "TrainingDiverged",
    "accumulate_stats",
    "allocate",
    "build_group_widths",
    "count_parameters",
    "difficulty_analysis",
    "group_wise_loss",
    "intra_group_loss",
    "layer_forward",
    "layer_gradients",
    "load_config",
    "load_weights",
    "loss_gradients",
    "naive_group_allocation",
    "parameter_spread",
    "per_gpu_params",
    "preset",
    "replay_load_sim",
    "route",
    "run_load_sim",
    "save_weights",
    "train_toy",
    "validate",
]

__version__ = "0.1.0"

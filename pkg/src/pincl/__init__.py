"""Physics-informed Transolver training for Darcy flow with replay-based
continual learning."""

from .autodiff import AdamState, Tensor, adam_step, finite_difference_grad, grad
from .continual import (CLConfig, ErrorMatrix, ReplayPlan, replay_train,
                        run_sequence, score_dataset, select_replay, sft_train,
                        train_baseline)
from .data import (DEFAULT_SCHEDULE, Dataset, GridSample, SampleGroup,
                   generate_groups, make_permeability, read_dataset, sample_grf,
                   write_dataset)
from .losses import (LossConfig, ScoredSample, apply_dirichlet, combine_losses,
                     data_loss, energy_loss, energy_score, grad_field,
                     relative_errors, strong_loss, strong_residual, strong_score)
from .model import Transolver, TransolverConfig, parameter_count
from .solver import SolveReport, solve_darcy
from .tpms import VoxelGrid, tpms_voxel

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Tensor", "adam_step", "finite_difference_grad", "grad",
    "CLConfig", "ErrorMatrix", "ReplayPlan", "replay_train", "run_sequence",
    "score_dataset", "select_replay", "sft_train", "train_baseline",
    "DEFAULT_SCHEDULE", "Dataset", "GridSample", "SampleGroup",
    "generate_groups", "make_permeability", "read_dataset", "sample_grf",
    "write_dataset", "LossConfig", "ScoredSample", "apply_dirichlet",
    "combine_losses", "data_loss", "energy_loss", "energy_score", "grad_field",
    "relative_errors", "strong_loss", "strong_residual", "strong_score",
    "Transolver", "TransolverConfig", "parameter_count", "SolveReport",
    "solve_darcy", "VoxelGrid", "tpms_voxel",
]

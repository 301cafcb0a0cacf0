"""Secure federated gradient boosted trees with additively homomorphic encryption."""

from .dataset import (
    DataMatrix, PartyShard, compute_cuts, load_csv, make_synthetic, merge_cut_candidates,
    split_horizontal, split_vertical,
)
from .federation import (
    RunResult, SecurityConfig, run_bagging, run_cyclic, run_horizontal_histogram,
    run_vertical_histogram,
)
from .gbdt import Forest, TrainParams, predict, train_centralized
from .inference import PartialModel, federated_predict, save_partial

__version__ = "0.1.0"

__all__ = [
    "DataMatrix", "PartyShard", "compute_cuts", "load_csv", "make_synthetic",
    "merge_cut_candidates", "split_horizontal", "split_vertical",
    "RunResult", "SecurityConfig", "run_bagging", "run_cyclic", "run_horizontal_histogram",
    "run_vertical_histogram", "Forest", "TrainParams", "predict", "train_centralized",
    "PartialModel", "federated_predict", "save_partial",
]

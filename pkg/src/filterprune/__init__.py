"""Structured convolutional filter pruning with L1-Norm, Beta-Rank and HRank-style scores."""

__version__ = "0.1.0"

from .graph import ModelGraph, build_architecture, count_flops_params, init_weights, load_model, save_model
from .pruning import PruningPlan, construct_pruned, select_top_filters, transfer_weights
from .ranking import RankVector, beta_rank, hrank_score, l1_rank, window_stats

__all__ = [
    "ModelGraph", "build_architecture", "count_flops_params", "init_weights", "load_model", "save_model",
    "PruningPlan", "construct_pruned", "select_top_filters", "transfer_weights",
    "RankVector", "beta_rank", "hrank_score", "l1_rank", "window_stats",
]

"""Latent adversarial paraphrasing on a tiny, fully deterministic transformer."""
from .adversary import (InnerLoopConfig, LatConfig, Perturbation, TraceRecord, inner_loop_batch, lagrangian,
                        lat_inner_pgd, project_l2, run_inner_loop, update_delta, update_lambda)
from .analysis import CaseEmbeddings, DistanceStats, distance_stats, l2_distance, observation_report, spearman
from .autodiff import RngStream, Tensor, backward, finite_diff_grad, grad_check, precision
from .bench import BenchSpec, Judge, ParaphraseCase, gen_dataset, judge_score, pairwise_win, winrate_report
from .config import RunConfig, load_config
from .model import (DecodeConfig, Example, ModelConfig, ParameterSet, forward, forward_from, forward_hidden,
                    generate, init_params, lm_loss, load_checkpoint, perturbed_lm_loss, save_checkpoint,
                    sequence_embedding)
from .trainer import OptimizerConfig, TrainConfig, outer_step, sft_step, train

__version__ = "0.1.0"

__all__ = [
    "BenchSpec", "CaseEmbeddings", "DecodeConfig", "DistanceStats", "Example", "InnerLoopConfig", "Judge",
    "LatConfig", "ModelConfig", "OptimizerConfig", "ParameterSet", "ParaphraseCase", "Perturbation", "RngStream",
    "RunConfig", "Tensor", "TraceRecord", "TrainConfig", "backward", "distance_stats", "finite_diff_grad", "forward",
    "forward_from", "forward_hidden", "gen_dataset", "generate", "grad_check", "init_params", "inner_loop_batch",
    "judge_score", "l2_distance", "lagrangian", "lat_inner_pgd", "lm_loss", "load_checkpoint", "load_config",
    "observation_report", "outer_step", "pairwise_win", "perturbed_lm_loss", "precision", "project_l2",
    "run_inner_loop", "save_checkpoint", "sequence_embedding", "sft_step", "spearman", "train", "update_delta",
    "update_lambda", "winrate_report",
]

"""Conditional score-based diffusion for regional cortical-thickness trajectories."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .cohort import Cohort, CohortSpec, Subject, generate_cohort, load_cohort_csv, split_cohort, write_cohort_csv
from .config import RunConfig, load_config
from .denoiser import ArchConfig, Baseline, denoise, score
from .diffusion import DiffusionConfig, TrainHyper, heun_sample, predict_trajectory, train
from .evaluation import PredictionSet, bland_altman, linear_fit, mae_by_group, uncertainty_summary

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "Baseline", "Checkpoint", "Cohort", "CohortSpec", "DiffusionConfig", "PredictionSet",
    "RunConfig", "Subject", "TrainHyper", "bland_altman", "denoise", "generate_cohort", "heun_sample",
    "linear_fit", "load_checkpoint", "load_config", "load_cohort_csv", "mae_by_group", "predict_trajectory",
    "save_checkpoint", "score", "split_cohort", "train", "uncertainty_summary", "write_cohort_csv",
]

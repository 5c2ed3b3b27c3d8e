"""Glue from cohorts to checkpoints to prediction sets, shared by the CLI and demos."""
from __future__ import annotations

from typing import Callable, Sequence

from .baselines import VARIANTS, predict_many_deterministic, train_deterministic
from .checkpoint import Checkpoint
from .cohort import Cohort, compute_normalization
from .config import RunConfig
from .diffusion import (LossRecord, PairArrays, build_training_pairs, encode_pairs, predict_many,
                        subject_baseline, train)
from .evaluation import PredictionSet

MODEL_CHOICES = ("diffusion",) + tuple(VARIANTS)


def training_data(cohort: Cohort, policy: str):
    """Normalization statistics and encoded pairs for a training cohort."""
    stats = compute_normalization(cohort, policy)
    return stats, encode_pairs(build_training_pairs(cohort, policy), stats)


def train_model(kind: str, cohort: Cohort, cfg: RunConfig,
                progress: Callable | None = None,
                data: tuple | None = None) -> tuple[Checkpoint, list[LossRecord]]:
    if kind not in MODEL_CHOICES:
        raise ValueError(f"unknown model {kind!r}; expected one of {MODEL_CHOICES}")
    stats, pairs = data if data is not None else training_data(cohort, cfg.pair_policy)
    if kind == "diffusion":
        return train(pairs, stats, cfg.arch, cfg.diffusion, cfg.training, cfg.seed, progress)
    return train_deterministic(kind, pairs, stats, cfg.arch, cfg.training, cfg.seed, progress)


def predict_cohort(ckpt: Checkpoint, cohort: Cohort, months: Sequence[int], cfg: RunConfig,
                   realizations: int | None = None, workers: int | None = None) -> PredictionSet:
    """Predictions for every subject of ``cohort`` from its baseline visit."""
    months = [int(m) for m in months]
    if not months or any(m <= 0 for m in months):
        raise ValueError("target months must be > 0")
    baselines = [(s.id, subject_baseline(s)) for s in cohort]
    if ckpt.kind == "diffusion":
        s = cfg.sampling
        k = realizations if realizations is not None else s.realizations
        preds = predict_many(ckpt, baselines, months, k, cfg.seed, s.steps, s.chunk,
                             workers if workers is not None else s.workers)
    else:
        preds = predict_many_deterministic(ckpt, baselines, months)
    return PredictionSet(preds)


__all__ = ["MODEL_CHOICES", "PairArrays", "predict_cohort", "train_model", "training_data"]

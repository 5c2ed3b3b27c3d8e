"""Deterministic U-net regressors for the attention ablation.

Same U-net as the denoiser, minus the noisy-input channel and sigma
conditioning; trained with plain MSE to output the normalized residual
directly from the condition tensor.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, CheckpointError
from .cohort import NormalizationStats
from .denoiser import (ArchConfig, Baseline, assemble_conditions, channel_major, condition_scalars,
                       init_params, normalize_levels, unet_forward)
from .diffusion import LossRecord, PairArrays, TrainHyper, TrainingError, fit
from .rng import substream

VARIANTS = {"unet_attn": True, "unet_plain": False}


def variant_arch(kind: str, arch: ArchConfig | None = None) -> ArchConfig:
    """Regressor architecture derived from the denoiser's config."""
    if kind not in VARIANTS:
        raise ValueError(f"unknown baseline variant {kind!r}; expected one of {sorted(VARIANTS)}")
    arch = arch or ArchConfig()
    return replace(arch, attention=VARIANTS[kind], sigma_conditioning=False, x_channels=0)


def _forward(arch: ArchConfig, P: dict[str, Tensor], cond: np.ndarray) -> Tensor:
    return unet_forward(arch, P, Tensor(channel_major(None, cond, P["in_conv.w"].dtype)))


def train_deterministic(kind: str, data: PairArrays, stats: NormalizationStats,
                        arch: ArchConfig | None = None, hyper: TrainHyper | None = None,
                        seed: int = 0, progress=None) -> tuple[Checkpoint, list[LossRecord]]:
    arch = variant_arch(kind, arch)
    hyper = hyper or TrainHyper()
    if len(data) < 1:
        raise TrainingError("empty training set")
    params = init_params(arch, substream(seed, "init"))

    def batch_fn(idx, step):
        P = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        target = data.x0[idx][None].astype(np.float32)
        with Tape() as tape:
            out = _forward(arch, P, data.cond[idx])
            loss = ad.mean(ad.sum(ad.square(ad.sub(out, target)), axis=(0, 2)))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at batch {step}")
        ad.backward(tape, loss, params=P.values())
        return value, {k: t.grad for k, t in P.items()}, 0.0

    log = fit(params, len(data), batch_fn, hyper, substream(seed, "train"), progress)
    meta = {"epochs": hyper.epochs, "steps": len(log), "batch_size": hyper.batch_size, "lr": hyper.lr,
            "n_pairs": len(data), "final_loss": log[-1].loss}
    return Checkpoint(kind, arch, params, stats, None, None, meta, seed), log


def regress(ckpt: Checkpoint, cond: np.ndarray) -> np.ndarray:
    """Normalized residual predictions for conditions (N, 7, 68) -> (N, 68)."""
    if ckpt.kind not in VARIANTS:
        raise CheckpointError(f"expected a deterministic U-net checkpoint, got {ckpt.kind!r}")
    P = {k: Tensor(v) for k, v in ckpt.params.items()}
    return _forward(ckpt.arch, P, np.asarray(cond)).data[0].astype(np.float64)


def predict_deterministic(ckpt: Checkpoint, baseline: Baseline, target_months: Sequence[int]) -> np.ndarray:
    """Predicted thickness in mm, shape (len(target_months), 68)."""
    if any(m <= 0 for m in target_months):
        raise ValueError("target months must be > 0")
    stats = ckpt.stats
    cth = np.asarray(baseline.cth, dtype=float)
    conds = []
    for m in target_months:
        raw = baseline.at(float(m))
        raw.validate()
        conds.append(assemble_conditions(normalize_levels(cth, stats)[None],
                                         condition_scalars(raw.age, raw.sex, raw.diagnosis, m, stats)[None])[0])
    x = regress(ckpt, np.array(conds))
    return cth + x * stats.resid_std + stats.resid_mean


def predict_many_deterministic(ckpt: Checkpoint, baselines, months) -> dict[tuple[str, int], np.ndarray]:
    """{(id, month): (1, 68)} to match the diffusion prediction layout."""
    out = {}
    for sid, b in baselines:
        pred = predict_deterministic(ckpt, b, months)
        for m, row in zip(months, pred):
            out[(sid, int(m))] = row[None]
    return out

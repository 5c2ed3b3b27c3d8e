"""Forward perturbation, denoising loss, EDM sigma schedule, probability-flow
ODE sampling, training and trajectory prediction."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import Checkpoint, CheckpointError
from .cohort import Cohort, NormalizationStats, visit_pairs
from .denoiser import (ArchConfig, Baseline, ConditionRaw, DenoiserParams, assemble_conditions,
                       condition_scalars, denoise, denoise_tensor, init_params, normalize_levels)
from .optim import AdamState, adam_step
from .rng import substream

LOSS_LOG_HEADER = ("epoch", "step", "loss", "sigma_mean", "wallclock_ms")


class TrainingError(RuntimeError):
    pass


class SamplingError(FloatingPointError):
    pass


@dataclass
class DiffusionConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    loss_weighting: str = "edm"
    nfe: int = 1000
    sampler: str = "heun"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.loss_weighting not in ("edm", "uniform"):
            raise ValueError(f"loss_weighting must be 'edm' or 'uniform', got {self.loss_weighting!r}")
        if self.sampler not in ("heun", "euler"):
            raise ValueError(f"sampler must be 'heun' or 'euler', got {self.sampler!r}")
        if self.nfe < 2 or (self.sampler == "heun" and self.nfe % 2):
            raise ValueError("nfe must be >= 2, and even for the Heun sampler")

    @property
    def steps(self) -> int:
        """Schedule length that spends the NFE budget (Heun uses 2N - 1 calls)."""
        return self.nfe // 2 if self.sampler == "heun" else self.nfe

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- forward process

def perturb(x0: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    """x0 + sigma * n, n ~ N(0, I); draws exactly ``x0.size`` normals."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    return x0 + sigma * rng.standard_normal(np.shape(x0))


def sample_sigma_train(config: DiffusionConfig, rng: np.random.Generator, size=None):
    return np.exp(config.p_mean + config.p_std * rng.standard_normal(size))


def loss_weight(sigma, sigma_data: float, kind: str = "edm"):
    sigma = np.asarray(sigma, dtype=np.float64)
    if kind == "uniform":
        return np.ones_like(sigma)
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


# ---------------------------------------------------------------- pairs

@dataclass
class TrainingPair:
    subject_id: str
    source_month: int
    target_month: int
    residual: np.ndarray
    cond: ConditionRaw

    def x0(self, stats: NormalizationStats) -> np.ndarray:
        return (self.residual - stats.resid_mean) / stats.resid_std


def build_training_pairs(cohort: Cohort, policy: str = "all_pairs") -> list[TrainingPair]:
    """One pair per ordered visit pair (per ``policy``); condition = source visit."""
    pairs = []
    for s in cohort:
        for a, b in visit_pairs(s, policy):
            cond = ConditionRaw(s.visits[a], s.age_bl + a / 12.0, s.sex, s.dx_by_visit[a], float(b - a))
            pairs.append(TrainingPair(s.id, a, b, s.visits[b] - s.visits[a], cond))
    return pairs


@dataclass
class PairArrays:
    """Training tensors: normalized residuals (P, 68) and conditions (P, 7, 68)."""
    x0: np.ndarray
    cond: np.ndarray

    def __len__(self) -> int:
        return len(self.x0)


def encode_pairs(pairs: Sequence[TrainingPair], stats: NormalizationStats) -> PairArrays:
    if not pairs:
        raise TrainingError("no training pairs")
    for p in pairs:
        p.cond.validate()
    levels = normalize_levels(np.array([p.cond.baseline_cth for p in pairs]), stats)
    scalars = np.array([condition_scalars(p.cond.age, p.cond.sex, p.cond.diagnosis,
                                          p.cond.delta_months, stats) for p in pairs])
    x0 = np.array([p.x0(stats) for p in pairs])
    return PairArrays(x0, assemble_conditions(levels, scalars))


# ---------------------------------------------------------------- loss and training

def denoising_loss(model: DenoiserParams, x0: np.ndarray, cond: np.ndarray, config: DiffusionConfig,
                   rng: np.random.Generator, batch_index: int = 0):
    """Weighted denoising MSE for one batch.

    Returns ``(loss, grads, sigmas)``. Each item draws its own noise level;
    the per-item loss is ``weight * ||D(x0 + n; sigma, y) - x0||^2`` and the
    batch loss is the mean over items.
    """
    if len(x0) == 0:
        raise TrainingError("empty batch")
    sigma = sample_sigma_train(config, rng, len(x0))
    noisy = perturb(x0, sigma[:, None], rng)
    P = model.tensors(requires_grad=True)
    dt = model.dtype
    w = loss_weight(sigma, model.sigma_data, config.loss_weighting).astype(dt)
    with Tape() as tape:
        d = denoise_tensor(model.arch, P, noisy[:, None, :], sigma, cond, model.sigma_data)
        per_item = ad.sum(ad.square(ad.sub(d, x0[None].astype(dt))), axis=(0, 2))
        loss = ad.mean(ad.mul(per_item, w))
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at batch {batch_index}")
    ad.backward(tape, loss, params=P.values())
    return value, {k: t.grad for k, t in P.items()}, sigma


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainHyper:
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    strict_nan: bool = True
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or not self.lr > 0:
            raise ValueError("batch_size and epochs must be >= 1 and lr > 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for ``step`` of ``total``; cosine anneals to zero."""
        if self.lr_schedule == "constant" or total <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / (total - 1)))


@dataclass
class LossRecord:
    epoch: int
    step: int
    loss: float
    sigma_mean: float
    wallclock_ms: float


def fit(params: dict[str, np.ndarray], n_items: int, batch_fn: Callable, hyper: TrainHyper,
        rng: np.random.Generator, progress: Callable | None = None) -> list[LossRecord]:
    """Shared minibatch/Adam loop; ``batch_fn(idx, step)`` returns (loss, grads, sigma_mean)."""
    if n_items < 1:
        raise TrainingError("empty training set")
    state = AdamState.zeros_like(params)
    log: list[LossRecord] = []
    t0 = time.perf_counter()
    step = 0
    total = hyper.epochs * -(-n_items // hyper.batch_size)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n_items)
        for start in range(0, n_items, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, grads, sigma_mean = batch_fn(idx, step)
            adam_step(params, grads, state, hyper.lr_at(step, total), hyper.beta1, hyper.beta2, hyper.eps,
                      strict=hyper.strict_nan)
            log.append(LossRecord(epoch, step, loss, sigma_mean, (time.perf_counter() - t0) * 1e3))
            step += 1
        if progress is not None:
            progress(epoch, log[-1])
    return log


def train(data: PairArrays, stats: NormalizationStats, arch: ArchConfig | None = None,
          config: DiffusionConfig | None = None, hyper: TrainHyper | None = None, seed: int = 0,
          progress: Callable | None = None) -> tuple[Checkpoint, list[LossRecord]]:
    """Train the conditional denoiser; returns the checkpoint and the loss log."""
    arch = arch or ArchConfig()
    config = config or DiffusionConfig()
    hyper = hyper or TrainHyper()
    if len(data) < 1:
        raise TrainingError("empty training set")
    params = init_params(arch, substream(seed, "init"))
    sigma_data = float(data.x0.std()) if len(data) > 1 else 1.0
    model = DenoiserParams(arch, params, sigma_data if sigma_data > 0 else 1.0)
    rng = substream(seed, "train")

    def batch_fn(idx, step):
        loss, grads, sigma = denoising_loss(model, data.x0[idx], data.cond[idx], config, rng, step)
        return loss, grads, float(sigma.mean())

    log = fit(params, len(data), batch_fn, hyper, rng, progress)
    meta = {"epochs": hyper.epochs, "steps": len(log), "batch_size": hyper.batch_size, "lr": hyper.lr,
            "n_pairs": len(data), "final_loss": log[-1].loss}
    ckpt = Checkpoint("diffusion", arch, params, stats, model.sigma_data, config.to_dict(), meta, seed)
    return ckpt, log


def write_loss_log(log: Sequence[LossRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for r in log:
            w.writerow([r.epoch, r.step, repr(r.loss), repr(r.sigma_mean), f"{r.wallclock_ms:.3f}"])


# ---------------------------------------------------------------- sampling

def sigma_schedule(config: DiffusionConfig, steps: int) -> np.ndarray:
    """Karras schedule of ``steps`` levels from sigma_max to sigma_min, then 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return np.array([config.sigma_max, 0.0])
    i = np.arange(steps, dtype=np.float64)
    a = config.sigma_max ** (1.0 / config.rho)
    b = config.sigma_min ** (1.0 / config.rho)
    sig = (a + i / (steps - 1) * (b - a)) ** config.rho
    return np.append(sig, 0.0)


DenoiseFn = Callable[[np.ndarray, float], np.ndarray]


def sample_ode(denoise_fn: DenoiseFn, z: np.ndarray, config: DiffusionConfig, steps: int,
               method: str = "heun") -> np.ndarray:
    """Integrate the probability-flow ODE from sigma_max to 0.

    ``z`` is standard normal; the state starts at ``sigma_max * z``. Heun
    steps use the slope ``(x - D(x; sigma)) / sigma`` at both ends of each
    interval; the final interval into sigma = 0 is a plain Euler step.
    """
    if method not in ("heun", "euler"):
        raise ValueError(f"unknown sampler {method!r}")
    sig = sigma_schedule(config, steps)
    x = sig[0] * np.asarray(z, dtype=np.float64)
    for i in range(len(sig) - 1):
        s, s_next = sig[i], sig[i + 1]
        d = (x - denoise_fn(x, s)) / s
        x_next = x + (s_next - s) * d
        if method == "heun" and s_next > 0:
            d2 = (x_next - denoise_fn(x_next, s_next)) / s_next
            x_next = x + (s_next - s) * 0.5 * (d + d2)
        if not np.all(np.isfinite(x_next)):
            raise SamplingError(f"non-finite sampler state at step {i}")
        x = x_next
    return x


def model_denoise_fn(model: DenoiserParams, cond: np.ndarray) -> DenoiseFn:
    """Adapt a learned denoiser to the (B, 68) sampler interface."""
    def fn(x, sigma):
        return denoise(model, x[:, None, :], sigma, cond)[:, 0, :]
    return fn


def heun_sample(model: DenoiserParams, cond: np.ndarray, config: DiffusionConfig, steps: int,
                rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw normalized residuals for conditions ``cond`` (B, 7, 68) or (7, 68)."""
    cond = np.asarray(cond)
    single = cond.ndim == 2
    if single:
        cond = cond[None]
    if n is not None and len(cond) == 1:
        cond = np.repeat(cond, n, axis=0)
    z = rng.standard_normal((len(cond), model.arch.length))
    x = sample_ode(model_denoise_fn(model, cond), z, config, steps, "heun")
    return x[0] if single and n is None else x


# ---------------------------------------------------------------- prediction

def _sampler_settings(ckpt: Checkpoint, steps: int | None) -> tuple[DiffusionConfig, int]:
    config = DiffusionConfig(**ckpt.diffusion) if ckpt.diffusion else DiffusionConfig()
    return config, (steps if steps is not None else config.steps)


def predict_many(ckpt: Checkpoint, baselines: Sequence[tuple[str, Baseline]], months: Sequence[int],
                 realizations: int, seed: int, steps: int | None = None, chunk: int = 512,
                 workers: int = 1) -> dict[tuple[str, int], np.ndarray]:
    """Sample K trajectories per (subject, month); returns {(id, month): (K, 68) mm}.

    Every (subject, month, realization) task draws its initial noise from its
    own labeled substream, and tasks are batched in a fixed canonical order, so
    results do not depend on ``workers``.
    """
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    if any(m <= 0 for m in months):
        raise ValueError("target months must be > 0")
    model = ckpt.model()
    stats = ckpt.stats
    config, steps = _sampler_settings(ckpt, steps)
    tasks = [(sid, b, m, k) for sid, b in baselines for m in months for k in range(realizations)]
    conds = np.empty((len(tasks), model.arch.cond_channels, model.arch.length))
    z = np.empty((len(tasks), model.arch.length))
    for t, (sid, b, m, k) in enumerate(tasks):
        raw = b.at(float(m))
        raw.validate()
        conds[t] = assemble_conditions(normalize_levels(np.asarray(raw.baseline_cth, float), stats)[None],
                                       condition_scalars(raw.age, raw.sex, raw.diagnosis, m, stats)[None])[0]
        z[t] = substream(seed, "sample", sid, int(m), k).standard_normal(model.arch.length)

    bounds = [(i, min(i + chunk, len(tasks))) for i in range(0, len(tasks), chunk)]

    def run(bound):
        lo, hi = bound
        return sample_ode(model_denoise_fn(model, conds[lo:hi]), z[lo:hi], config, steps, config.sampler)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    x = np.concatenate(parts) if parts else np.empty((0, model.arch.length))
    delta = x * stats.resid_std + stats.resid_mean
    out: dict[tuple[str, int], np.ndarray] = {}
    for t, (sid, b, m, k) in enumerate(tasks):
        out.setdefault((sid, int(m)), np.empty((realizations, model.arch.length)))[k] = (
            np.asarray(b.cth, float) + delta[t])
    return out


def predict_trajectory(ckpt: Checkpoint, baseline: Baseline, target_months: Sequence[int],
                       realizations: int = 1, seed: int = 0, steps: int | None = None,
                       subject_id: str = "subject") -> np.ndarray:
    """Predicted thickness, shape (len(target_months), K, 68), in mm."""
    if ckpt.kind != "diffusion":
        raise CheckpointError(f"expected a diffusion checkpoint, got {ckpt.kind!r}")
    res = predict_many(ckpt, [(subject_id, baseline)], target_months, realizations, seed, steps)
    return np.stack([res[(subject_id, int(m))] for m in target_months])


def subject_baseline(subject) -> Baseline:
    """Baseline-visit condition for a cohort subject."""
    return Baseline(subject.visits[0], subject.age_bl, subject.sex, subject.dx_by_visit[0])

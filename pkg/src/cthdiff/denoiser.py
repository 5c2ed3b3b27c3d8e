"""Conditional denoiser D(x; sigma, y) over length-68 thickness signals.

A small 1D U-net (three resolutions, 68 -> 34 -> 17, attention at the
bottleneck) receives the noisy residual concatenated channel-wise with a
7-channel condition tensor and is wrapped in EDM preconditioning.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import DIAGNOSES, N_ROI, NormalizationStats

COND_CHANNELS = 7


class ConditionError(ValueError):
    """A raw condition field is out of its valid range."""


@dataclass(frozen=True)
class Baseline:
    """What is known about a subject at the conditioning visit."""
    cth: np.ndarray
    age: float
    sex: int
    diagnosis: str

    def at(self, delta_months: float) -> "ConditionRaw":
        return ConditionRaw(self.cth, self.age, self.sex, self.diagnosis, delta_months)


@dataclass(frozen=True)
class ConditionRaw:
    baseline_cth: np.ndarray
    age: float
    sex: int
    diagnosis: str
    delta_months: float

    def validate(self) -> None:
        cth = np.asarray(self.baseline_cth, dtype=float)
        if cth.shape != (N_ROI,):
            raise ConditionError(f"baseline_cth must have {N_ROI} values, got shape {cth.shape}")
        if not np.all((cth > 0) & (cth < 6)):
            raise ConditionError("baseline_cth values must lie in (0, 6) mm")
        if not 40 <= self.age <= 100:
            raise ConditionError(f"age {self.age} outside [40, 100]")
        if self.sex not in (0, 1):
            raise ConditionError(f"sex must be 0 or 1, got {self.sex!r}")
        if self.diagnosis not in DIAGNOSES:
            raise ConditionError(f"diagnosis {self.diagnosis!r} not one of {DIAGNOSES}")
        if not 0 < self.delta_months <= 120:
            raise ConditionError(f"delta_months {self.delta_months} outside (0, 120]")


def encode_condition(raw: ConditionRaw, stats: NormalizationStats) -> np.ndarray:
    """Build the (7, 68) condition tensor.

    Channel 0 is the z-scored conditioning-visit thickness; channels 1-6 are
    broadcast scalars: z-scored age, sex, diagnosis one-hot (CN, MCI, AD) and
    ``delta_months / 36``.
    """
    raw.validate()
    scalars = condition_scalars(raw.age, raw.sex, raw.diagnosis, raw.delta_months, stats)
    return assemble_conditions(normalize_levels(np.asarray(raw.baseline_cth, float), stats)[None],
                               scalars[None])[0]


def normalize_levels(cth: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (cth - stats.level_mean) / stats.level_std


def condition_scalars(age, sex, diagnosis, delta_months, stats: NormalizationStats) -> np.ndarray:
    onehot = [1.0 if diagnosis == d else 0.0 for d in DIAGNOSES]
    return np.array([(age - stats.age_mean) / stats.age_std, float(sex), *onehot,
                     delta_months / stats.delta_scale])


def assemble_conditions(levels: np.ndarray, scalars: np.ndarray) -> np.ndarray:
    """Stack (N, 68) normalized levels with (N, 6) scalars into (N, 7, 68)."""
    n = levels.shape[0]
    out = np.empty((n, COND_CHANNELS, levels.shape[1]))
    out[:, 0] = levels
    out[:, 1:] = scalars[:, :, None]
    return out


def decode_condition(cond: np.ndarray) -> dict:
    """Inverse of the channel layout (normalized units)."""
    dx = DIAGNOSES[int(np.argmax(cond[3:6, 0]))]
    return {"levels": cond[0].copy(), "age_z": float(cond[1, 0]), "sex": float(cond[2, 0]),
            "diagnosis": dx, "delta_scaled": float(cond[6, 0])}


# ---------------------------------------------------------------- architecture

@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    attention: bool = True
    heads: int = 1
    sigma_conditioning: bool = True
    x_channels: int = 1
    cond_channels: int = COND_CHANNELS
    emb_dim: int = 64
    fourier_dim: int = 16
    length: int = N_ROI
    gn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3:
            raise ValueError("widths must list three resolutions")

    @property
    def in_channels(self) -> int:
        return self.x_channels + self.cond_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _groups(c: int) -> int:
    return math.gcd(8, c) if c % min(8, c) else min(8, c)


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every learnable tensor."""
    w0, w1, w2 = arch.widths
    shapes: dict[str, tuple[int, ...]] = {}
    emb = arch.emb_dim if arch.sigma_conditioning else 0

    def conv(name, cin, cout, k):
        shapes[f"{name}.w"] = (cout, cin, k)
        shapes[f"{name}.b"] = (cout,)

    def gn(name, c):
        shapes[f"{name}.g"] = (c,)
        shapes[f"{name}.b"] = (c,)

    def resblock(name, cin, cout):
        gn(f"{name}.gn1", cin)
        conv(f"{name}.conv1", cin, cout, 3)
        gn(f"{name}.gn2", cout)
        if emb:
            shapes[f"{name}.film.w"] = (2 * cout, emb)
            shapes[f"{name}.film.b"] = (2 * cout,)
        conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            conv(f"{name}.skip", cin, cout, 1)

    if emb:
        shapes["emb.fc1.w"] = (emb, arch.fourier_dim + 1)
        shapes["emb.fc1.b"] = (emb,)
        shapes["emb.fc2.w"] = (emb, emb)
        shapes["emb.fc2.b"] = (emb,)
    conv("in_conv", arch.in_channels, w0, 3)
    resblock("enc0", w0, w0)
    conv("down1", w0, w1, 3)
    resblock("enc1", w1, w1)
    conv("down2", w1, w2, 3)
    resblock("enc2", w2, w2)
    if arch.attention:
        gn("mid.attn.gn", w2)
        for p in ("wq", "wk", "wv", "wo"):
            shapes[f"mid.attn.{p}"] = (w2, w2)
    resblock("mid.res", w2, w2)
    conv("up2", w2, w1, 3)
    resblock("dec1", 2 * w1, w1)
    conv("up1", w1, w0, 3)
    resblock("dec0", 2 * w0, w0)
    gn("out.gn", w0)
    conv("out.conv", w0, 1, 3)
    return shapes


def init_params(arch: ArchConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases, unit norms, zero output conv."""
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.startswith("out.conv"):
            arr = np.zeros(shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        params[name] = arr.astype(dtype)
    return params


def fourier_features(c_noise: np.ndarray, dim: int) -> np.ndarray:
    """[c, cos(f_k c), sin(f_k c)] with geometric frequencies 1..64 rad."""
    c = np.asarray(c_noise, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(np.linspace(0.0, math.log(64.0), dim // 2))[None, :]
    return np.concatenate([c, np.cos(c * freqs), np.sin(c * freqs)], axis=1)


def _gn(P, name, h, arch):
    return ad.group_norm(h, _groups(h.shape[0]), P[f"{name}.g"], P[f"{name}.b"], arch.gn_eps)


def _conv(P, name, h, stride=1):
    k = P[f"{name}.w"].shape[2]
    return ad.conv1d(h, P[f"{name}.w"], P[f"{name}.b"], padding=(k - 1) // 2, stride=stride)


def _resblock(P, name, h, emb, arch):
    y = _conv(P, f"{name}.conv1", ad.silu(_gn(P, f"{name}.gn1", h, arch)))
    y = _gn(P, f"{name}.gn2", y, arch)
    if emb is not None:
        c, n = y.shape[0], y.shape[1]
        ss = ad.transpose(ad.linear(emb, P[f"{name}.film.w"], P[f"{name}.film.b"]))
        ss = ad.reshape(ss, (2 * c, n, 1))
        y = ad.add(ad.mul(y, ad.add(ad.slice_channels(ss, 0, c), 1.0)), ad.slice_channels(ss, c, 2 * c))
    y = _conv(P, f"{name}.conv2", ad.silu(y))
    skip = _conv(P, f"{name}.skip", h) if f"{name}.skip.w" in P else h
    return ad.add(skip, y)


def unet_forward(arch: ArchConfig, P: dict[str, Tensor], inp: Tensor,
                 c_noise: np.ndarray | None = None) -> Tensor:
    """Run the U-net on an (in_channels, N, 68) input; returns (1, N, 68)."""
    if inp.data.ndim != 3 or inp.shape[0] != arch.in_channels or inp.shape[2] != arch.length:
        raise ad.DimensionError(f"U-net input must be ({arch.in_channels}, N, {arch.length}), got {inp.shape}")
    emb = None
    if arch.sigma_conditioning:
        if c_noise is None:
            raise ValueError("sigma-conditioned network needs c_noise")
        feats = Tensor(fourier_features(c_noise, arch.fourier_dim).astype(P["emb.fc1.w"].dtype))
        emb = ad.silu(ad.linear(feats, P["emb.fc1.w"], P["emb.fc1.b"]))
        emb = ad.silu(ad.linear(emb, P["emb.fc2.w"], P["emb.fc2.b"]))
    h = _conv(P, "in_conv", inp)
    s0 = _resblock(P, "enc0", h, emb, arch)
    h = _resblock(P, "enc1", _conv(P, "down1", s0, stride=2), emb, arch)
    s1 = h
    h = _resblock(P, "enc2", _conv(P, "down2", h, stride=2), emb, arch)
    if arch.attention:
        a = ad.self_attention_1d(_gn(P, "mid.attn.gn", h, arch), P["mid.attn.wq"], P["mid.attn.wk"],
                                 P["mid.attn.wv"], P["mid.attn.wo"], heads=arch.heads)
        h = ad.add(h, a)
    h = _resblock(P, "mid.res", h, emb, arch)
    h = _conv(P, "up2", ad.upsample2(h, s1.shape[-1]))
    h = _resblock(P, "dec1", ad.concat_channels(h, s1), emb, arch)
    h = _conv(P, "up1", ad.upsample2(h, s0.shape[-1]))
    h = _resblock(P, "dec0", ad.concat_channels(h, s0), emb, arch)
    return _conv(P, "out.conv", ad.silu(_gn(P, "out.gn", h, arch)))


# ---------------------------------------------------------------- preconditioning

@dataclass
class DenoiserParams:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    sigma_data: float = 0.5
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")
        expected = param_shapes(self.arch)
        if list(expected) != list(self.params):
            raise ValueError("parameter names do not match the architecture")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.arch, {k: v.astype(dtype) for k, v in self.params.items()},
                              self.sigma_data, dict(self.extra))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}


def precond(sigma, sigma_data: float):
    """EDM coefficients (c_skip, c_out, c_in, c_noise) for noise level ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s2, d2 = sigma * sigma, sigma_data * sigma_data
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def _batch3(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    return x, False


def raw_forward(model: DenoiserParams, x_in, c_noise, cond) -> np.ndarray:
    """Network output F(x_in, c_noise, cond); x_in is (1, 68) or (N, 1, 68)."""
    x, squeeze = _batch3(x_in)
    cond, _ = _batch3(cond)
    n = x.shape[0]
    cond = np.broadcast_to(cond, (n,) + cond.shape[1:])
    inp = Tensor(channel_major(x, cond, model.dtype))
    cn = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (n,))
    out = unet_forward(model.arch, model.tensors(), inp, cn).data.transpose(1, 0, 2)
    return out[0] if squeeze else out


def channel_major(x: np.ndarray | None, cond: np.ndarray, dtype) -> np.ndarray:
    """Stack batch-first (N, C, L) arrays into the network's (C, N, L) layout."""
    parts = [cond] if x is None else [x, cond]
    return np.ascontiguousarray(np.concatenate(parts, axis=1).transpose(1, 0, 2), dtype=dtype)


def denoise(model: DenoiserParams, x_noisy, sigma, cond) -> np.ndarray:
    """c_skip * x + c_out * F(c_in * x, c_noise, cond); sigma scalar or per-item."""
    x, squeeze = _batch3(x_noisy)
    n = x.shape[0]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    c_skip, c_out, c_in, c_noise = precond(sig, model.sigma_data)
    f = raw_forward(model, c_in[:, None, None] * x, c_noise, cond)
    d = c_skip[:, None, None] * x + c_out[:, None, None] * f
    return d[0] if squeeze else d


def score(model: DenoiserParams, x, sigma, cond) -> np.ndarray:
    """(D(x; sigma, y) - x) / sigma^2."""
    x = np.asarray(x)
    sig = np.asarray(sigma, dtype=np.float64)
    s2 = sig * sig if sig.ndim == 0 else (sig * sig).reshape((-1,) + (1,) * (x.ndim - 1))
    return (denoise(model, x, sigma, cond) - x) / s2


def denoise_tensor(arch: ArchConfig, P: dict[str, Tensor], x: np.ndarray, sigma: np.ndarray,
                   cond: np.ndarray, sigma_data: float) -> Tensor:
    """Differentiable D for training.

    Inputs are batch-first: x (N, 1, 68), sigma (N,), cond (N, 7, 68). The
    result is in network layout, (1, N, 68).
    """
    c_skip, c_out, c_in, c_noise = precond(sigma, sigma_data)
    dt = P["in_conv.w"].dtype
    f = unet_forward(arch, P, Tensor(channel_major(c_in[:, None, None] * x, cond, dt)), c_noise)
    skip = (c_skip[:, None, None] * x).transpose(1, 0, 2).astype(dt)
    return ad.add(ad.mul(f, c_out[None, :, None].astype(dt)), skip)


def parameter_count(arch: ArchConfig, prefix: str = "") -> int:
    return int(sum(np.prod(s) for k, s in param_shapes(arch).items() if k.startswith(prefix)))

"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"CTHD" | version | header_len | header (UTF-8 JSON)
    repeated: name_len | name (UTF-8) | ndim | dims... | float32 LE data
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import NormalizationStats
from .denoiser import ArchConfig, DenoiserParams, param_shapes

MAGIC = b"CTHD"
VERSION = 1
MODEL_KINDS = ("diffusion", "unet_attn", "unet_plain")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arch: ArchConfig
    params: dict[str, np.ndarray]
    stats: NormalizationStats
    sigma_data: float | None = None
    diffusion: dict | None = None
    training: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise CheckpointError(f"unknown model kind {self.kind!r}")
        expected = param_shapes(self.arch)
        if list(expected) != list(self.params):
            raise CheckpointError("parameter names do not match the architecture config")
        for k, shape in expected.items():
            if tuple(self.params[k].shape) != shape:
                raise CheckpointError(f"parameter {k!r} has shape {self.params[k].shape}, expected {shape}")
        if len(self.stats.level_mean) != self.arch.length or len(self.stats.resid_mean) != self.arch.length:
            raise CheckpointError("normalization statistics do not match the signal length")

    def model(self) -> DenoiserParams:
        if self.kind != "diffusion":
            raise CheckpointError(f"checkpoint holds a {self.kind!r} model, not a diffusion denoiser")
        return DenoiserParams(self.arch, self.params, self.sigma_data)

    def header(self) -> dict:
        return {
            "model_kind": self.kind,
            "arch": self.arch.to_dict(),
            "normalization": self.stats.to_dict(),
            "sigma_data": self.sigma_data,
            "diffusion": self.diffusion,
            "training": self.training,
            "seed": self.seed,
        }


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    buf.write(MAGIC + _u32(VERSION) + _u32(len(header)) + header)
    for name, arr in ckpt.params.items():
        enc = name.encode()
        buf.write(_u32(len(enc)) + enc + _u32(arr.ndim))
        for d in arr.shape:
            buf.write(_u32(d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(bytes(take(u32())).decode())
    params = {}
    while pos < len(view):
        name = bytes(take(u32())).decode()
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    arch = header["arch"]
    return Checkpoint(
        kind=header["model_kind"],
        arch=ArchConfig(**arch),
        params=params,
        stats=NormalizationStats.from_dict(header["normalization"]),
        sigma_data=header["sigma_data"],
        diffusion=header["diffusion"],
        training=header["training"],
        seed=header["seed"],
    )


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())

"""Run configuration: one JSON document covering data, model, training and sampling.

Every field has a default and unknown keys are rejected at any depth. The
fully resolved config is echoed next to every output so a run can be
reproduced from the echo alone.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .cohort import PAIR_POLICIES, CohortSpec
from .denoiser import ArchConfig
from .diffusion import DiffusionConfig, TrainHyper
from .evaluation import POINT_ESTIMATES

CONFIG_ENV = "CTHDIFF_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class SamplingConfig:
    # None means the full NFE budget of the diffusion config
    steps: int | None = None
    realizations: int = 10
    chunk: int = 512
    workers: int = 1
    point_estimate: str = "mean"

    def validate(self) -> None:
        if self.steps is not None and self.steps < 1:
            raise ConfigError("sampling.steps must be >= 1")
        if self.realizations < 1 or self.chunk < 1 or self.workers < 1:
            raise ConfigError("sampling.realizations, chunk and workers must be >= 1")
        if self.point_estimate not in POINT_ESTIMATES:
            raise ConfigError(f"sampling.point_estimate must be one of {POINT_ESTIMATES}")


@dataclass
class RunConfig:
    seed: int = 0
    pair_policy: str = "all_pairs"
    cohort: CohortSpec = field(default_factory=CohortSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainHyper = field(default_factory=TrainHyper)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def validate(self) -> "RunConfig":
        if self.pair_policy not in PAIR_POLICIES:
            raise ConfigError(f"pair_policy must be one of {PAIR_POLICIES}, got {self.pair_policy!r}")
        try:
            self.cohort.validate()
            self.diffusion.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.sampling.validate()
        return self

    def cohort_spec(self) -> CohortSpec:
        """Cohort spec with the root seed applied."""
        return dataclasses.replace(self.cohort, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cohort"].pop("seed")
        d["cohort"]["missingness"] = {str(k): v for k, v in self.cohort.missingness.items()}
        d["arch"]["widths"] = list(self.arch.widths)
        return d


_SECTIONS = {"cohort": CohortSpec, "arch": ArchConfig, "diffusion": DiffusionConfig,
             "training": TrainHyper, "sampling": SamplingConfig}
# the cohort seed is the root seed; it is not settable on its own
_HIDDEN = {"cohort": {"seed"}}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(cls)} - _HIDDEN.get(where, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _build(_SECTIONS[k], v, k) if not where and k in _SECTIONS else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# Named starting points; a config file may pick one with {"preset": name}.
PRESETS: dict[str, dict] = {
    "default": {},
    # sized so the 512-epoch benchmark on the default cohort fits a 30 minute single-core budget
    "desk": {"arch": {"widths": [8, 16, 32], "emb_dim": 32},
             "sampling": {"steps": 32, "realizations": 16}},
    "long": {"training": {"epochs": 8192}},
}


def load_config(path=None, preset: str | None = None) -> RunConfig:
    """Load a RunConfig from ``path`` (or $CTHDIFF_CONFIG, or pure defaults)."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    name = data.pop("preset", None) if preset is None else preset
    data.pop("preset", None) if preset is not None else None
    if name is not None:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        data = _merge(PRESETS[name], data)
    return config_from_dict(data)


def config_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def echo_config(cfg: RunConfig, out_path) -> Path:
    """Write the effective config beside an output as ``<out>.config.json``."""
    echo = Path(str(out_path) + ".config.json")
    echo.write_text(config_json(cfg), encoding="utf-8")
    return echo

"""Run configuration: a JSON document with command-line overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from mfiba.codec import CodecConfig
from mfiba.mfip import default_phi_levels
from mfiba.pyramid import PyramidSpec
from mfiba.task import make_evaluator

__all__ = ["ConfigError", "RunConfig", "load_config"]

DEFAULT_SENSITIVITIES = (0.4, 0.3, 0.2, 0.07, 0.03)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs besides its positional arguments.

    ``target_bpp`` values are converted to total-bit targets with the
    scale-0 element count of each pyramid.
    """

    pyramid_dir: str = "pyramids"
    model_file: str = "model.json"
    report_dir: str = "reports"
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    jobs: int = 1
    # synthetic pyramid geometry
    n: int = 3
    channels: int = 8
    height: int = 32
    width: int = 32
    object_size_param: float = 0.5
    std_decay: float = 0.9
    smoothing: float = 1.0
    # codec
    delta0: float = 1.0
    phi_min: float = 0.0
    phi_max: float = 12.0
    # mfip and allocation
    m: int = 8
    phi_levels: tuple[float, ...] | None = None
    k: float = 4.0
    rate_floor: float = 0.01
    refine: bool = False
    finetune: bool = False
    max_passes: int = 50
    evaluator: dict = field(default_factory=lambda: {"name": "synthetic", "sensitivities": list(DEFAULT_SENSITIVITIES)})
    lambda_primes: tuple[float, ...] = ()
    target_bpp: tuple[float, ...] = (2.5, 3.0, 3.5, 4.0, 5.0, 6.0)
    modes: tuple[str, ...] = ("mfiba", "uniform")

    def __post_init__(self):
        for name in ("seeds", "phi_levels", "lambda_primes", "target_bpp", "modes"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value))
        self.validate()

    def validate(self) -> None:
        try:
            codec = self.codec
            self.pyramid_spec
            make_evaluator(self.evaluator)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.m < 2:
            raise ConfigError("m must be at least 2")
        levels = self.levels
        if any(not codec.phi_min <= v <= codec.phi_max for v in levels):
            raise ConfigError(f"phi levels {levels} outside [{codec.phi_min}, {codec.phi_max}]")
        if not self.k > 0 or not self.rate_floor > 0:
            raise ConfigError("k and rate_floor must be positive")
        if self.max_passes < 1:
            raise ConfigError("max_passes must be at least 1")
        if any(not v > 0 for v in self.lambda_primes) or any(not v > 0 for v in self.target_bpp):
            raise ConfigError("lambda_primes and target_bpp must be positive")
        from mfiba.evaluation import MODES

        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}; expected a subset of {MODES}")

    @property
    def codec(self) -> CodecConfig:
        return CodecConfig(self.delta0, self.phi_min, self.phi_max)

    @property
    def levels(self) -> tuple[float, ...]:
        if self.phi_levels is not None:
            return tuple(float(v) for v in self.phi_levels)
        return default_phi_levels(self.m, self.codec)

    @property
    def pyramid_spec(self) -> PyramidSpec:
        return PyramidSpec(
            n=self.n,
            channels=self.channels,
            height=self.height,
            width=self.width,
            object_size_param=self.object_size_param,
            std_decay=self.std_decay,
            smoothing=self.smoothing,
        )

    def make_evaluator(self):
        return make_evaluator(self.evaluator)

    def settings(self):
        from mfiba.evaluation import PipelineSettings

        return PipelineSettings(
            phi_levels=self.levels,
            codec=self.codec,
            k=self.k,
            rate_floor=self.rate_floor,
            max_passes=self.max_passes,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def override(self, **changes) -> "RunConfig":
        """Apply flag values; ``None`` means the flag was not given."""
        given = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **given) if given else self


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return RunConfig.from_dict(raw)

"""Task evaluators: score reconstructed pyramids against their originals.

The shipped :class:`SyntheticDetector` has known per-scale sensitivities so
importance estimation can be checked against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from mfiba.pyramid import FeaturePyramid, pyramid_distortion

__all__ = [
    "TaskEvaluator",
    "SyntheticDetector",
    "synthetic_loss",
    "size_coupled_sensitivities",
    "make_evaluator",
]


@runtime_checkable
class TaskEvaluator(Protocol):
    def task_loss(self, ref: FeaturePyramid, deg: FeaturePyramid) -> float: ...

    def evaluate(self, deg: FeaturePyramid, ref: FeaturePyramid) -> float: ...


def size_coupled_sensitivities(object_size_param: float, num_scales: int = 5, steepness: float = 0.8) -> np.ndarray:
    """Sensitivity profile that moves from scale 0 to the pooled scale as objects grow.

    Geometric blend of a small-object profile ``exp(-steepness * j)`` and its
    mirror image, renormalized to sum to one.
    """
    t = float(object_size_param)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"object_size_param={t} outside [0, 1]")
    if num_scales < 1:
        raise ValueError("num_scales must be positive")
    j = np.arange(num_scales, dtype=np.float64)
    logits = -steepness * ((1.0 - t) * j + t * (num_scales - 1 - j))
    s = np.exp(logits - logits.max())
    return s / s.sum()


@dataclass(frozen=True)
class SyntheticDetector:
    """``loss = sum_i s_i * (1 - exp(-MSE_i / c))``; accuracy is ``1 - loss``.

    With ``size_coupling`` the sensitivities are derived per pyramid from its
    ``object_size_param`` and the fixed ``sensitivities`` are ignored.
    """

    sensitivities: tuple[float, ...] = ()
    saturation: float = 0.25
    size_coupling: bool = False
    steepness: float = 0.8

    def __post_init__(self):
        s = np.asarray(self.sensitivities, dtype=np.float64)
        if not self.saturation > 0:
            raise ValueError("saturation constant must be positive")
        if not self.size_coupling:
            if s.size == 0:
                raise ValueError("sensitivities required unless size_coupling is set")
            if np.any(s < 0) or not np.isclose(s.sum(), 1.0, rtol=0, atol=1e-9):
                raise ValueError("sensitivities must be nonnegative and sum to 1")
        object.__setattr__(self, "sensitivities", tuple(float(v) for v in s))

    def sensitivities_for(self, p: FeaturePyramid) -> np.ndarray:
        if self.size_coupling:
            if p.object_size_param is None:
                raise ValueError(f"pyramid {p.source_id!r} carries no object_size_param")
            return size_coupled_sensitivities(p.object_size_param, p.num_scales, self.steepness)
        s = np.asarray(self.sensitivities)
        if s.size != p.num_scales:
            raise ValueError(f"detector has {s.size} sensitivities, pyramid has {p.num_scales} scales")
        return s

    def loss_from_mse(self, s: Sequence[float], mse: Sequence[float]) -> float:
        s = np.asarray(s, dtype=np.float64)
        mse = np.asarray(mse, dtype=np.float64)
        return float(np.sum(s * -np.expm1(-mse / self.saturation)))

    def task_loss(self, ref: FeaturePyramid, deg: FeaturePyramid) -> float:
        mse = pyramid_distortion(ref, deg).as_array()
        return self.loss_from_mse(self.sensitivities_for(ref), mse)

    def evaluate(self, deg: FeaturePyramid, ref: FeaturePyramid) -> float:
        return 1.0 - self.task_loss(ref, deg)


def synthetic_loss(ref: FeaturePyramid, deg: FeaturePyramid, detector: SyntheticDetector) -> float:
    return detector.task_loss(ref, deg)


def make_evaluator(spec: dict) -> TaskEvaluator:
    """Build an evaluator from a config block such as ``{"name": "synthetic", ...}``."""
    spec = dict(spec)
    name = spec.pop("name", "synthetic")
    if name != "synthetic":
        raise ValueError(f"unknown evaluator {name!r}")
    sens = spec.pop("sensitivities", ())
    det = SyntheticDetector(
        sensitivities=tuple(sens),
        saturation=float(spec.pop("saturation", 0.25)),
        size_coupling=bool(spec.pop("size_coupling", False)),
        steepness=float(spec.pop("steepness", 0.8)),
    )
    if spec:
        raise ValueError(f"unknown evaluator parameters: {sorted(spec)}")
    return det

"""Loss-rate and rate-phi model fitting, goodness metrics and the model file."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "FitQualityWarning",
    "DegenerateFitError",
    "LossRateModel",
    "QuadraticLossRateModel",
    "RatePhiModel",
    "GoodnessReport",
    "ModelFile",
    "fit_cauchy",
    "fit_quadratic",
    "fit_rate_phi",
    "goodness",
]

# Positive floor used when a fitted slope has the wrong sign.
MIN_SLOPE = 1e-6


class FitQualityWarning(UserWarning):
    """A fit hit a constraint clamp; the data do not follow the model family."""


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class LossRateModel:
    """Task loss ``d = w * alpha * R**-beta``."""

    alpha: float
    beta: float
    used: int = 0
    excluded: int = 0
    clamped: bool = False

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError(f"alpha, beta must be positive and finite, got {self.alpha}, {self.beta}")

    def predict(self, w, R) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) * self.alpha * np.asarray(R, dtype=np.float64) ** (-self.beta)


@dataclass(frozen=True)
class QuadraticLossRateModel:
    q2: float
    q1: float
    q0: float

    def predict(self, R) -> np.ndarray:
        R = np.asarray(R, dtype=np.float64)
        return (self.q2 * R + self.q1) * R + self.q0


@dataclass(frozen=True)
class RatePhiModel:
    """Per-scale linear map ``R_i = a[i] * phi_i + b[i]``."""

    a: tuple[float, ...]
    b: tuple[float, ...]
    clamped: tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        if len(self.a) != len(self.b):
            raise ValueError("a and b differ in length")
        if any(not v > 0 for v in self.a):
            raise ValueError("rate-phi slopes must be positive")
        if not self.clamped:
            object.__setattr__(self, "clamped", (False,) * len(self.a))

    def __len__(self):
        return len(self.a)

    def predict(self, phis) -> np.ndarray:
        return np.asarray(self.a) * np.asarray(phis, dtype=np.float64) + np.asarray(self.b)


@dataclass(frozen=True)
class GoodnessReport:
    cc: float
    rmse: float
    count: int


def goodness(observed: Sequence[float], predicted: Sequence[float]) -> GoodnessReport:
    """Pearson correlation and RMSE between observations and model predictions."""
    obs = np.asarray(observed, dtype=np.float64)
    pred = np.asarray(predicted, dtype=np.float64)
    if obs.shape != pred.shape or obs.ndim != 1:
        raise ValueError("observed and predicted must be 1-D and of equal length")
    if obs.size < 2:
        raise ValueError("need at least 2 samples")
    do = obs - obs.mean()
    dp = pred - pred.mean()
    so = np.sqrt(np.dot(do, do))
    sp = np.sqrt(np.dot(dp, dp))
    if so == 0:
        raise ValueError("observed values are constant; correlation undefined")
    if sp == 0:
        raise ValueError("predicted values are constant; correlation undefined")
    cc = float(np.clip(np.dot(do, dp) / (so * sp), -1.0, 1.0))
    rmse = float(np.sqrt(np.mean((obs - pred) ** 2)))
    return GoodnessReport(cc, rmse, int(obs.size))


def _ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Slope and intercept of the least-squares line through (x, y)."""
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    slope = float(np.dot(dx, y - ym) / np.dot(dx, dx))
    return slope, float(ym - slope * xm)


def fit_cauchy(samples: Iterable[tuple[float, float, float]], refine: bool = False) -> LossRateModel:
    """Fit ``d = w * alpha * R**-beta`` by least squares on ``ln(d/w)`` vs ``ln R``.

    Samples with ``d <= 0`` or ``w <= 0`` are excluded and counted. With
    ``refine`` one Gauss-Newton step on the untransformed residuals follows.
    """
    arr = np.asarray(list(samples), dtype=np.float64).reshape(-1, 3)
    w, R, d = arr[:, 0], arr[:, 1], arr[:, 2]
    if np.any(~np.isfinite(arr)):
        raise DegenerateFitError("non-finite samples")
    if np.any(R <= 0):
        raise DegenerateFitError("all rates must be positive")
    keep = (d > 0) & (w > 0)
    excluded = int(np.sum(~keep))
    w, R, d = w[keep], R[keep], d[keep]
    if w.size < 2 or np.unique(R).size < 2:
        raise DegenerateFitError(
            f"degenerate design: {w.size} usable samples, {np.unique(R).size} distinct rates ({excluded} excluded)"
        )
    x = np.log(R)
    y = np.log(d / w)
    slope, intercept = _ols_line(x, y)
    beta = -slope
    clamped = False
    if not beta > 0:
        warnings.warn(
            f"loss does not decrease with rate (fitted beta={beta:.3g}); clamping beta to {MIN_SLOPE}",
            FitQualityWarning,
            stacklevel=2,
        )
        beta = MIN_SLOPE
        intercept = float(np.mean(y + beta * x))
        clamped = True
    alpha = float(np.exp(intercept))
    if refine and not clamped:
        alpha, beta = _gauss_newton_step(w, R, d, alpha, beta)
    return LossRateModel(alpha, beta, int(w.size), excluded, clamped)


def _gauss_newton_step(w, R, d, alpha, beta):
    pred = w * alpha * R ** (-beta)
    resid = d - pred
    # Jacobian of the prediction w.r.t. (ln alpha, beta).
    J = np.column_stack([pred, -pred * np.log(R)])
    step, *_ = np.linalg.lstsq(J, resid, rcond=None)
    new_alpha = alpha * float(np.exp(step[0]))
    new_beta = beta + float(step[1])
    if not (new_beta > 0 and np.isfinite(new_alpha)):
        return alpha, beta
    new_resid = d - w * new_alpha * R ** (-new_beta)
    if np.dot(new_resid, new_resid) > np.dot(resid, resid):
        return alpha, beta
    return new_alpha, new_beta


def fit_quadratic(samples: Iterable[tuple[float, float]]) -> QuadraticLossRateModel:
    """Ordinary least squares for ``d = q2 R^2 + q1 R + q0``."""
    arr = np.asarray(list(samples), dtype=np.float64).reshape(-1, 2)
    R, d = arr[:, 0], arr[:, 1]
    if np.unique(R).size < 3:
        raise DegenerateFitError(f"degenerate design: {np.unique(R).size} distinct rates, need 3")
    X = np.column_stack([R * R, R, np.ones_like(R)])
    coef, *_ = np.linalg.lstsq(X, d, rcond=None)
    return QuadraticLossRateModel(*(float(c) for c in coef))


def fit_rate_phi(samples: Sequence[Iterable[tuple[float, float]]]) -> RatePhiModel:
    """Per-scale least-squares lines ``R = a * phi + b``.

    ``samples[i]`` holds the ``(phi, R)`` observations for scale ``i``.
    Nonpositive slopes are clamped to a small positive value with a warning.
    """
    a, b, clamped = [], [], []
    for i, rows in enumerate(samples):
        arr = np.asarray(list(rows), dtype=np.float64).reshape(-1, 2)
        phi, R = arr[:, 0], arr[:, 1]
        if np.unique(phi).size < 2:
            raise DegenerateFitError(f"scale {i}: degenerate design, need 2 distinct phi values")
        slope, intercept = _ols_line(phi, R)
        hit = False
        if not slope > 0:
            warnings.warn(
                f"scale {i}: rate does not grow with phi (slope={slope:.3g}); clamping to {MIN_SLOPE}",
                FitQualityWarning,
                stacklevel=2,
            )
            slope = MIN_SLOPE
            intercept = float(np.mean(R - slope * phi))
            hit = True
        a.append(slope)
        b.append(intercept)
        clamped.append(hit)
    return RatePhiModel(tuple(a), tuple(b), tuple(clamped))


@dataclass
class ModelFile:
    """JSON model-parameter document written by calibration."""

    alpha: float
    beta: float
    quadratic: list[float]
    rate_phi: list[dict]
    weights: list[float]
    k: float
    S0: int
    phi_bounds: list[float]
    provenance: dict = field(default_factory=dict)
    goodness: dict = field(default_factory=dict)

    @property
    def loss_rate(self) -> LossRateModel:
        return LossRateModel(self.alpha, self.beta)

    @property
    def quadratic_model(self) -> QuadraticLossRateModel:
        return QuadraticLossRateModel(*self.quadratic)

    @property
    def rate_phi_model(self) -> RatePhiModel:
        rows = sorted(self.rate_phi, key=lambda r: r["scale"])
        return RatePhiModel(tuple(r["a"] for r in rows), tuple(r["b"] for r in rows))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelFile":
        raw = json.loads(text)
        missing = {"alpha", "beta", "quadratic", "rate_phi", "weights", "k", "S0", "phi_bounds"} - raw.keys()
        if missing:
            raise ValueError(f"model file lacks fields {sorted(missing)}")
        return cls(**raw)

"""RD curves and Bjontegaard-delta bit rate."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = ["RdPoint", "RdCurve", "NoOverlapError", "bd_rate", "COND_LIMIT"]

COND_LIMIT = 1e8


class NoOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    accuracy: float


@dataclass(frozen=True)
class RdCurve:
    """Operating points sorted by strictly increasing bpp."""

    points: tuple[RdPoint, ...]
    label: str = ""

    def __post_init__(self):
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        for p in pts:
            if not (math.isfinite(p.bpp) and math.isfinite(p.accuracy)) or p.bpp <= 0:
                raise ValueError(f"invalid RD point {p}")
        if any(b.bpp <= a.bpp for a, b in zip(pts, pts[1:])):
            raise ValueError("bpp must be strictly increasing along the curve")

    @classmethod
    def from_points(cls, points: Iterable[RdPoint | tuple[float, float]], label: str = "") -> "RdCurve":
        """Sort points by bpp, dropping duplicates of an already-seen bpp with a warning."""
        pts = sorted((p if isinstance(p, RdPoint) else RdPoint(*p) for p in points), key=lambda p: (p.bpp, p.accuracy))
        out: list[RdPoint] = []
        for p in pts:
            if out and p.bpp == out[-1].bpp:
                warnings.warn(f"duplicate operating point at bpp={p.bpp}; dropped", RuntimeWarning, stacklevel=2)
                continue
            out.append(p)
        return cls(tuple(out), label)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def accuracy(self) -> np.ndarray:
        return np.array([p.accuracy for p in self.points])

    def __len__(self):
        return len(self.points)


def _log_rate_integral(acc: np.ndarray, log_rate: np.ndarray, lo: float, hi: float, center: float, half: float) -> float:
    x = (acc - center) / half
    a, b = (lo - center) / half, (hi - center) / half
    V = np.vander(x, 4)
    if np.linalg.cond(V) <= COND_LIMIT:
        coef = np.polyfit(x, log_rate, 3)
        anti = np.polyint(coef)
        return float(np.polyval(anti, b) - np.polyval(anti, a)) * half
    # Piecewise-cubic fallback on accuracy-sorted, deduplicated samples.
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], log_rate[order]
    ux, inv = np.unique(xs, return_inverse=True)
    uy = np.bincount(inv, weights=ys) / np.bincount(inv)
    if ux.size < 2:
        raise NoOverlapError("curve collapses to a single accuracy value")
    return float(PchipInterpolator(ux, uy, extrapolate=True).integrate(a, b)) * half


def bd_rate(test: RdCurve, anchor: RdCurve) -> float:
    """Average bit-rate difference of ``test`` relative to ``anchor`` in percent.

    Log-rate is fitted as a cubic in accuracy for each curve and the fits are
    integrated over the common accuracy interval. Negative means ``test``
    needs fewer bits for the same accuracy.
    """
    for name, c in (("test", test), ("anchor", anchor)):
        if len(c) < 4:
            raise ValueError(f"{name} curve needs at least 4 points, has {len(c)}")
    ta, aa = test.accuracy, anchor.accuracy
    lo = max(ta.min(), aa.min())
    hi = min(ta.max(), aa.max())
    if not hi > lo:
        raise NoOverlapError(f"accuracy ranges do not overlap ([{ta.min()}, {ta.max()}] vs [{aa.min()}, {aa.max()}])")
    # Fit in a normalized accuracy coordinate shared by both curves.
    allacc = np.concatenate([ta, aa])
    center = 0.5 * (allacc.min() + allacc.max())
    half = 0.5 * (allacc.max() - allacc.min())
    int_t = _log_rate_integral(ta, np.log(test.bpp), lo, hi, center, half)
    int_a = _log_rate_integral(aa, np.log(anchor.bpp), lo, hi, center, half)
    avg = (int_t - int_a) / (hi - lo)
    return float(math.expm1(avg) * 100.0)

"""Offline calibration: run MFIP over a corpus and fit the loss-rate and rate-phi models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mfiba.codec import CodecBackend, CodecConfig
from mfiba.mfip import ImportanceWeights, LossMatrix, PrecodeGrid, loss_matrix, normalize_and_average, precode_grid, predict_weights
from mfiba.pyramid import FeaturePyramid
from mfiba.rdmodel import ModelFile, fit_cauchy, fit_quadratic, fit_rate_phi, goodness
from mfiba.task import TaskEvaluator

__all__ = ["MfipRun", "run_mfip", "CalibrationSamples", "pool_samples", "calibrate", "fit_models"]


@dataclass
class MfipRun:
    grid: PrecodeGrid
    losses: LossMatrix
    weights: ImportanceWeights


def run_mfip(p: FeaturePyramid, backend: CodecBackend, evaluator: TaskEvaluator, phi_levels: Sequence[float]) -> MfipRun:
    grid = precode_grid(p, backend, phi_levels)
    losses = loss_matrix(p, grid, evaluator)
    return MfipRun(grid, losses, predict_weights(normalize_and_average(losses)))


@dataclass
class CalibrationSamples:
    """Pooled observations. ``loss_rate`` rows are ``(w, R, d)``; ``rate_phi[i]`` rows ``(phi, R)``."""

    loss_rate: list[tuple[float, float, float]] = field(default_factory=list)
    rate_phi: list[list[tuple[float, float]]] = field(default_factory=list)
    weights: list[tuple[float, ...]] = field(default_factory=list)


def pool_samples(runs: Sequence[MfipRun]) -> CalibrationSamples:
    out = CalibrationSamples()
    for run in runs:
        w = run.weights.w
        n_sc = len(w)
        if not out.rate_phi:
            out.rate_phi = [[] for _ in range(n_sc)]
        elif len(out.rate_phi) != n_sc:
            raise ValueError("corpus mixes pyramids with different scale counts")
        for i in range(n_sc):
            for q, phi in enumerate(run.grid.phi_levels):
                R = float(run.grid.rate_grid[i, q])
                out.loss_rate.append((w[i], R, float(run.losses.L[i, q])))
                out.rate_phi[i].append((phi, R))
        out.weights.append(w)
    return out


def calibrate(
    pyramids: Sequence[FeaturePyramid],
    backend: CodecBackend,
    evaluator: TaskEvaluator,
    phi_levels: Sequence[float],
    k: float = 4.0,
    codec: CodecConfig | None = None,
    refine: bool = False,
    provenance: dict | None = None,
) -> tuple[ModelFile, CalibrationSamples]:
    """Fit one ``(alpha, beta)`` pooled over all scales and pyramids, plus per-scale rate-phi lines."""
    if len(pyramids) == 0:
        raise ValueError("calibration corpus is empty")
    runs = [run_mfip(p, backend, evaluator, phi_levels) for p in pyramids]
    return fit_models(runs, k=k, codec=codec, refine=refine, provenance=provenance)


def fit_models(
    runs: Sequence[MfipRun],
    k: float = 4.0,
    codec: CodecConfig | None = None,
    refine: bool = False,
    provenance: dict | None = None,
) -> tuple[ModelFile, CalibrationSamples]:
    """Pool the samples of finished MFIP runs and fit every model."""
    if len(runs) == 0:
        raise ValueError("calibration corpus is empty")
    codec = codec or CodecConfig()
    samples = pool_samples(runs)
    phi_levels = runs[0].grid.phi_levels

    cauchy = fit_cauchy(samples.loss_rate, refine=refine)
    arr = np.asarray(samples.loss_rate)
    usable = (arr[:, 0] > 0) & (arr[:, 2] > 0)
    w, R, d = arr[usable, 0], arr[usable, 1], arr[usable, 2]
    # The quadratic baseline models the weight-normalized loss d / w.
    quad = fit_quadratic(zip(R, d / w))
    rpm = fit_rate_phi(samples.rate_phi)

    report = {
        "cauchy": _goodness_dict(d, cauchy.predict(w, R)),
        "quadratic": _goodness_dict(d, w * quad.predict(R)),
        "rate_phi": [],
        "cauchy_samples": {"used": cauchy.used, "excluded": cauchy.excluded, "beta_clamped": cauchy.clamped},
    }
    for i, rows in enumerate(samples.rate_phi):
        phi = np.array([r[0] for r in rows])
        obs = np.array([r[1] for r in rows])
        report["rate_phi"].append({"scale": i, **_goodness_dict(obs, rpm.a[i] * phi + rpm.b[i])})

    model = ModelFile(
        alpha=cauchy.alpha,
        beta=cauchy.beta,
        quadratic=[quad.q2, quad.q1, quad.q0],
        rate_phi=[{"scale": i, "a": a, "b": b} for i, (a, b) in enumerate(zip(rpm.a, rpm.b))],
        weights=[float(v) for v in np.mean(np.asarray(samples.weights), axis=0)],
        k=float(k),
        S0=int(runs[0].grid.reference.S0),
        phi_bounds=[codec.phi_min, codec.phi_max],
        provenance={
            "pyramids": [r.grid.reference.source_id for r in runs],
            "phi_levels": [float(v) for v in phi_levels],
            "delta0": codec.delta0,
            **(provenance or {}),
        },
        goodness=report,
    )
    return model, samples


def _goodness_dict(obs, pred) -> dict:
    try:
        g = goodness(obs, pred)
    except ValueError as exc:
        return {"cc": None, "rmse": float(np.sqrt(np.mean((np.asarray(obs) - np.asarray(pred)) ** 2))), "count": len(obs), "note": str(exc)}
    return {"cc": g.cc, "rmse": g.rmse, "count": g.count}

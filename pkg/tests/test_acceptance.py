"""Acceptance suite: one test per criterion, each recording a pass/fail line."""

import csv
import io
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import kendalltau

from mfiba.allocator import AllocationProblem, brute_force_budget, closed_form_budget, objective
from mfiba.bdrate import RdCurve, bd_rate
from mfiba.codec import ScaleBitstream, decode_scale, dequantize, encode_scale, quantize, step_for_phi
from mfiba.evaluation import REPORT_COLUMNS, PipelineSettings, compare_at_matched_bits, run_pipeline, write_report_csv
from mfiba.mfip import (
    AllocationContext,
    EfficiencyMetric,
    default_phi_levels,
    finetune_weights,
    loss_matrix,
    normalize_and_average,
    precode_grid,
    predict_weights,
)
from mfiba.pyramid import FeatureScale, synth_pyramid
from mfiba.rdmodel import LossRateModel, fit_cauchy, fit_rate_phi, goodness

from _acceptance import record
from conftest import SENS, SMALL, TINY

pytestmark = pytest.mark.slow


def test_criterion_1_allocation_optimality():
    rng = np.random.default_rng(1)
    step = 1e-3
    worst_j, worst_r = -math.inf, 0.0
    start = time.perf_counter()
    for _ in range(100):
        prob = AllocationProblem(
            weights=tuple(rng.dirichlet(np.ones(5))),
            alpha=rng.uniform(0.5, 5.0),
            beta=rng.uniform(0.5, 2.0),
            lambda_prime=rng.uniform(0.01, 10.0),
        )
        closed = closed_form_budget(prob)
        grid = brute_force_budget(prob, step=step)
        worst_j = max(worst_j, objective(prob, closed.R) - objective(prob, grid.R))
        worst_r = max(worst_r, float(np.max(np.abs(np.subtract(closed.R, grid.R)))))
    elapsed = time.perf_counter() - start
    ok = worst_j <= 1e-9 and worst_r <= step and elapsed < 30.0
    record(1, "allocation optimality", ok,
           f"max J_closed - J_grid = {worst_j:.2e}, max |R - R_grid| = {worst_r:.2e}, {elapsed:.1f}s")
    assert ok


def _cauchy_data(alpha, beta, rates, weights):
    return [(w, r, w * alpha * r ** (-beta)) for w in weights for r in rates]


def test_criterion_2_model_fit_recovery():
    rates = np.geomspace(0.2, 6.0, 8)
    clean = fit_cauchy(_cauchy_data(2.7, 1.15, rates, SENS))
    exact = abs(clean.alpha / 2.7 - 1) <= 1e-6 and abs(clean.beta / 1.15 - 1) <= 1e-6
    ccs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        noisy = [(w, r, d * (1 + 0.01 * rng.standard_normal())) for w, r, d in _cauchy_data(2.7, 1.15, rates, SENS)]
        model = fit_cauchy(noisy)
        obs = [d for _, _, d in noisy]
        ccs.append(goodness(obs, model.predict([w for w, _, _ in noisy], [r for _, r, _ in noisy])).cc)
    ok = exact and min(ccs) >= 0.999
    record(2, "model-fit recovery", ok,
           f"alpha={clean.alpha:.9g} beta={clean.beta:.9g}; min CC under 1% noise = {min(ccs):.6f} over {len(ccs)} seeds")
    assert ok


def test_criterion_3_rate_phi_calibration(backend):
    levels = default_phi_levels(6)
    worst, ccs = 0.0, []
    for seed in range(4):
        grid = precode_grid(synth_pyramid(200 + seed, SMALL), backend, levels)
        samples = grid.rate_phi_samples()
        model = fit_rate_phi(samples)
        for i, rows in enumerate(samples):
            phi, R = np.asarray(rows).T
            X = np.column_stack([phi, np.ones_like(phi)])
            coef = np.linalg.solve(X.T @ X, X.T @ R)
            mine = R - (model.a[i] * phi + model.b[i])
            oracle = R - X @ coef
            worst = max(worst, float(np.max(np.abs(mine - oracle))))
            ccs.append(goodness(R, model.a[i] * phi + model.b[i]).cc)
    ok = worst <= 1e-9 and min(ccs) >= 0.97
    record(3, "rate-phi calibration", ok,
           f"max residual gap vs normal equations = {worst:.1e}; per-scale CC in [{min(ccs):.4f}, {max(ccs):.4f}]")
    assert ok


def test_criterion_4_mfip_recovery(backend, detector):
    levels = default_phi_levels(8)
    exact = 0
    for seed in range(20):
        p = synth_pyramid(300 + seed, SMALL)
        w = predict_weights(normalize_and_average(loss_matrix(p, precode_grid(p, backend, levels), detector))).w
        tau = kendalltau(w, SENS).statistic
        exact += tau == pytest.approx(1.0)

    finetune_ok, passes = True, []
    ctx_levels = default_phi_levels(6)
    for seed in range(3):
        p = synth_pyramid(400 + seed, TINY)
        grid = precode_grid(p, backend, ctx_levels)
        w_hat = predict_weights(normalize_and_average(loss_matrix(p, grid, detector)))
        ctx = AllocationContext(LossRateModel(50.0, 6.0), fit_rate_phi(grid.rate_phi_samples()))
        res = finetune_weights(w_hat, p, backend, detector, (0.5, 2.0), ctx, max_passes=50)
        start = EfficiencyMetric(p, backend, detector, ctx, (0.5, 2.0))(w_hat.w)
        finetune_ok &= res.score <= start and res.passes <= 50
        passes.append(res.passes)
    ok = exact >= 19 and finetune_ok
    record(4, "MFIP recovery", ok,
           f"Kendall tau = 1 in {exact}/20 seeds; finetune never worse: {finetune_ok}, passes {passes}")
    assert ok


def test_criterion_5_end_to_end_gain(backend, detector, calibrated):
    targets = (3.0, 4.0, 5.0)
    wins, matched = 0, True
    for seed in range(50):
        p = synth_pyramid(seed, SMALL)
        m, u = compare_at_matched_bits(p, detector, backend, calibrated, target_bits=targets[seed % 3] * p.S0)
        matched &= abs(u.total_bits - m.total_bits) <= 0.02 * m.total_bits
        wins += m.point.accuracy > u.point.accuracy

    curve_bpp = (2.5, 3.0, 3.5, 4.0, 5.0, 6.0)
    mp, up, per_seed = [], [], []
    for seed in range(8):
        p = synth_pyramid(seed, SMALL)
        pairs = [compare_at_matched_bits(p, detector, backend, calibrated, target_bits=b * p.S0) for b in curve_bpp]
        mp.append([m.point for m, _ in pairs])
        up.append([u.point for _, u in pairs])
        per_seed.append(bd_rate(RdCurve.from_points(mp[-1]), RdCurve.from_points(up[-1])))

    def mean_curve(runs):
        return RdCurve.from_points(
            [(np.mean([r[j].bpp for r in runs]), np.mean([r[j].accuracy for r in runs])) for j in range(len(curve_bpp))]
        )

    bd = bd_rate(mean_curve(mp), mean_curve(up))
    ok = matched and wins >= 45 and bd < 0
    record(5, "end-to-end allocation gain", ok,
           f"MFIBA wins {wins}/50 at matched bits (within 2%: {matched}); BD-rate vs uniform = {bd:.2f}% "
           f"(per-seed range {min(per_seed):.2f}% to {max(per_seed):.2f}%)")
    assert ok


def _smooth(scale, k, bpp=(0.5, 1.0, 2.0, 3.0, 4.5, 6.0)):
    bpp = np.asarray(bpp)
    return RdCurve.from_points(zip(bpp * scale, 1 - np.exp(-k * bpp)))


def _log_rate_oracle(test, anchor):
    """Average log-rate gap of the two cubic fits, integrated numerically."""
    ct = np.polyfit(test.accuracy, np.log(test.bpp), 3)
    ca = np.polyfit(anchor.accuracy, np.log(anchor.bpp), 3)
    lo = max(test.accuracy.min(), anchor.accuracy.min())
    hi = min(test.accuracy.max(), anchor.accuracy.max())
    gap, _ = quad(lambda a: np.polyval(ct, a) - np.polyval(ca, a), lo, hi, epsabs=1e-13)
    return gap / (hi - lo)


def test_criterion_6_bdrate_correctness():
    base = _smooth(1.0, 0.6)
    zero = bd_rate(base, base)
    shift = bd_rate(_smooth(1.1, 0.6), base)
    rng = np.random.default_rng(6)
    worst_anti, worst_log, worst_oracle = 0.0, 0.0, 0.0
    for _ in range(20):
        # In percent, bd(a,b) + bd(b,a) grows like the squared log-rate gap,
        # so pairs stay within a few percent of each other.
        a = _smooth(rng.uniform(0.98, 1.02), rng.uniform(0.59, 0.61))
        b = _smooth(rng.uniform(0.98, 1.02), rng.uniform(0.59, 0.61))
        ab, ba = bd_rate(a, b), bd_rate(b, a)
        worst_anti = max(worst_anti, abs(ab + ba))
        worst_log = max(worst_log, abs(math.log1p(ab / 100) + math.log1p(ba / 100)))
        worst_oracle = max(worst_oracle, abs(ab - 100 * math.expm1(_log_rate_oracle(a, b))))
    ok = zero == 0.0 and abs(shift - 10.0) <= 0.2 and worst_anti <= 0.5 and worst_log <= 1e-12 and worst_oracle <= 1e-6
    record(6, "BD-rate correctness", ok,
           f"identical = {zero:.3f}%, 1.1x shift = {shift:.4f}%, max |bd(a,b)+bd(b,a)| = {worst_anti:.3f}% "
           f"(log domain {worst_log:.1e}), "
           f"max gap to quadrature oracle = {worst_oracle:.1e}%")
    assert ok


def test_criterion_7_codec_integrity():
    rng = np.random.default_rng(7)
    exact, monotone = True, True
    for t in range(100):
        shape = (int(rng.integers(1, 5)), int(rng.integers(2, 17)), int(rng.integers(2, 17)))
        x = FeatureScale(t % 5, (rng.standard_normal(shape) * rng.uniform(0.2, 3.0)).astype(np.float32))
        offset = rng.uniform(0.0, 1.0)
        phis = np.sort(rng.choice(np.arange(0, 11), size=5, replace=False)) + offset
        bits, mses = [], []
        for phi in phis:
            stream = encode_scale(x, float(phi))
            back = decode_scale(ScaleBitstream.from_bytes(stream.to_bytes(), x.shape))
            step = step_for_phi(float(phi))
            expected = dequantize(quantize(x.data, step), step)
            exact &= back.data.tobytes() == expected.tobytes()
            bits.append(stream.bits)
            mses.append(float(np.mean((back.data.astype(np.float64) - x.data) ** 2)))
        monotone &= all(np.diff(bits) >= 0) and all(np.diff(mses) <= 0)
    ok = exact and monotone
    record(7, "codec integrity", ok, f"500 encodes over 100 scales: symbol-exact {exact}, rate/MSE monotone {monotone}")
    assert ok


def test_criterion_8_timing_decomposition(tiny_pyramid, backend, detector, calibrated):
    settings = PipelineSettings(phi_levels=default_phi_levels(4), max_passes=3)
    results = []
    for mode in ("mfiba", "mfiba_finetuned", "uniform"):
        r = run_pipeline(tiny_pyramid, detector, backend, mode, lambda_prime=0.5, model=calibrated, settings=settings)
        results.append((mode, r))
    identity = True
    for _, r in results:
        t = r.timing
        rhs = t.m * (t.t_enc + t.t_dec) + t.m * (t.n + 2) * t.t_task
        identity &= math.isclose(t.t_pre, rhs, rel_tol=1e-12, abs_tol=1e-12)
    rows = list(csv.DictReader(io.StringIO(write_report_csv(results))))
    fields = ("t_pre", "t_assign", "t_enc", "t_dec", "t_task")
    present = len(rows) == 3 and all(set(fields) <= set(REPORT_COLUMNS) and all(row[f] != "" for f in fields) for row in rows)
    ok = identity and present
    record(8, "timing decomposition", ok, f"identity holds: {identity}; five timing fields in all {len(rows)} rows: {present}")
    assert ok

import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from mfiba.bdrate import COND_LIMIT, NoOverlapError, RdCurve, RdPoint, bd_rate


def curve(bpp, acc, label=""):
    return RdCurve(tuple(RdPoint(float(b), float(a)) for b, a in zip(bpp, acc)), label)


def saturating(scale=1.0, k=0.6, bpp=(0.5, 1, 2, 3, 4.5, 6)):
    bpp = np.asarray(bpp) * scale
    return curve(bpp, 1 - np.exp(-k * np.asarray(bpp) / scale))


def quad_oracle(test, anchor):
    """Plain cubic fits in raw accuracy, integrated numerically."""
    ct = np.polyfit(test.accuracy, np.log(test.bpp), 3)
    ca = np.polyfit(anchor.accuracy, np.log(anchor.bpp), 3)
    lo = max(test.accuracy.min(), anchor.accuracy.min())
    hi = min(test.accuracy.max(), anchor.accuracy.max())
    diff, _ = quad(lambda a: np.polyval(ct, a) - np.polyval(ca, a), lo, hi, epsabs=1e-13)
    return math.expm1(diff / (hi - lo)) * 100


def test_identical_is_exactly_zero():
    c = saturating()
    assert bd_rate(c, c) == 0.0


def test_constant_rate_shift():
    a = saturating()
    assert bd_rate(saturating(1.1), a) == pytest.approx(10.0, abs=1e-9)
    assert bd_rate(a, saturating(1.1)) == pytest.approx(100 * (1 / 1.1 - 1), abs=1e-9)


def test_matches_numeric_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = saturating(1.0, rng.uniform(0.4, 0.8))
        b = saturating(rng.uniform(0.9, 1.1), rng.uniform(0.4, 0.8))
        assert bd_rate(b, a) == pytest.approx(quad_oracle(b, a), abs=1e-6)


def test_curve_invariants():
    with pytest.raises(ValueError):
        curve([1, 1, 2], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        curve([0, 1], [0.1, 0.2])
    with pytest.raises(ValueError):
        curve([1, 2], [0.1, np.nan])


def test_from_points_sorts_and_dedupes():
    with pytest.warns(RuntimeWarning, match="duplicate"):
        c = RdCurve.from_points([(2.0, 0.5), (1.0, 0.3), (2.0, 0.5)])
    assert c.bpp.tolist() == [1.0, 2.0]


def test_errors():
    a = saturating()
    with pytest.raises(ValueError, match="at least 4"):
        bd_rate(curve([1, 2, 3], [0.1, 0.2, 0.3]), a)
    far = curve([1, 2, 3, 4], [2.0, 2.1, 2.2, 2.3])
    with pytest.raises(NoOverlapError):
        bd_rate(far, a)


def test_ill_conditioned_fit_falls_back_to_pchip():
    # Accuracies clustered in a tiny band make the normalized Vandermonde
    # matrix singular-ish only when points nearly coincide.
    acc = np.array([0.5, 0.5 + 1e-7, 0.5 + 2e-7, 0.9])
    V = np.vander((acc - 0.7) / 0.2, 4)
    assert np.linalg.cond(V) > COND_LIMIT
    a = curve([1, 2, 3, 4], acc)
    b = curve([1.1, 2.2, 3.3, 4.4], acc)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert bd_rate(b, a) == pytest.approx(10.0, abs=1e-9)

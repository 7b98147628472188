import numpy as np
import pytest

from mfiba.codec import RateReport, ReferenceBackend
from mfiba.pyramid import FeaturePyramid, PyramidSpec, synth_pyramid
from mfiba.task import SyntheticDetector

import _acceptance

SMALL = PyramidSpec(n=3, channels=8, height=32, width=32)
TINY = PyramidSpec(n=3, channels=2, height=8, width=8)
SENS = (0.4, 0.3, 0.2, 0.07, 0.03)


class TableBackend:
    """Codec stub with exact rates ``R_i = a_i * phi + b_i`` and no framing.

    Reconstructions fill every scale with its phi value, so a matching
    evaluator can read back the quality level of each scale.
    """

    def __init__(self, a=1.0, b=1.0):
        self.a = a
        self.b = b

    def _coef(self, v, i):
        return v[i] if np.ndim(v) else v

    def measure_rate(self, p: FeaturePyramid, phis) -> RateReport:
        counts = [int(s) for s in p.element_counts]
        bits = [int(round((self._coef(self.a, i) * phi + self._coef(self.b, i)) * s)) for i, (phi, s) in enumerate(zip(phis, counts))]
        return RateReport(tuple(bits), tuple(counts))

    def reconstruct(self, p: FeaturePyramid, phis) -> FeaturePyramid:
        return p.with_scales([np.full(sc.shape, phi, dtype=np.float32) for sc, phi in zip(p.scales, phis)])


class PowerLawEvaluator:
    """Loss ``sum_i s_i * alpha * R_i**-beta`` over scales that differ from the reference."""

    def __init__(self, s, alpha, beta, backend: TableBackend):
        self.s = np.asarray(s, dtype=np.float64)
        self.alpha = alpha
        self.beta = beta
        self.backend = backend

    def task_loss(self, ref, deg):
        loss = 0.0
        for i, (a, b) in enumerate(zip(ref.scales, deg.scales)):
            if a == b:
                continue
            phi = float(b.data.flat[0])
            R = self.backend._coef(self.backend.a, i) * phi + self.backend._coef(self.backend.b, i)
            loss += self.s[i] * self.alpha * R ** (-self.beta)
        return loss

    def evaluate(self, deg, ref):
        return 1.0 - self.task_loss(ref, deg)


@pytest.fixture(scope="session")
def backend():
    return ReferenceBackend()


@pytest.fixture(scope="session")
def detector():
    return SyntheticDetector(SENS)


@pytest.fixture(scope="session")
def small_pyramid():
    return synth_pyramid(7, SMALL)


@pytest.fixture(scope="session")
def tiny_pyramid():
    return synth_pyramid(3, TINY)


@pytest.fixture(scope="session")
def calibrated(backend, detector):
    from mfiba.calibration import calibrate

    model, _ = calibrate([synth_pyramid(s, SMALL) for s in range(1000, 1004)], backend, detector, np.linspace(1, 11, 8))
    return model


def pytest_terminal_summary(terminalreporter):
    if _acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance.RESULTS:
            terminalreporter.write_line(line)

"""Importance-weighted bit allocation for multiscale feature pyramids.

Submodules:

- ``pyramid``: feature pyramid type, FPYR container, synthetic pyramids
- ``codec`` / ``rangecoder``: dead-zone quantizer and range coder behind a backend interface
- ``task``: task evaluators, including the synthetic detector
- ``mfip``: per-scale importance prediction and weight finetuning
- ``rdmodel``: loss-rate and rate-phi model fitting
- ``allocator``: closed-form Lagrangian bit allocation
- ``calibration``, ``evaluation``, ``bdrate``: offline fitting, pipelines and reports
- ``cli``: the ``mfiba`` command
"""

from mfiba.allocator import AllocationProblem, RateBudget, budget_to_phi, closed_form_budget, solve_for_target
from mfiba.bdrate import RdCurve, RdPoint, bd_rate
from mfiba.calibration import calibrate
from mfiba.codec import CodecConfig, ReferenceBackend, decode_pyramid, encode_pyramid
from mfiba.evaluation import PipelineSettings, run_pipeline
from mfiba.mfip import finetune_weights, predict_weights
from mfiba.pyramid import FeaturePyramid, FeatureScale, PyramidSpec, synth_pyramid
from mfiba.rdmodel import ModelFile, fit_cauchy, fit_rate_phi
from mfiba.task import SyntheticDetector

__version__ = "0.1.0"

__all__ = [
    "AllocationProblem",
    "RateBudget",
    "budget_to_phi",
    "closed_form_budget",
    "solve_for_target",
    "RdCurve",
    "RdPoint",
    "bd_rate",
    "calibrate",
    "CodecConfig",
    "ReferenceBackend",
    "decode_pyramid",
    "encode_pyramid",
    "PipelineSettings",
    "run_pipeline",
    "finetune_weights",
    "predict_weights",
    "FeaturePyramid",
    "FeatureScale",
    "PyramidSpec",
    "synth_pyramid",
    "ModelFile",
    "fit_cauchy",
    "fit_rate_phi",
    "SyntheticDetector",
]

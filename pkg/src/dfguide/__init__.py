"""Guided discrete flow matching on small enumerable state spaces."""

from .statespace import DensityRatio, FactorizedPosterior, Pmf, SampleBatch, StateSpace
from .paths import ConditionalPath, make_path
from .ctmc import SamplerConfig, run_chains, sample_unguided
from .posterior import ExactPosterior, exact_posterior, fit_posterior
from .guidance import ExactGuidance, GuidanceScheme, call_count, sample_guided
from .training import fit_guidance, fit_ratio

__version__ = "0.1.0"

__all__ = [
    "ConditionalPath",
    "DensityRatio",
    "ExactGuidance",
    "ExactPosterior",
    "FactorizedPosterior",
    "GuidanceScheme",
    "Pmf",
    "SampleBatch",
    "SamplerConfig",
    "StateSpace",
    "call_count",
    "exact_posterior",
    "fit_guidance",
    "fit_posterior",
    "fit_ratio",
    "make_path",
    "run_chains",
    "sample_guided",
    "sample_unguided",
]

"""Hierarchical VAE diversity denoising with pluggable pixel noise models."""

from .config import ConfigError, HdnConfig, TrainConfig
from .estimator import HDNDenoiser
from .inference import (SampleSet, diversity_map, generate, map_estimate, median_estimate,
                        mmse_estimate, sample_denoised)
from .model import LadderVAE, LayerMode, build_model
from .noise_models import (GaussianNoiseModel, GmmNoiseModel, HistogramNoiseModel, fit_gmm,
                           fit_histogram)
from .structured import LayerModeSpec, autocorrelation, denoise_deactivated, visualize_layer

__all__ = [
    "ConfigError", "HdnConfig", "TrainConfig", "HDNDenoiser", "SampleSet", "diversity_map",
    "generate", "map_estimate", "median_estimate", "mmse_estimate", "sample_denoised",
    "LadderVAE", "LayerMode", "build_model", "GaussianNoiseModel", "GmmNoiseModel",
    "HistogramNoiseModel", "fit_gmm", "fit_histogram", "LayerModeSpec", "autocorrelation",
    "denoise_deactivated", "visualize_layer",
]

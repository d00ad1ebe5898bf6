"""Scikit-learn style wrapper around training and sampling."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_pairs
from .checkpoint import load_checkpoint
from .config import HdnConfig, TrainConfig
from .inference import (diversity_map, generate, map_estimate, median_estimate, mmse_estimate,
                        sample_denoised)
from .metrics import evaluate_pairs
from .model import build_model
from .noise_models import GmmNoiseModel, NoiseModel
from .structured import LayerModeSpec
from .training import train

_REDUCERS = {"mmse": mmse_estimate, "median": median_estimate, "map": map_estimate}


class HDNDenoiser(TransformerMixin, BaseEstimator):
    """Unsupervised diversity denoiser.

    ``fit`` trains on a stack of noisy images. A fitted ``noise_model`` is
    required unless clean targets ``y`` are passed, in which case a GMM noise
    model is calibrated on the pairs first. ``transform`` returns one point
    estimate per image, reduced from ``n_samples`` posterior samples.
    """

    def __init__(self, n_layers: int = 6, latent_channels: int = 32, initial_filters: int = 64,
                 blocks_per_layer: int = 5, dropout_p: float = 0.2, free_bits: float = 1.0,
                 noise_model: NoiseModel | None = None, steps: int = 200_000,
                 batch_size: int = 64, patch_size: int = 64, learning_rate: float = 3e-4,
                 n_samples: int = 100, estimator: str = "mmse", active_layers: str | None = None,
                 prior_mean: bool = False, tile_size: int | None = None, seed: int = 0,
                 work_dir: str | None = None):
        self.n_layers = n_layers
        self.latent_channels = latent_channels
        self.initial_filters = initial_filters
        self.blocks_per_layer = blocks_per_layer
        self.dropout_p = dropout_p
        self.free_bits = free_bits
        self.noise_model = noise_model
        self.steps = steps
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.learning_rate = learning_rate
        self.n_samples = n_samples
        self.estimator = estimator
        self.active_layers = active_layers
        self.prior_mean = prior_mean
        self.tile_size = tile_size
        self.seed = seed
        self.work_dir = work_dir

    def _configs(self):
        cfg = HdnConfig(n_layers=self.n_layers, latent_channels=self.latent_channels,
                        initial_filters=self.initial_filters,
                        blocks_per_layer=self.blocks_per_layer, dropout_p=self.dropout_p,
                        free_bits=self.free_bits,
                        input_patch_size=(self.patch_size, self.patch_size))
        tc = TrainConfig(learning_rate=self.learning_rate, total_steps=self.steps,
                         batch_size=self.batch_size, patch_size=self.patch_size, seed=self.seed,
                         checkpoint_every=max(self.steps, 1), validate_every=max(self.steps, 1))
        return cfg, tc

    def fit(self, X, y=None, X_val=None):
        if self.estimator not in _REDUCERS:
            raise ValueError(f"estimator must be one of {sorted(_REDUCERS)}")
        if y is not None:
            noisy, clean = check_pairs(X, y)
        else:
            noisy = check_images(X, "X")
        if self.noise_model is not None:
            noise_model = self.noise_model
        elif y is not None:
            noise_model = GmmNoiseModel(seed=self.seed).fit(noisy, clean)
        else:
            raise ValueError("pass a fitted noise_model or clean targets y to calibrate one")
        cfg, tc = self._configs()
        model = build_model(cfg, seed=self.seed)
        out_dir = Path(self.work_dir) if self.work_dir else Path(tempfile.mkdtemp(prefix="hdn-"))
        result = train(model, noisy, X_val, noise_model, tc, out_dir)
        self.model_ = model.eval()
        self.noise_model_ = noise_model
        self.history_ = result.history
        self.checkpoint_ = result.checkpoint_path
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> "HDNDenoiser":
        """Wrap a trained checkpoint without refitting."""
        ckpt = load_checkpoint(path)
        c = ckpt.model.config
        est = cls(n_layers=c.n_layers, latent_channels=c.latent_channels,
                  initial_filters=c.initial_filters, blocks_per_layer=c.blocks_per_layer,
                  dropout_p=c.dropout_p, free_bits=c.free_bits, **params)
        est.model_ = ckpt.model.eval()
        est.noise_model_ = ckpt.noise_model
        est.history_ = ckpt.train_state.get("history", [])
        est.checkpoint_ = Path(path)
        return est

    def _modes(self):
        if self.active_layers is None:
            return None
        return LayerModeSpec.parse(self.active_layers, self.model_.n_layers, self.prior_mean).modes

    def sample(self, X, k: int | None = None) -> list:
        """One ``SampleSet`` per image."""
        check_is_fitted(self, "model_")
        images = check_images(X, "X")
        k = self.n_samples if k is None else k
        modes = self._modes()
        return [sample_denoised(self.model_, im, k=k, seed=self.seed + i, layer_modes=modes,
                                tile_size=self.tile_size) for i, im in enumerate(images)]

    def transform(self, X) -> np.ndarray:
        reducer = _REDUCERS[self.estimator]
        return np.stack([reducer(s) for s in self.sample(X)])

    def predict(self, X) -> np.ndarray:
        return self.transform(X)

    def diversity(self, X) -> np.ndarray:
        return np.stack([diversity_map(s) for s in self.sample(X)])

    def generate(self, size, count: int = 1) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.stack(generate(self.model_, size, count, seed=self.seed))

    def score(self, X, y) -> float:
        """Mean PSNR of the point estimates against clean images ``y``."""
        preds = self.transform(X)
        return evaluate_pairs(list(check_images(y, "y")), list(preds)).summary["psnr_mean"]

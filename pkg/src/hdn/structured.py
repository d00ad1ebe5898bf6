"""Structured-noise tools: layer deactivation, per-layer visualisation and
residual autocorrelation."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch

from ._validation import check_image
from .inference import SampleSet, sample_denoised, sample_seeds
from .model import LadderVAE, LayerMode


@dataclass(frozen=True)
class LayerModeSpec:
    """Layers ``first..n`` read the encoder; layers below ``first`` use the prior."""

    first: int
    n_layers: int
    prior_mean: bool = False

    @classmethod
    def parse(cls, text: str, n_layers: int, prior_mean: bool = False) -> "LayerModeSpec":
        m = re.fullmatch(r"\s*(\d+)\s*-\s*(\d+|n)\s*", str(text))
        if not m:
            raise ValueError(f"active-layer spec must look like 'k-n', got {text!r}")
        first = int(m.group(1))
        last = n_layers if m.group(2) == "n" else int(m.group(2))
        if last != n_layers:
            raise ValueError(f"spec {text!r} must end at the top layer {n_layers}")
        if not 1 <= first <= n_layers:
            raise ValueError(f"first active layer must lie in 1..{n_layers}, got {first}")
        return cls(first, n_layers, prior_mean)

    @property
    def modes(self) -> list[LayerMode]:
        off = LayerMode.PRIOR_MEAN if self.prior_mean else LayerMode.PRIOR_SAMPLE
        return [off if i + 1 < self.first else LayerMode.POSTERIOR for i in range(self.n_layers)]

    def __str__(self) -> str:
        return f"{self.first}-{self.n_layers}"


def denoise_deactivated(model: LadderVAE, x, spec, k: int = 100, seed: int = 0,
                        prior_mean: bool = False, tile_size: int | None = None) -> SampleSet:
    """Sample with the encoder input ignored below the spec's first layer."""
    if isinstance(spec, str):
        spec = LayerModeSpec.parse(spec, model.n_layers, prior_mean)
    modes = spec.modes
    if LayerMode.POSTERIOR not in modes:
        raise ValueError("no layer reads the input; use generate() for unconditional samples")
    return sample_denoised(model, x, k=k, seed=seed, layer_modes=modes, tile_size=tile_size)


@torch.no_grad()
def visualize_layer(model: LadderVAE, layer_i: int, n_variants: int = 6, seed: int = 0,
                    dims=None, layer_noise=None, return_grid: bool = True):
    """Vary one latent layer of an unconditional sample.

    One shared draw for layers above ``layer_i``, ``n_variants`` draws at
    ``layer_i``, conditional prior means below it.  Returns a horizontal grid
    (H, n_variants * W), or the list of images with ``return_grid=False``.
    """
    n = model.n_layers
    if not 1 <= layer_i <= n:
        raise ValueError(f"layer_i must lie in 1..{n}, got {layer_i}")
    dims = tuple(dims or model.config.input_patch_size)
    model.check_input(dims)
    model.eval()
    shared = model.draw_noise(1, dims, seed)
    noise = [t.expand(n_variants, *t.shape[1:]).clone() for t in shared]
    if layer_noise is None:
        variant_noise = [model.draw_noise(1, dims, s)[layer_i - 1] for s in sample_seeds(seed, n_variants)]
        layer_noise = torch.cat(variant_noise, dim=0)
    noise[layer_i - 1] = torch.as_tensor(layer_noise, dtype=noise[0].dtype)
    modes = [LayerMode.PRIOR_MEAN if i + 1 < layer_i else LayerMode.PRIOR_SAMPLE for i in range(n)]
    out = model.top_down(None, modes, noise=noise)
    images = [im[0].cpu().numpy().astype(np.float64) for im in out.signal]
    return np.concatenate(images, axis=1) if return_grid else images


def _corr_fft(a, b, shape):
    fa = np.fft.rfft2(a, shape)
    fb = np.fft.rfft2(b, shape)
    return np.fft.irfft2(np.conj(fa) * fb, shape)


def autocorrelation(residual, max_lag: int, mask=None) -> np.ndarray:
    """Normalised spatial autocorrelation over lags in [-max_lag, max_lag]^2.

    Entry ``[max_lag + dy, max_lag + dx]`` is the correlation between pixels
    ``(y, x)`` and ``(y + dy, x + dx)``, averaged over the overlapping (and,
    with ``mask``, valid) pixel pairs.  Lag (0, 0) is exactly 1.
    """
    r = check_image(residual, "residual")
    h, w = r.shape
    if max_lag < 0 or 2 * max_lag >= min(h, w):
        raise ValueError(f"max_lag must be < half of the image dims {r.shape}")
    m = np.ones_like(r) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != r.shape:
        raise ValueError("mask must match the residual's shape")
    vals = r[m > 0]
    if vals.size < 2 or np.allclose(vals, vals[0]):
        raise ValueError("residual has zero variance; autocorrelation undefined")
    r = (r - vals.mean()) * m
    shape = (2 * h, 2 * w)
    raw = _corr_fft(r, r, shape)
    counts = _corr_fft(m, m, shape)
    lags = np.r_[-max_lag:max_lag + 1]
    raw = raw[np.ix_(lags % shape[0], lags % shape[1])]
    counts = np.round(counts[np.ix_(lags % shape[0], lags % shape[1])])
    cov = np.where(counts > 0, raw / np.maximum(counts, 1), 0.0)
    cov = 0.5 * (cov + cov[::-1, ::-1])
    return cov / cov[max_lag, max_lag]


def background_mask(image, quantile: float = 0.1) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image <= np.quantile(image, quantile)


def noise_residual(raw, gt=None, background_quantile: float = 0.1):
    """Residual used for noise characterisation: raw - gt, or the background
    pixels of ``raw`` when no ground truth exists.  Returns (residual, mask)."""
    raw = check_image(raw, "raw")
    if gt is not None:
        return raw - check_image(gt, "gt"), None
    return raw, background_mask(raw, background_quantile)


def stripe_correlation(residual, lag: int = 8, axis: int = 1) -> float:
    """Autocorrelation at ``lag`` along ``axis`` (1 = horizontal, along rows)."""
    c = autocorrelation(residual, lag)
    return float(c[lag, 2 * lag] if axis == 1 else c[2 * lag, lag])


def high_frequency_fraction(variants, cutoff: float = 0.125) -> float:
    """Share of across-variant spectral energy above ``cutoff`` cycles/pixel (radial)."""
    v = np.asarray(variants, dtype=np.float64)
    dev = v - v.mean(axis=0, keepdims=True)
    power = (np.abs(np.fft.fft2(dev)) ** 2).sum(axis=0)
    fy = np.fft.fftfreq(v.shape[1])[:, None]
    fx = np.fft.fftfreq(v.shape[2])[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2)
    total = power.sum()
    if total == 0:
        return 0.0
    return float(power[radius > cutoff].sum() / total)

"""ELBO objectives: the hierarchical loss with free bits and the baseline variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .model import DecoderOutput, LayerMode
from .model import kl_diag_gaussians as _kl_elementwise
from .noise_models import NoiseModel


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class LossBreakdown:
    """Per-pixel nats; ``total`` is the differentiable objective."""

    reconstruction: torch.Tensor
    kl_per_layer: list[torch.Tensor]
    kl_clamped_per_layer: list[torch.Tensor]
    total: torch.Tensor
    n_pixels: int = 0
    extras: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {
            "reconstruction": _scalar(self.reconstruction),
            "kl": [_scalar(k) for k in self.kl_per_layer],
            "kl_clamped": [_scalar(k) for k in self.kl_clamped_per_layer],
            "total": _scalar(self.total),
        }


def kl_diag_gaussians(q_mu, q_sigma, p_mu, p_sigma, per_layer: bool = True):
    """Closed-form KL between diagonal Gaussians.

    With ``per_layer`` the elementwise values are summed over all but the batch axis.
    """
    q_sigma = torch.as_tensor(q_sigma)
    p_sigma = torch.as_tensor(p_sigma)
    if (q_sigma <= 0).any() or (p_sigma <= 0).any():
        raise ValueError("standard deviations must be strictly positive")
    kl = _kl_elementwise(torch.as_tensor(q_mu), q_sigma, torch.as_tensor(p_mu), p_sigma)
    if per_layer and kl.dim() > 1:
        return kl.flatten(1).sum(1)
    return kl


def free_bits_clamp(kl_layer, threshold: float):
    """max(kl, threshold); below the threshold the result carries no gradient."""
    if threshold < 0:
        raise ValueError("free-bits threshold must be non-negative")
    kl_layer = torch.as_tensor(kl_layer)
    return torch.clamp(kl_layer, min=threshold)


def _kl_terms(decoder_output: DecoderOutput, n_pixels: int, free_bits: float):
    kl_raw, kl_clamped = [], []
    for i, layer in enumerate(decoder_output.latents):
        if layer.mode != LayerMode.POSTERIOR:
            raise ValueError(f"layer {i + 1} is in {layer.mode.value} mode; losses need a full posterior pass")
        # free bits act on the batch-mean KL of the whole latent group (nats per image)
        kl_image = layer.kl.mean()
        kl_raw.append(kl_image / n_pixels)
        kl_clamped.append(free_bits_clamp(kl_image, free_bits) / n_pixels)
    return kl_raw, kl_clamped


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _finish(reconstruction, kl_raw, kl_clamped, n_pixels) -> LossBreakdown:
    total = reconstruction
    for k in kl_clamped:
        total = total + k
    if not torch.isfinite(total):
        raise NonFiniteLossError("non-finite loss", {
            "reconstruction": _scalar(reconstruction),
            "kl_per_layer": [_scalar(k) for k in kl_raw],
        })
    return LossBreakdown(reconstruction, kl_raw, kl_clamped, total, n_pixels)


def hdn_loss(x, decoder_output: DecoderOutput, noise_model: NoiseModel,
             free_bits: float = 1.0) -> LossBreakdown:
    """Negative ELBO with a pixel noise model, averaged per input pixel.

    ``x`` and the decoder signal are in raw intensity units.
    """
    s = decoder_output.signal
    x = torch.as_tensor(x, dtype=s.dtype)
    if x.shape != s.shape:
        raise ValueError(f"x shape {tuple(x.shape)} != signal shape {tuple(s.shape)}")
    n_pixels = x.shape[-1] * x.shape[-2]
    reconstruction = -noise_model.log_likelihood(x, s).mean()
    kl_raw, kl_clamped = _kl_terms(decoder_output, n_pixels, free_bits)
    return _finish(reconstruction, kl_raw, kl_clamped, n_pixels)


def vae_loss(x, decoder_output: DecoderOutput, predicted_obs_sigma,
             free_bits: float = 0.0) -> LossBreakdown:
    """Vanilla VAE objective: Normal observation model around the decoder output."""
    s = decoder_output.signal
    x = torch.as_tensor(x, dtype=s.dtype)
    sigma = torch.as_tensor(predicted_obs_sigma, dtype=s.dtype)
    if (sigma <= 0).any():
        raise ValueError("predicted_obs_sigma must be positive")
    n_pixels = x.shape[-1] * x.shape[-2]
    ll = -0.5 * ((x - s) / sigma) ** 2 - torch.log(sigma) - 0.5 * math.log(2 * math.pi)
    reconstruction = -ll.mean()
    kl_raw, kl_clamped = _kl_terms(decoder_output, n_pixels, free_bits)
    return _finish(reconstruction, kl_raw, kl_clamped, n_pixels)


def dn_loss(x, decoder_output: DecoderOutput, noise_model: NoiseModel) -> LossBreakdown:
    """Single-latent denoising objective (noise-model likelihood plus one KL, no free bits)."""
    if len(decoder_output.latents) != 1:
        raise ValueError("dn_loss expects a single latent group")
    return hdn_loss(x, decoder_output, noise_model, free_bits=0.0)

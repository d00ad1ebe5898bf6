"""Ladder VAE with a deterministic bottom-up path and a stochastic top-down path."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .config import HdnConfig, check_dims

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 7.0
_LOG_2PI = math.log(2 * math.pi)


class LayerMode(str, enum.Enum):
    POSTERIOR = "posterior"
    PRIOR_SAMPLE = "prior_sample"
    PRIOR_MEAN = "prior_mean"


@dataclass
class LatentLayer:
    prior_mu: torch.Tensor
    prior_sigma: torch.Tensor
    z: torch.Tensor
    mode: LayerMode
    post_mu: torch.Tensor | None = None
    post_sigma: torch.Tensor | None = None
    kl: torch.Tensor | None = None  # (batch,) nats summed over the latent group
    log_prior: torch.Tensor | None = None  # (batch,) log p(z_i | z_{j>i})


# LatentStack[i - 1] holds latent group i; group 1 is full resolution.
LatentStack = list


@dataclass
class DecoderOutput:
    signal: torch.Tensor  # (batch, 1, H, W) in raw intensity units
    latents: LatentStack


def gaussian_log_density(z, mu, sigma):
    return -0.5 * (((z - mu) / sigma) ** 2 + _LOG_2PI) - torch.log(sigma)


def split_params(h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mu, log_sigma = h.chunk(2, dim=1)
    return mu, torch.exp(log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))


class GatedResBlock(nn.Module):
    def __init__(self, channels: int, batch_norm: bool, dropout: float):
        super().__init__()
        layers: list[nn.Module] = []
        if batch_norm:
            layers.append(nn.BatchNorm2d(channels))
        layers += [nn.ELU(), nn.Conv2d(channels, channels, 3, padding=1)]
        if batch_norm:
            layers.append(nn.BatchNorm2d(channels))
        layers += [nn.ELU(), nn.Conv2d(channels, 2 * channels, 3, padding=1)]
        self.body = nn.Sequential(*layers)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        a, b = self.body(x).chunk(2, dim=1)
        return x + self.dropout(a * torch.sigmoid(b))


def _blocks(config: HdnConfig) -> nn.Sequential:
    return nn.Sequential(*[
        GatedResBlock(config.initial_filters, config.use_batch_norm, config.dropout_p)
        for _ in range(config.blocks_per_layer)
    ])


class BottomUpLayer(nn.Module):
    def __init__(self, config: HdnConfig, downsample: bool):
        super().__init__()
        f = config.initial_filters
        self.down = nn.Conv2d(f, f, 3, stride=2, padding=1) if downsample else None
        self.blocks = _blocks(config)

    def forward(self, h):
        if self.down is not None:
            h = self.down(h)
        return self.blocks(h)


class TopDownLayer(nn.Module):
    def __init__(self, config: HdnConfig, is_top: bool, upsample: bool):
        super().__init__()
        f, c = config.initial_filters, config.latent_channels
        self.is_top = is_top
        self.use_skip = config.use_topdown_skips
        if is_top:
            self.prior_mu = nn.Parameter(torch.zeros(1, c, 1, 1))
            self.prior_log_sigma = nn.Parameter(torch.zeros(1, c, 1, 1))
            self.posterior_head = nn.Conv2d(f, 2 * c, 3, padding=1)
            self.fuse = nn.Conv2d(c, f, 3, padding=1)
        else:
            self.prior_head = nn.Conv2d(f, 2 * c, 3, padding=1)
            self.posterior_head = nn.Conv2d(2 * f, 2 * c, 3, padding=1)
            self.fuse = nn.Conv2d(f + c, f, 3, padding=1)
        self.blocks = _blocks(config)
        self.up = nn.Conv2d(f, f, 3, padding=1) if upsample else None

    def prior(self, h, shape):
        if self.is_top:
            mu = self.prior_mu.expand(shape)
            log_sigma = self.prior_log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
            return mu, torch.exp(log_sigma).expand(shape)
        return split_params(self.prior_head(h))

    def posterior(self, h, features):
        if self.is_top:
            return split_params(self.posterior_head(features))
        return split_params(self.posterior_head(torch.cat([h, features], dim=1)))

    def forward(self, h, features, mode: LayerMode, eps, forced_z=None):
        shape = eps.shape
        p_mu, p_sigma = self.prior(h, shape)
        layer = LatentLayer(prior_mu=p_mu, prior_sigma=p_sigma, z=None, mode=mode)
        if mode == LayerMode.POSTERIOR:
            if features is None:
                raise ValueError("POSTERIOR mode requires bottom-up features for this layer")
            q_mu, q_sigma = self.posterior(h, features)
            z = q_mu + q_sigma * eps
            layer.post_mu, layer.post_sigma = q_mu, q_sigma
            layer.kl = kl_diag_gaussians(q_mu, q_sigma, p_mu, p_sigma).flatten(1).sum(1)
        elif mode == LayerMode.PRIOR_SAMPLE:
            z = p_mu + p_sigma * eps
            layer.kl = torch.zeros(shape[0], dtype=eps.dtype, device=eps.device)
        elif mode == LayerMode.PRIOR_MEAN:
            z = p_mu
            layer.kl = torch.zeros(shape[0], dtype=eps.dtype, device=eps.device)
        else:
            raise ValueError(f"unknown layer mode {mode!r}")
        if forced_z is not None:
            z = forced_z
        layer.z = z
        layer.log_prior = gaussian_log_density(z, p_mu, p_sigma).flatten(1).sum(1)

        merged = self.fuse(z) if self.is_top else self.fuse(torch.cat([h, z], dim=1))
        out = self.blocks(merged)
        if self.use_skip and not self.is_top:
            out = out + h
        if self.up is not None:
            out = self.up(F.interpolate(out, scale_factor=2, mode="nearest"))
        return out, layer


def kl_diag_gaussians(q_mu, q_sigma, p_mu, p_sigma):
    """Elementwise KL(N(q_mu, q_sigma^2) || N(p_mu, p_sigma^2))."""
    return (torch.log(p_sigma) - torch.log(q_sigma)
            + (q_sigma ** 2 + (q_mu - p_mu) ** 2) / (2 * p_sigma ** 2) - 0.5)


class LadderVAE(nn.Module):
    """Hierarchical VAE; ``config.n_layers`` stochastic groups at halving resolutions."""

    def __init__(self, config: HdnConfig):
        super().__init__()
        self.config = config
        n, f = config.n_layers, config.initial_filters
        self.stem = nn.Sequential(nn.Conv2d(1, f, 5, padding=2), nn.ELU())
        self.bottom_up_layers = nn.ModuleList(
            [BottomUpLayer(config, downsample=i > 0) for i in range(n)])
        # top_down_layers[i] serves latent group i + 1
        self.top_down_layers = nn.ModuleList(
            [TopDownLayer(config, is_top=i == n - 1, upsample=i > 0) for i in range(n)])
        self.output_head = nn.Conv2d(f, 1, 3, padding=1)
        self.register_buffer("data_mean", torch.zeros(()))
        self.register_buffer("data_std", torch.ones(()))

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def set_normalization(self, mean: float, std: float) -> None:
        self.data_mean.fill_(float(mean))
        self.data_std.fill_(float(std))

    def check_input(self, dims: Sequence[int]) -> None:
        check_dims(dims, self.n_layers, self.config.downsample_factor, field="input dims")

    def latent_shapes(self, batch: int, dims: Sequence[int]) -> list[tuple[int, ...]]:
        c = self.config.latent_channels
        return [(batch, c, *self.config.latent_shape(i + 1, tuple(dims)))
                for i in range(self.n_layers)]

    def draw_noise(self, batch: int, dims: Sequence[int], rng_seed: int):
        """Standard-normal draws for every latent group, layer n first."""
        param = next(self.parameters())
        gen = torch.Generator(device=param.device)
        gen.manual_seed(int(rng_seed))
        shapes = self.latent_shapes(batch, dims)
        noise = [None] * self.n_layers
        for i in reversed(range(self.n_layers)):
            noise[i] = torch.randn(shapes[i], generator=gen, dtype=param.dtype, device=param.device)
        return noise

    def bottom_up(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (batch, 1, H, W), got {tuple(x.shape)}")
        self.check_input(x.shape[-2:])
        h = self.stem((x - self.data_mean) / self.data_std)
        features = []
        for layer in self.bottom_up_layers:
            h = layer(h)
            features.append(h)
        return features

    def top_down(self, features=None, modes=None, rng_seed: int = 0, dims=None,
                 batch: int | None = None, noise=None, forced_latents=None) -> DecoderOutput:
        n = self.n_layers
        modes = normalize_modes(modes, n)
        if features is not None:
            batch = features[0].shape[0]
            dims = tuple(features[0].shape[-2:])
        if noise is not None:
            batch = noise[0].shape[0]
            dims = tuple(noise[0].shape[-2:])
        if dims is None or batch is None:
            raise ValueError("top_down needs features, noise or explicit dims and batch")
        self.check_input(dims)
        for i, mode in enumerate(modes):
            if mode == LayerMode.POSTERIOR and (features is None or features[i] is None):
                raise ValueError(f"layer {i + 1} is in POSTERIOR mode but no bottom-up features were given")
        if noise is None:
            noise = self.draw_noise(batch, dims, rng_seed)

        latents: list[LatentLayer | None] = [None] * n
        h = None
        for i in reversed(range(n)):
            feat = None if features is None else features[i]
            forced = None if forced_latents is None else forced_latents[i]
            h, latents[i] = self.top_down_layers[i](h, feat, modes[i], noise[i], forced)
        signal = self.output_head(h) * self.data_std + self.data_mean
        return DecoderOutput(signal=signal, latents=latents)

    def forward(self, x, modes=None, rng_seed: int = 0, noise=None) -> DecoderOutput:
        modes = normalize_modes(modes, self.n_layers)
        features = self.bottom_up(x)
        return self.top_down(features, modes, rng_seed=rng_seed, noise=noise)


def normalize_modes(modes, n_layers: int) -> list[LayerMode]:
    if modes is None:
        return [LayerMode.POSTERIOR] * n_layers
    if isinstance(modes, (str, LayerMode)):
        return [LayerMode(modes)] * n_layers
    modes = [LayerMode(m) for m in modes]
    if len(modes) != n_layers:
        raise ValueError(f"expected {n_layers} layer modes, got {len(modes)}")
    return modes


def build_model(config: HdnConfig, seed: int = 0) -> LadderVAE:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = LadderVAE(config)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def bottom_up(model: LadderVAE, x) -> list[torch.Tensor]:
    return model.bottom_up(_as_batch(x, model))


def top_down(model: LadderVAE, features=None, layer_modes=None, rng_seed: int = 0,
             dims=None, batch=None) -> DecoderOutput:
    return model.top_down(features, layer_modes, rng_seed=rng_seed, dims=dims, batch=batch)


def _as_batch(x, model: nn.Module) -> torch.Tensor:
    param = next(model.parameters())
    x = torch.as_tensor(x, dtype=param.dtype, device=param.device)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x

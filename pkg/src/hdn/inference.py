"""Diverse denoising, point estimates over samples, and unconditional generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import check_image
from .config import ConfigError
from .model import LadderVAE, LayerMode, normalize_modes

logger = logging.getLogger(__name__)

TILE_OVERLAP = 32


@dataclass
class SampleSet:
    input: np.ndarray
    samples: np.ndarray            # (k, H, W)
    seeds: list[int]
    active_layers: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 3 or len(self.samples) < 1:
            raise ValueError("a SampleSet needs k >= 1 samples of shape (H, W)")
        if self.input is not None and self.samples.shape[1:] != np.shape(self.input):
            raise ValueError("samples and input differ in shape")

    @property
    def k(self) -> int:
        return len(self.samples)


def sample_seeds(seed: int, k: int) -> list[int]:
    """Independent per-sample seeds derived from one master seed."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(k)]


def _param(model):
    return next(model.parameters())


def _check_model(model) -> None:
    if not isinstance(model, LadderVAE):
        raise TypeError(f"expected a LadderVAE, got {type(model).__name__}")


@torch.no_grad()
def _forward_tile(model, x_tile, modes, noise):
    p = _param(model)
    xt = torch.as_tensor(x_tile[None, None], dtype=p.dtype, device=p.device)
    features = model.bottom_up(xt) if LayerMode.POSTERIOR in modes else None
    out = model.top_down(features, modes, noise=noise)
    return out.signal[0, 0].cpu().numpy().astype(np.float64)


def _tile_starts(length: int, tile: int, step: int) -> list[int]:
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile + 1, step))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


@torch.no_grad()
def denoise_once(model: LadderVAE, x, modes, seed: int, tile_size: int | None = None,
                 overlap: int = TILE_OVERLAP) -> np.ndarray:
    """One sample.  Latent noise is drawn for the whole image, so a tiled pass
    consumes exactly the noise values the untiled pass would."""
    modes = normalize_modes(modes, model.n_layers)
    h, w = x.shape
    noise = model.draw_noise(1, (h, w), seed)
    if tile_size is None or (tile_size >= h and tile_size >= w):
        return _forward_tile(model, x, modes, noise)
    div = 2 ** (model.n_layers - 1)
    if tile_size % div or overlap % (2 * div) or tile_size <= overlap:
        raise ConfigError("tile_size", f"tile {tile_size} / overlap {overlap} must be multiples "
                                       f"of {div} (overlap of {2 * div}) with tile > overlap")
    step = tile_size - overlap
    half = overlap // 2
    out = np.zeros((h, w))
    for y0 in _tile_starts(h, tile_size, step):
        for x0 in _tile_starts(w, tile_size, step):
            th, tw = min(tile_size, h), min(tile_size, w)
            tile_noise = []
            for i, n in enumerate(noise):
                f = 2 ** i
                tile_noise.append(n[..., y0 // f:(y0 + th) // f, x0 // f:(x0 + tw) // f])
            pred = _forward_tile(model, x[y0:y0 + th, x0:x0 + tw], modes, tile_noise)
            # keep the tile centre; image borders keep the tile edge
            top = 0 if y0 == 0 else half
            left = 0 if x0 == 0 else half
            bottom = th if y0 + th == h else th - half
            right = tw if x0 + tw == w else tw - half
            out[y0 + top:y0 + bottom, x0 + left:x0 + right] = pred[top:bottom, left:right]
    return out


def sample_denoised(model: LadderVAE, x, k: int = 100, seed: int = 0, layer_modes=None,
                    tile_size: int | None = None) -> SampleSet:
    """``k`` posterior samples for the noisy image ``x`` (dropout off)."""
    _check_model(model)
    x = check_image(x, "x")
    model.check_input(x.shape)
    if k < 1:
        raise ValueError("k must be >= 1")
    modes = normalize_modes(layer_modes, model.n_layers)
    model.eval()
    seeds = sample_seeds(seed, k)
    samples = np.stack([denoise_once(model, x, modes, s, tile_size) for s in seeds])
    return SampleSet(x, samples, seeds, [m.value for m in modes])


def _sorted(s: SampleSet) -> np.ndarray:
    # sorting along the sample axis makes every reducer independent of sample order
    return np.sort(s.samples.astype(np.float64), axis=0)


def mmse_estimate(s: SampleSet) -> np.ndarray:
    return _sorted(s).mean(axis=0)


def median_estimate(s: SampleSet) -> np.ndarray:
    return np.median(_sorted(s), axis=0)


def diversity_map(s: SampleSet) -> np.ndarray:
    if s.k < 2:
        raise ValueError("diversity needs at least two samples")
    return _sorted(s).std(axis=0, ddof=1)


def mean_shift_modes(values: np.ndarray, bandwidth, tol: float = 1e-6, max_iter: int = 500,
                     chunk: int = 4096):
    """Per-row 1-D mean shift.

    values: (P, k) sample values per pixel; bandwidth: scalar or (P,).
    Returns (mode, converged) where ``mode`` is the converged point with the
    highest kernel density among the k starts.
    """
    values = np.asarray(values, dtype=np.float64)
    p, k = values.shape
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (p,))
    modes = np.empty(p)
    converged = np.ones(p, dtype=bool)
    for a in range(0, p, chunk):
        v = values[a:a + chunk]
        h = bw[a:a + chunk, None, None]
        pts = v.copy()
        active = np.ones(pts.shape, dtype=bool)
        for _ in range(max_iter):
            w = np.exp(-0.5 * ((pts[..., None] - v[:, None, :]) / h) ** 2)
            new = (w * v[:, None, :]).sum(-1) / w.sum(-1)
            moved = np.abs(new - pts)
            pts = np.where(active, new, pts)
            active &= moved >= tol
            if not active.any():
                break
        converged[a:a + chunk] = ~active.any(axis=1)
        dens = np.exp(-0.5 * ((pts[..., None] - v[:, None, :]) / h) ** 2).sum(-1)
        modes[a:a + chunk] = pts[np.arange(len(v)), dens.argmax(axis=1)]
    return modes, converged


def map_estimate(s: SampleSet, bandwidth: float | None = None, return_flags: bool = False):
    """Per-pixel posterior mode by mean shift over the k sample values.

    Default bandwidth is a tenth of each pixel's sample range.
    """
    if s.k < 2:
        raise ValueError("MAP estimate needs at least two samples")
    vals = _sorted(s)
    k, h, w = vals.shape
    flat = vals.reshape(k, -1).T
    if bandwidth is None:
        bw = (flat.max(axis=1) - flat.min(axis=1)) / 10.0
    else:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        bw = np.full(flat.shape[0], float(bandwidth))
    modes = flat[:, 0].copy()
    converged = np.ones(flat.shape[0], dtype=bool)
    spread = bw > 0
    if spread.any():
        modes[spread], converged[spread] = mean_shift_modes(flat[spread], bw[spread])
    n_bad = int((~converged).sum())
    if n_bad:
        logger.warning("mean shift did not converge for %d pixels", n_bad)
    out = modes.reshape(h, w)
    return (out, ~converged.reshape(h, w)) if return_flags else out


def generate(model: LadderVAE, output_dims, count: int = 1, seed: int = 0,
             modes=LayerMode.PRIOR_SAMPLE) -> list[np.ndarray]:
    """Unconditional samples from the hierarchical prior."""
    _check_model(model)
    dims = tuple(int(d) for d in output_dims)
    model.check_input(dims)
    modes = normalize_modes(modes, model.n_layers)
    if LayerMode.POSTERIOR in modes:
        raise ValueError("generation cannot use POSTERIOR layers")
    model.eval()
    images = []
    with torch.no_grad():
        for s in sample_seeds(seed, count):
            out = model.top_down(None, modes, rng_seed=s, dims=dims, batch=1)
            images.append(out.signal[0, 0].cpu().numpy().astype(np.float64))
    return images

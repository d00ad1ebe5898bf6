"""Per-pixel noise models p(x_i | s_i) and their calibration.

All models evaluate log-likelihoods on torch tensors so they can sit inside the
training loss; numpy inputs are accepted and numpy is returned for them.
"""

from __future__ import annotations

import json
import logging
import math
import warnings

import numpy as np
import torch
from sklearn.base import BaseEstimator

from ._validation import check_pairs

logger = logging.getLogger(__name__)

HIST_FLOOR = 1e-10
_LOG_2PI = math.log(2 * math.pi)


class NoiseModelFitError(RuntimeError):
    pass


def _to_tensor(a, like=None):
    if isinstance(a, torch.Tensor):
        return a
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def signal_range_of(clean: list[np.ndarray], margin: float = 0.05) -> tuple[float, float]:
    lo = min(float(c.min()) for c in clean)
    hi = max(float(c.max()) for c in clean)
    pad = margin * (hi - lo)
    if pad == 0:
        pad = margin * max(abs(hi), 1.0)
    return lo - pad, hi + pad


class NoiseModel(BaseEstimator):
    """Base class; subclasses implement ``_log_likelihood`` on tensors."""

    signal_range_: tuple[float, float] | None = None
    provenance_: str = "calibration"

    def log_likelihood(self, x, s, return_flags: bool = False):
        """Elementwise log p(x_i | s_i).

        Signals outside the calibrated range are clamped to it; with
        ``return_flags`` a boolean mask of clamped pixels is returned too.
        """
        numpy_in = not isinstance(x, torch.Tensor) and not isinstance(s, torch.Tensor)
        x_t = _to_tensor(x, s)
        s_t = _to_tensor(s, x_t)
        if x_t.shape != s_t.shape:
            raise ValueError(f"x shape {tuple(x_t.shape)} != s shape {tuple(s_t.shape)}")
        flags = torch.zeros_like(s_t, dtype=torch.bool)
        if self.signal_range_ is not None:
            lo, hi = self.signal_range_
            flags = (s_t < lo) | (s_t > hi)
            s_t = s_t.clamp(lo, hi)
        ll = self._log_likelihood(x_t, s_t)
        if numpy_in:
            ll, flags = ll.detach().numpy(), flags.numpy()
        return (ll, flags) if return_flags else ll

    def total_log_likelihood(self, x, s) -> float:
        return float(np.sum(np.asarray(self.log_likelihood(np.asarray(x), np.asarray(s)),
                                       dtype=np.float64)))

    def _log_likelihood(self, x, s):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


class GaussianNoiseModel(NoiseModel):
    def __init__(self, sigma: float | None = None):
        self.sigma = sigma

    def fit(self, noisy, clean):
        noisy, clean = check_pairs(noisy, clean)
        resid = np.concatenate([(n - c).ravel() for n, c in zip(noisy, clean)])
        self.sigma = float(resid.std())
        self.signal_range_ = signal_range_of(clean)
        return self

    def _log_likelihood(self, x, s):
        if self.sigma is None or self.sigma <= 0:
            raise ValueError("GaussianNoiseModel needs sigma > 0")
        return -0.5 * ((x - s) / self.sigma) ** 2 - math.log(self.sigma) - 0.5 * _LOG_2PI

    def to_dict(self):
        return {"type": "gaussian", "sigma": self.sigma,
                "signal_range": self.signal_range_, "provenance": self.provenance_}


class HistogramNoiseModel(NoiseModel):
    """Empirical conditional histogram; rows are signal bins, columns observation bins.

    Density lookup interpolates linearly in s between signal-bin centres.
    """

    def __init__(self, n_signal_bins: int = 64, n_obs_bins: int = 256):
        self.n_signal_bins = n_signal_bins
        self.n_obs_bins = n_obs_bins

    def fit(self, noisy, clean):
        noisy, clean = check_pairs(noisy, clean)
        s = np.concatenate([c.ravel() for c in clean])
        x = np.concatenate([n.ravel() for n in noisy])
        if s.size < 10_000:
            warnings.warn(f"histogram calibration from only {s.size} pixels", stacklevel=2)
        self.signal_range_ = signal_range_of(clean)
        obs_lo, obs_hi = signal_range_of(noisy)
        self.signal_bin_edges_ = np.linspace(*self.signal_range_, self.n_signal_bins + 1)
        self.observation_bin_edges_ = np.linspace(obs_lo, obs_hi, self.n_obs_bins + 1)
        counts, _, _ = np.histogram2d(s, x, bins=[self.signal_bin_edges_,
                                                   self.observation_bin_edges_])
        self.row_counts_ = counts.sum(axis=1)
        # add-alpha smoothing with one pseudo-count per row; empty rows become uniform
        counts = counts + 1.0 / self.n_obs_bins
        probs = counts / counts.sum(axis=1, keepdims=True)
        probs = np.maximum(probs, HIST_FLOOR)
        self.probabilities_ = probs / probs.sum(axis=1, keepdims=True)
        return self

    def _log_likelihood(self, x, s):
        s_edges = torch.as_tensor(self.signal_bin_edges_, dtype=x.dtype)
        o_edges = torch.as_tensor(self.observation_bin_edges_, dtype=x.dtype)
        probs = torch.as_tensor(self.probabilities_, dtype=x.dtype)
        n_s, n_o = probs.shape
        width = o_edges[1] - o_edges[0]
        col = torch.floor((x - o_edges[0]) / width).long()
        outside = (col < 0) | (col >= n_o)
        col = col.clamp(0, n_o - 1)
        # fractional row index relative to bin centres
        s_width = s_edges[1] - s_edges[0]
        pos = ((s - s_edges[0]) / s_width - 0.5).clamp(0, n_s - 1)
        lo = torch.floor(pos).long().clamp(max=n_s - 1)
        hi = (lo + 1).clamp(max=n_s - 1)
        frac = pos - lo.to(pos.dtype)
        p = (1 - frac) * probs[lo, col] + frac * probs[hi, col]
        p = torch.where(outside, torch.full_like(p, HIST_FLOOR), p)
        return torch.log(p / width)

    def to_dict(self):
        return {
            "type": "histogram",
            "n_signal_bins": self.n_signal_bins,
            "n_obs_bins": self.n_obs_bins,
            "signal_bin_edges": self.signal_bin_edges_.tolist(),
            "observation_bin_edges": self.observation_bin_edges_.tolist(),
            "probabilities": self.probabilities_.tolist(),
            "signal_range": list(self.signal_range_),
            "provenance": self.provenance_,
        }


class GmmNoiseModel(NoiseModel):
    """Signal-dependent Gaussian mixture.

    Component weight logits, mean offsets and log-stds are polynomials in the
    signal rescaled to [0, 1] over the calibrated range.  Stds are floored at
    ``min_sigma_fraction`` of the signal range.
    """

    def __init__(self, k_components: int = 3, poly_degree: int = 2, iters: int = 30,
                 inner_iters: int = 10, seed: int = 0, min_sigma_fraction: float = 1e-3,
                 max_pixels: int = 200_000):
        self.k_components = k_components
        self.poly_degree = poly_degree
        self.iters = iters
        self.inner_iters = inner_iters
        self.seed = seed
        self.min_sigma_fraction = min_sigma_fraction
        self.max_pixels = max_pixels

    @property
    def sigma_min_(self) -> float:
        lo, hi = self.signal_range_
        return self.min_sigma_fraction * (hi - lo)

    def _components(self, s, coefficients):
        lo, hi = self.signal_range_
        scale = hi - lo
        t = (s - lo) / scale
        powers = torch.stack([t ** d for d in range(self.poly_degree + 1)], dim=-1)
        # coefficients: (3, k, degree + 1) -> each (..., k)
        logits, offsets, log_stds = (powers @ coefficients[j].T for j in range(3))
        means = s[..., None] + scale * offsets
        stds = self.sigma_min_ + scale * torch.exp(log_stds)
        return torch.log_softmax(logits, dim=-1), means, stds

    def component_params(self, s):
        """Weights, means and stds of the mixture at signal values ``s``."""
        s = torch.as_tensor(np.asarray(s, dtype=np.float64))
        s = s.clamp(*self.signal_range_)
        log_w, means, stds = self._components(s, torch.as_tensor(self.coefficients_))
        return torch.exp(log_w).numpy(), means.numpy(), stds.numpy()

    def _log_likelihood(self, x, s):
        coeffs = torch.as_tensor(self.coefficients_, dtype=x.dtype, device=x.device)
        return self._mixture_ll(x, s, coeffs)

    def _mixture_ll(self, x, s, coeffs):
        log_w, means, stds = self._components(s, coeffs)
        comp = (-0.5 * ((x[..., None] - means) / stds) ** 2 - torch.log(stds) - 0.5 * _LOG_2PI)
        return torch.logsumexp(log_w + comp, dim=-1)

    def fit(self, noisy, clean):
        noisy, clean = check_pairs(noisy, clean)
        s = np.concatenate([c.ravel() for c in clean])
        x = np.concatenate([n.ravel() for n in noisy])
        rng = np.random.default_rng(self.seed)
        if s.size > self.max_pixels:
            idx = rng.choice(s.size, self.max_pixels, replace=False)
            s, x = s[idx], x[idx]
        self.signal_range_ = signal_range_of(clean)
        lo, hi = self.signal_range_
        scale = hi - lo
        k, d = self.k_components, self.poly_degree

        resid_std = max(float(np.std(x - s)), 2 * self.sigma_min_)
        init = np.zeros((3, k, d + 1))
        init[2, :, 0] = math.log((resid_std - self.sigma_min_) / scale)
        if k > 1:
            init[1, :, 0] = np.linspace(-0.5, 0.5, k) * resid_std / scale
            init[0, :, 0] = rng.normal(0, 0.01, k)
        coeffs = torch.tensor(init, requires_grad=True)
        s_t = torch.as_tensor(s)
        x_t = torch.as_tensor(x)
        # quasi-Newton steps with a strong-Wolfe line search keep the trace monotone
        opt = torch.optim.LBFGS([coeffs], lr=1.0, max_iter=self.inner_iters,
                                history_size=20, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            nll = -self._mixture_ll(x_t, s_t, coeffs).mean()
            if torch.isfinite(nll):
                nll.backward()
            return nll

        trace = []
        for it in range(self.iters):
            nll = opt.step(closure)
            if not torch.isfinite(nll):
                raise NoiseModelFitError(
                    f"GMM fit diverged at iteration {it}: nll={nll.item()}, "
                    f"last finite nll={trace[-1] if trace else None}, "
                    f"coefficients={coeffs.detach().numpy().tolist()}")
            trace.append(nll.item())
        with torch.no_grad():
            trace.append(-self._mixture_ll(x_t, s_t, coeffs).mean().item())
        self.coefficients_ = coeffs.detach().numpy().copy()
        self.nll_trace_ = np.asarray(trace)
        return self

    def to_dict(self):
        return {
            "type": "gmm",
            "k_components": self.k_components,
            "poly_degree": self.poly_degree,
            "min_sigma_fraction": self.min_sigma_fraction,
            "coefficients": np.asarray(self.coefficients_).tolist(),
            "signal_range": list(self.signal_range_),
            "provenance": self.provenance_,
        }


def noise_model_from_dict(d: dict) -> NoiseModel:
    kind = d.get("type")
    if kind == "gaussian":
        model = GaussianNoiseModel(sigma=d["sigma"])
    elif kind == "histogram":
        model = HistogramNoiseModel(d["n_signal_bins"], d["n_obs_bins"])
        model.signal_bin_edges_ = np.asarray(d["signal_bin_edges"], dtype=np.float64)
        model.observation_bin_edges_ = np.asarray(d["observation_bin_edges"], dtype=np.float64)
        model.probabilities_ = np.asarray(d["probabilities"], dtype=np.float64)
    elif kind == "gmm":
        model = GmmNoiseModel(d["k_components"], d["poly_degree"],
                              min_sigma_fraction=d["min_sigma_fraction"])
        model.coefficients_ = np.asarray(d["coefficients"], dtype=np.float64)
    else:
        raise ValueError(f"unknown noise model type {kind!r}")
    rng = d.get("signal_range")
    model.signal_range_ = None if rng is None else (float(rng[0]), float(rng[1]))
    model.provenance_ = d.get("provenance", "calibration")
    return model


def load_noise_model(path) -> NoiseModel:
    with open(path) as fh:
        return noise_model_from_dict(json.load(fh))


def fit_histogram(noisy, clean, n_signal_bins: int = 64, n_obs_bins: int = 256) -> HistogramNoiseModel:
    return HistogramNoiseModel(n_signal_bins, n_obs_bins).fit(noisy, clean)


def fit_gmm(noisy, clean, k: int = 3, degree: int = 2, iters: int = 30, seed: int = 0,
            **kwargs) -> GmmNoiseModel:
    return GmmNoiseModel(k, degree, iters=iters, seed=seed, **kwargs).fit(noisy, clean)


class BootstrapPairs(list):
    """Calibration pairs built from a pseudo-clean estimate; ``provenance`` is always ``bootstrap``."""

    provenance = "bootstrap"


def bootstrap_pairs(noisy, pseudo_clean) -> BootstrapPairs:
    noisy, pseudo_clean = check_pairs(noisy, pseudo_clean)
    return BootstrapPairs(zip(noisy, pseudo_clean))


def fit_from_pairs(pairs, kind: str = "gmm", **kwargs) -> NoiseModel:
    """Calibrate a noise model from a list of (noisy, clean) pairs, keeping provenance."""
    noisy = [p[0] for p in pairs]
    clean = [p[1] for p in pairs]
    if kind == "gmm":
        model = fit_gmm(noisy, clean, **kwargs)
    elif kind == "histogram":
        model = fit_histogram(noisy, clean, **kwargs)
    elif kind == "gaussian":
        model = GaussianNoiseModel().fit(noisy, clean)
    else:
        raise ValueError(f"unknown noise model kind {kind!r}")
    model.provenance_ = getattr(pairs, "provenance", "calibration")
    if model.provenance_ == "bootstrap":
        logger.info("noise model calibrated from bootstrapped pseudo-clean data")
    return model

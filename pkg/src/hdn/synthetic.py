"""Synthetic data: pixel-noise corruption, linear forward models with Tikhonov
reconstruction, and toy image sets with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._validation import check_image


class SingularSystemError(np.linalg.LinAlgError):
    pass


def corrupt_gaussian(s, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    s = np.asarray(s, dtype=np.float64)
    if sigma == 0:
        return s.copy()
    rng = np.random.default_rng(seed)
    return s + rng.normal(0.0, sigma, size=s.shape)


@dataclass
class LinearForwardModel:
    """y = A s.  ``operator`` is a dense (m, N) matrix acting on row-major
    vectorised images, or a 2-D convolution kernel applied with periodic
    boundaries (which makes the Tikhonov system diagonal in Fourier space)."""

    operator: np.ndarray
    lam: float = 0.0
    image_shape: tuple[int, int] | None = None
    kind: str = "dense"

    def __post_init__(self):
        self.operator = np.asarray(self.operator, dtype=np.float64)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.kind not in ("dense", "kernel"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "dense" and self.operator.ndim != 2:
            raise ValueError("dense operator must be a 2-D matrix")

    @classmethod
    def blur(cls, kernel, lam: float = 0.0) -> "LinearForwardModel":
        kernel = np.asarray(kernel, dtype=np.float64)
        return cls(kernel / kernel.sum(), lam, kind="kernel")

    def _vec(self, s):
        s = np.asarray(s, dtype=np.float64)
        n = self.operator.shape[1]
        if s.size != n:
            raise ValueError(f"image with {s.size} pixels does not match operator with {n} columns")
        return s.reshape(-1)

    def _kernel_fft(self, shape):
        k = self.operator
        if k.shape[0] > shape[0] or k.shape[1] > shape[1]:
            raise ValueError(f"kernel {k.shape} larger than image {shape}")
        padded = np.zeros(shape)
        padded[:k.shape[0], :k.shape[1]] = k
        # centre the kernel on the origin so a symmetric blur does not shift the image
        padded = np.roll(padded, (-(k.shape[0] // 2), -(k.shape[1] // 2)), axis=(0, 1))
        return np.fft.fft2(padded)

    def apply(self, s) -> np.ndarray:
        if self.kind == "dense":
            return self.operator @ self._vec(s)
        s = np.asarray(s, dtype=np.float64)
        return np.real(np.fft.ifft2(np.fft.fft2(s) * self._kernel_fft(s.shape)))

    def solve_normal(self, b, shape=None) -> np.ndarray:
        """Solve (A^T A + lam I) v = b."""
        if self.kind == "dense":
            a = self.operator
            n = a.shape[1]
            if self.lam == 0 and np.linalg.matrix_rank(a) < n:
                raise SingularSystemError("A^T A is singular at lambda = 0; use lambda > 0")
            m = a.T @ a + self.lam * np.eye(n)
            return np.linalg.solve(m, b)
        kf = self._kernel_fft(b.shape)
        denom = np.abs(kf) ** 2 + self.lam
        if np.min(denom) <= 1e-12 * np.max(denom):
            raise SingularSystemError("A^T A is singular at lambda = 0; use lambda > 0")
        return np.real(np.fft.ifft2(np.fft.fft2(b) / denom))

    def adjoint(self, y, shape=None) -> np.ndarray:
        if self.kind == "dense":
            return self.operator.T @ np.asarray(y, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64)
        return np.real(np.fft.ifft2(np.fft.fft2(y) * np.conj(self._kernel_fft(y.shape))))


def measure(fm: LinearForwardModel, s, e_sigma: float, seed: int) -> np.ndarray:
    y = fm.apply(s)
    if e_sigma > 0:
        y = y + np.random.default_rng(seed).normal(0.0, e_sigma, size=y.shape)
    return y


def tikhonov_reconstruct(fm: LinearForwardModel, y) -> np.ndarray:
    """x = (A^T A + lam I)^-1 A^T y."""
    return fm.solve_normal(fm.adjoint(y))


def structured_residual(fm: LinearForwardModel, s, e) -> np.ndarray:
    """n = ((A^T A + lam I)^-1 A^T A - I) s + (A^T A + lam I)^-1 A^T e."""
    s = np.asarray(s, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    shape = s.shape
    s_vec = s.reshape(-1) if fm.kind == "dense" else s
    if fm.kind == "dense" and e.reshape(-1).size != fm.operator.shape[0]:
        raise ValueError("measurement noise does not match the operator's row count")
    signal_term = fm.solve_normal(fm.adjoint(fm.apply(s))) - s_vec
    noise_term = fm.solve_normal(fm.adjoint(e))
    return (signal_term + noise_term).reshape(shape)


# toy datasets ---------------------------------------------------------------

BACKGROUND = 20.0
PEAK = 220.0


@dataclass
class ToyDataset:
    kind: str
    clean: np.ndarray          # (count, size, size)
    noisy: np.ndarray          # clean + artefacts + pixel noise
    artefacts: np.ndarray      # structured component, zeros unless striped
    params: dict = field(default_factory=dict)

    @property
    def data_range(self) -> float:
        return float(self.clean.max() - self.clean.min())


def _blobs(rng, size: int) -> np.ndarray:
    img = np.zeros((size, size))
    yy, xx = np.mgrid[:size, :size]
    n_blobs = rng.integers(4, 9) * size * size // (64 * 64) + 2
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(3.0, 7.0) * size / 64 + 1.5
        amp = rng.uniform(0.5, 1.0)
        img += amp / (1 + np.exp(((yy - cy) ** 2 + (xx - cx) ** 2) ** 0.5 / 1.0 - r))
    img = ndimage.gaussian_filter(np.clip(img, 0, 1), 1.0)
    return BACKGROUND + (PEAK - BACKGROUND) * img


def _membranes(rng, size: int) -> np.ndarray:
    n_cells = max(4, size * size // 150)
    centres = rng.uniform(0, size, (n_cells, 2))
    yy, xx = np.mgrid[:size, :size]
    d = np.sqrt((yy[..., None] - centres[:, 0]) ** 2 + (xx[..., None] - centres[:, 1]) ** 2)
    d.sort(axis=-1)
    gap = d[..., 1] - d[..., 0]
    img = np.exp(-gap ** 2 / (2 * 1.2 ** 2))
    img = ndimage.gaussian_filter(img, 0.8)
    img /= img.max()
    return BACKGROUND + (PEAK - BACKGROUND) * img


def _stripes(rng, size: int, amplitude: float, row_fraction: float = 0.1,
             variation: float = 0.3, length: int | None = None) -> np.ndarray:
    art = np.zeros((size, size))
    n_rows = max(1, int(round(row_fraction * size)))
    rows = rng.choice(size, n_rows, replace=False)
    for r in rows:
        profile = ndimage.gaussian_filter1d(rng.normal(size=size), 8.0, mode="wrap")
        profile /= profile.std() + 1e-12
        sign = rng.choice([-1.0, 1.0])
        line = sign * amplitude * (1.0 + variation * profile)
        if length is not None and length < size:
            start = rng.integers(0, size)
            keep = (np.arange(size) - start) % size < length
            line = np.where(keep, line, 0.0)
        art[r] = line
    return art


def make_toy_dataset(kind: str, count: int, size: int = 64, seed: int = 0,
                     noise_sigma: float = 25.0, stripe_amplitude: float = 60.0,
                     n_layers: int = 3, stripe_variation: float = 0.3,
                     stripe_length: int | None = None) -> ToyDataset:
    """Reproducible toy images; ``striped_blobs`` adds row artefacts on top of blobs."""
    if kind not in ("blobs", "membranes", "striped_blobs"):
        raise ValueError(f"unknown toy dataset kind {kind!r}")
    div = 2 ** (n_layers - 1)
    if size % div:
        raise ValueError(f"size {size} must be divisible by {div} for a {n_layers}-layer ladder")
    children = np.random.SeedSequence(seed).spawn(count)
    clean, noisy, arts = [], [], []
    for child in children:
        img_seed, stripe_seed, noise_seed = child.generate_state(3)
        rng = np.random.default_rng(img_seed)
        img = _membranes(rng, size) if kind == "membranes" else _blobs(rng, size)
        art = np.zeros_like(img)
        if kind == "striped_blobs":
            art = _stripes(np.random.default_rng(stripe_seed), size, stripe_amplitude,
                           variation=stripe_variation, length=stripe_length)
        clean.append(img)
        arts.append(art)
        noisy.append(corrupt_gaussian(img + art, noise_sigma, int(noise_seed)))
    params = {"kind": kind, "count": count, "size": size, "seed": seed,
              "noise_sigma": noise_sigma,
              "stripe_amplitude": stripe_amplitude if kind == "striped_blobs" else 0.0,
              "stripe_variation": stripe_variation, "stripe_length": stripe_length}
    return ToyDataset(kind, np.stack(clean), np.stack(noisy), np.stack(arts), params)

"""Input validation helpers shared by estimators and functional entry points."""

from __future__ import annotations

import numpy as np


def check_image(x, name: str = "image") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a 2-D single-channel array, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {x.dtype}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x.astype(np.float64, copy=False)


def check_images(images, name: str = "images") -> list[np.ndarray]:
    """Accept a list of 2-D arrays or a (N, H, W) stack; return a list of float arrays."""
    if isinstance(images, np.ndarray):
        if images.ndim == 2:
            images = images[None]
        if images.ndim != 3:
            raise ValueError(f"{name} must be a (N, H, W) stack or a list of 2-D images")
        images = list(images)
    images = [check_image(im, f"{name}[{i}]") for i, im in enumerate(images)]
    if not images:
        raise ValueError(f"{name} is empty")
    return images


def check_pairs(noisy, clean) -> tuple[list[np.ndarray], list[np.ndarray]]:
    noisy = check_images(noisy, "noisy")
    clean = check_images(clean, "clean")
    if len(noisy) != len(clean):
        raise ValueError(f"got {len(noisy)} noisy but {len(clean)} clean images")
    for i, (a, b) in enumerate(zip(noisy, clean)):
        if a.shape != b.shape:
            raise ValueError(f"pair {i}: noisy shape {a.shape} != clean shape {b.shape}")
    return noisy, clean


def check_same_shape(a, b, names=("a", "b")) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{names[0]} shape {np.shape(a)} != {names[1]} shape {np.shape(b)}")

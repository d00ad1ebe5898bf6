"""Patch-based unsupervised training loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import check_images
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .losses import LossBreakdown, NonFiniteLossError, hdn_loss
from .model import LadderVAE
from .noise_models import NoiseModel

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def extract_patches(images, patch_size: int, count: int, seed: int) -> np.ndarray:
    """``count`` random square patches with uniformly drawn top-left corners."""
    images = check_images(images)
    usable = []
    for i, im in enumerate(images):
        if im.shape[0] < patch_size or im.shape[1] < patch_size:
            warnings.warn(f"image {i} of shape {im.shape} is smaller than patch {patch_size}; skipped",
                          stacklevel=2)
        else:
            usable.append(im)
    if not usable:
        raise ValueError(f"no image is at least {patch_size}x{patch_size}")
    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(usable), size=count)
    out = np.empty((count, patch_size, patch_size), dtype=np.float64)
    for j, idx in enumerate(which):
        im = usable[idx]
        y = rng.integers(0, im.shape[0] - patch_size + 1)
        x = rng.integers(0, im.shape[1] - patch_size + 1)
        out[j] = im[y:y + patch_size, x:x + patch_size]
    return out


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_checkpoint_path: Path
    history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)


def make_optimizer(model: LadderVAE, cfg: TrainConfig):
    name = cfg.optimizer.lower()
    if name == "adamax":
        return torch.optim.Adamax(model.parameters(), lr=cfg.learning_rate)
    if name == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)


def _batch(arr, model) -> torch.Tensor:
    p = next(model.parameters())
    return torch.as_tensor(np.asarray(arr)[:, None], dtype=p.dtype, device=p.device)


def evaluate(model: LadderVAE, images, noise_model: NoiseModel, free_bits: float,
             seed: int = 0) -> dict:
    """Mean loss terms over full images (eval mode, no gradients, parameters untouched)."""
    was_training = model.training
    model.eval()
    totals: dict[str, float] = {}
    try:
        with torch.no_grad():
            for i, im in enumerate(images):
                out = model(_batch(im[None], model), rng_seed=derive_seed(seed, i))
                lb = hdn_loss(_batch(im[None], model), out, noise_model, free_bits)
                for key, value in (("reconstruction", lb.reconstruction), ("total", lb.total)):
                    totals[key] = totals.get(key, 0.0) + float(value) / len(images)
    finally:
        model.train(was_training)
    return totals


def _log_line(step: int, lb: LossBreakdown) -> str:
    kls = " ".join(f"{float(k.detach()):.6g}" for k in lb.kl_per_layer)
    return f"{step}\t{float(lb.reconstruction.detach()):.6g}\t{kls}\t{float(lb.total.detach()):.6g}\n"


def _fit_window(image_shape, n_layers: int) -> tuple[int, int]:
    div = 2 ** (n_layers - 1)
    return image_shape[0] // div * div, image_shape[1] // div * div


def train(model: LadderVAE, train_images, val_images, noise_model: NoiseModel,
          train_config: TrainConfig, out_dir, resume_from=None) -> TrainResult:
    """Optimise the hierarchical ELBO on random patches.

    Every step draws its patches, latent noise and dropout masks from seeds
    derived from ``(train_config.seed, step)``, so a resumed run replays the
    uninterrupted one exactly.
    """
    cfg = train_config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_images = check_images(train_images, "train_images")
    val_images = check_images(val_images, "val_images") if val_images is not None else []
    free_bits = model.config.free_bits
    # validation uses the largest ladder-compatible crop of each image
    val_crops = []
    for im in val_images:
        h, w = _fit_window(im.shape, model.n_layers)
        val_crops.append(im[:h, :w])

    optimizer = make_optimizer(model, cfg)
    start_step = 0
    history: list[dict] = []
    val_history: list[dict] = []
    best_val = math.inf
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_state_dict(ckpt.model.state_dict())
        ckpt.restore_optimizer(optimizer)
        state = ckpt.train_state
        if state.get("train_config") != cfg.to_dict():
            raise ValueError("resume requires an identical training configuration")
        start_step = int(state["step"])
        history = state.get("history", [])
        val_history = state.get("val_history", [])
        best_val = float(state.get("best_val", math.inf))
    else:
        stacked = np.concatenate([im.ravel() for im in train_images])
        model.set_normalization(stacked.mean(), stacked.std())

    latest = out_dir / "last.npz"
    best = out_dir / "best.npz"
    log_path = out_dir / "train_log.tsv"
    if start_step == 0:
        log_path.write_text("step\treconstruction\tkl_per_layer\ttotal\n")

    def snapshot(step):
        return {"step": step, "train_config": cfg.to_dict(), "history": history,
                "val_history": val_history, "best_val": best_val}

    model.train()
    for step in range(start_step, cfg.total_steps):
        patch_seed = derive_seed(cfg.seed, step, 0)
        latent_seed = derive_seed(cfg.seed, step, 1)
        dropout_seed = derive_seed(cfg.seed, step, 2)
        x = _batch(extract_patches(train_images, cfg.patch_size, cfg.batch_size, patch_seed), model)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(dropout_seed)
            out = model(x, rng_seed=latent_seed)
        try:
            lb = hdn_loss(x, out, noise_model, free_bits)
        except NonFiniteLossError as err:
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (patch seed {patch_seed}): {err.diagnostics}") from err
        optimizer.zero_grad()
        lb.total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        record = {"step": step + 1, **lb.as_floats()}
        history.append(record)
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.total_steps:
            with open(log_path, "a") as fh:
                fh.write(_log_line(step + 1, lb))
        if val_crops and ((step + 1) % cfg.validate_every == 0 or step + 1 == cfg.total_steps):
            val = evaluate(model, val_crops, noise_model, free_bits, seed=cfg.seed)
            val_history.append({"step": step + 1, **val})
            logger.info("step %d val total %.4f", step + 1, val["total"])
            if val["total"] < best_val:
                best_val = val["total"]
                save_checkpoint(best, model, optimizer, noise_model, snapshot(step + 1))
        if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.total_steps:
            save_checkpoint(latest, model, optimizer, noise_model, snapshot(step + 1))
            if (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"step_{step + 1:07d}.npz", model, optimizer,
                                noise_model, snapshot(step + 1))
    if not best.exists():
        save_checkpoint(best, model, optimizer, noise_model, snapshot(cfg.total_steps))
    model.eval()
    (out_dir / "history.json").write_text(json.dumps({"train": history, "val": val_history}))
    return TrainResult(latest, best, history, val_history)

"""Command-line entry point: ``hdn <command> [options]``.

Failures print one line ``error: <category>: <message>`` to stderr and exit
nonzero. Every successful command writes a JSON run manifest next to its
output listing the argv, resolved settings, seeds and output hashes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from importlib import metadata
from pathlib import Path

from . import io
from .checkpoint import CheckpointError, CheckpointVersionError, file_hash, load_checkpoint
from .config import ConfigError, HdnConfig, TrainConfig, load_config_file
from .inference import diversity_map, generate, map_estimate, median_estimate, mmse_estimate
from .metrics import evaluate_pairs
from .model import build_model
from .noise_models import (GaussianNoiseModel, bootstrap_pairs, fit_from_pairs, load_noise_model)
from .structured import (LayerModeSpec, autocorrelation, denoise_deactivated, noise_residual,
                         visualize_layer)
from .synthetic import make_toy_dataset
from .training import TrainingDivergedError, train

logger = logging.getLogger("hdn")


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = 2):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage-error", message, 2)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    return h, w


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as err:
        raise CliError("checkpoint-not-found", str(err), 2) from None


def _manifest(args, argv, inputs, config=None, seeds=None, checkpoint=None) -> io.RunManifest:
    return io.RunManifest(command=args.command, argv=list(argv), config=config or {},
                          seeds=seeds or {}, inputs=[str(p) for p in inputs],
                          toolkit_version=_version(),
                          checkpoint_hash=file_hash(checkpoint) if checkpoint else None)


# commands -------------------------------------------------------------------

def cmd_make_data(args, argv):
    out = io.resolve_output(args.out)
    ds = make_toy_dataset(args.kind, args.count, args.size, args.seed,
                          noise_sigma=args.noise_sigma, stripe_amplitude=args.stripe_amplitude,
                          n_layers=args.n_layers, stripe_variation=args.stripe_variation,
                          stripe_length=args.stripe_length)
    man = _manifest(args, argv, [], config=ds.params, seeds={"seed": args.seed})
    for sub, stack in (("clean", ds.clean), ("noisy", ds.noisy), ("artefacts", ds.artefacts)):
        if sub == "artefacts" and args.kind != "striped_blobs":
            continue
        for i, img in enumerate(stack):
            man.add_output(io.write_image(out / sub / f"img_{i:05d}.tif", img))
    return out, man


def cmd_calibrate_noise(args, argv):
    noisy, noisy_files = io.read_images(args.noisy, args.workers)
    inputs = list(noisy_files)
    if args.clean:
        clean, clean_files = io.read_images(args.clean, args.workers)
        inputs += clean_files
        pairs = list(zip(noisy, clean))
    elif args.pseudo_clean:
        clean, clean_files = io.read_images(args.pseudo_clean, args.workers)
        inputs += clean_files
        pairs = bootstrap_pairs(noisy, clean)
    else:
        raise CliError("usage-error", "pass --clean or --pseudo-clean")
    kwargs = {}
    if args.kind == "gmm":
        kwargs = {"k": args.components, "degree": args.degree,
                  "iters": args.iters, "seed": args.seed}
    elif args.kind == "histogram":
        kwargs = {"n_signal_bins": args.signal_bins, "n_obs_bins": args.obs_bins}
    model = fit_from_pairs(pairs, args.kind, **kwargs)
    out = io.resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    man = _manifest(args, argv, inputs, config={"kind": args.kind, **kwargs},
                    seeds={"seed": args.seed})
    man.add_output(out)
    return out, man


def cmd_train(args, argv):
    cfg, tc = load_config_file(args.config) if args.config else (HdnConfig(), TrainConfig())
    overrides = {k: v for k, v in {"total_steps": args.steps, "seed": args.seed,
                                   "batch_size": args.batch_size, "patch_size": args.patch_size,
                                   "learning_rate": args.learning_rate}.items() if v is not None}
    tc = TrainConfig.from_dict({**tc.to_dict(), **overrides})
    cfg = tc.apply_ablations(cfg)
    if args.free_bits is not None:
        cfg = HdnConfig.from_dict({**cfg.to_dict(), "free_bits": args.free_bits})
    images, files = io.read_images(args.data, args.workers)
    val_images, val_files = io.read_images(args.val, args.workers) if args.val else (None, [])
    if args.noise_model:
        nm_path = Path(args.noise_model)
        if not nm_path.exists():
            raise CliError("file-not-found", f"noise model not found: {nm_path}")
        noise_model = load_noise_model(nm_path)
    elif args.noise_sigma is not None:
        noise_model = GaussianNoiseModel(args.noise_sigma)
    else:
        raise CliError("usage-error", "pass --noise-model or --noise-sigma")
    out = io.resolve_output(args.out)
    model = build_model(cfg, seed=tc.seed)
    result = train(model, images, val_images, noise_model, tc, out, resume_from=args.resume)
    man = _manifest(args, argv, list(files) + list(val_files) + ([args.noise_model] if args.noise_model else []),
                    config={"model": cfg.to_dict(), "train": tc.to_dict(),
                            "noise_model": noise_model.to_dict()},
                    seeds={"seed": tc.seed})
    for p in (result.checkpoint_path, result.best_checkpoint_path, out / "train_log.tsv", out / "history.json"):
        man.add_output(p)
    return out, man


_REDUCERS = {"mmse": mmse_estimate, "median": median_estimate, "map": map_estimate}


def cmd_denoise(args, argv):
    ckpt = _load_ckpt(args.checkpoint)
    model = ckpt.model.eval()
    spec = LayerModeSpec.parse(args.active_layers or f"1-{model.n_layers}", model.n_layers,
                               args.prior_mean)
    images, files = io.read_images(args.input, args.workers)
    out = io.resolve_output(args.out)
    div_dir = io.resolve_output(args.diversity_out) if args.diversity_out else None
    man = _manifest(args, argv, files,
                    config={"samples": args.samples, "estimator": args.estimator,
                            "active_layers": str(spec), "prior_mean": args.prior_mean,
                            "tile_size": args.tile_size, "bandwidth": args.bandwidth},
                    seeds={"seed": args.seed, "per_image": "seed + index"},
                    checkpoint=args.checkpoint)
    for i, (img, f) in enumerate(zip(images, files)):
        samples = denoise_deactivated(model, img, spec, k=args.samples, seed=args.seed + i,
                                      prior_mean=args.prior_mean, tile_size=args.tile_size)
        if args.estimator == "map":
            est = map_estimate(samples, bandwidth=args.bandwidth)
        else:
            est = _REDUCERS[args.estimator](samples)
        man.add_output(io.write_image(out / f"{f.stem}_{args.estimator}.tif", est))
        if args.save_samples:
            man.add_output(io.write_image(out / f"{f.stem}_samples.tif", samples.samples))
        if div_dir is not None:
            if samples.k < 2:
                raise CliError("invalid-input", "--diversity-out needs --samples >= 2")
            man.add_output(io.write_image(div_dir / f"{f.stem}_diversity.tif",
                                          diversity_map(samples)))
    return out, man


def cmd_generate(args, argv):
    ckpt = _load_ckpt(args.checkpoint)
    images = generate(ckpt.model.eval(), args.size, args.count, seed=args.seed)
    out = io.resolve_output(args.out)
    man = _manifest(args, argv, [], config={"size": list(args.size), "count": args.count},
                    seeds={"seed": args.seed}, checkpoint=args.checkpoint)
    for i, img in enumerate(images):
        man.add_output(io.write_image(out / f"generated_{i:05d}.tif", img))
    return out, man


def cmd_inspect_layers(args, argv):
    ckpt = _load_ckpt(args.checkpoint)
    model = ckpt.model.eval()
    dims = args.size or tuple(model.config.input_patch_size)
    grid = visualize_layer(model, args.layer, args.variants, seed=args.seed, dims=dims)
    out = io.resolve_output(args.out)
    man = _manifest(args, argv, [], config={"layer": args.layer, "variants": args.variants,
                                            "size": list(dims)},
                    seeds={"seed": args.seed}, checkpoint=args.checkpoint)
    man.add_output(io.write_image(out, grid))
    return out, man


def cmd_autocorr(args, argv):
    raw = io.read_image(args.input)
    gt = io.read_image(args.gt) if args.gt else None
    resid, mask = noise_residual(raw, gt, args.background_quantile)
    if args.raw_residual:
        resid, mask = raw, None
    corr = autocorrelation(resid, args.max_lag, mask=mask)
    out = io.resolve_output(args.out)
    man = _manifest(args, argv, [args.input] + ([args.gt] if args.gt else []),
                    config={"max_lag": args.max_lag, "background_quantile": args.background_quantile,
                            "residual": "raw" if args.raw_residual else ("gt" if gt is not None else "background")})
    man.add_output(io.write_image(out, corr))
    return out, man


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def cmd_evaluate(args, argv):
    gts, gt_files = io.read_images(args.gt, args.workers)
    preds, pred_files = io.read_images(args.pred, args.workers)
    if len(gts) != len(preds):
        raise CliError("invalid-input", f"{len(gts)} ground-truth images but {len(preds)} predictions")
    report = evaluate_pairs(gts, preds, [f.name for f in pred_files], args.data_range)
    out = io.resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "psnr", "ssim"])
        for name, p, s in zip(report.names, report.psnr, report.ssim):
            w.writerow([name, _fmt(p), _fmt(s)])
        w.writerow(["mean", _fmt(report.summary["psnr_mean"]), _fmt(report.summary["ssim_mean"])])
    man = _manifest(args, argv, list(gt_files) + list(pred_files),
                    config={"data_range": report.data_range, "range_policy": report.range_policy})
    man.add_output(out)
    return out, man


def cmd_replay(args, argv):
    """Re-run a manifest's command and compare output hashes."""
    old = io.RunManifest.read(args.manifest)
    if old.command == "replay":
        raise CliError("invalid-input", "cannot replay a replay manifest")
    code = main(old.argv)
    if code != 0:
        raise CliError("replay-failed", f"replayed command exited with {code}", 1)
    new = io.RunManifest.read(args.manifest)
    mismatched = [p for p, h in old.outputs.items() if new.outputs.get(p) != h]
    if mismatched:
        raise CliError("replay-mismatch", f"{len(mismatched)} outputs differ, first: {mismatched[0]}", 1)
    print(f"replay ok: {len(old.outputs)} outputs identical")
    return None, None


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hdn", description="Hierarchical diversity denoising toolkit")
    p.add_argument("--version", action="version", version=_version())
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, default=1, help="threads for reading input images")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-data", help="write a synthetic toy dataset as TIFFs")
    s.add_argument("--kind", choices=["blobs", "membranes", "striped_blobs"], required=True)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-sigma", type=float, default=25.0)
    s.add_argument("--stripe-amplitude", type=float, default=60.0)
    s.add_argument("--stripe-variation", type=float, default=0.3)
    s.add_argument("--stripe-length", type=int, default=None)
    s.add_argument("--n-layers", type=int, default=3, help="ladder depth the size must suit")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("calibrate-noise", help="fit a pixel noise model from image pairs")
    s.add_argument("--noisy", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--clean", help="clean images, same order as --noisy")
    g.add_argument("--pseudo-clean", help="estimated clean images for bootstrap calibration")
    s.add_argument("--kind", choices=["gmm", "histogram", "gaussian"], default="gmm")
    s.add_argument("--components", type=int, default=3)
    s.add_argument("--degree", type=int, default=2)
    s.add_argument("--iters", type=int, default=30)
    s.add_argument("--signal-bins", type=int, default=64)
    s.add_argument("--obs-bins", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate_noise)

    s = sub.add_parser("train", help="train a model on noisy images")
    s.add_argument("--config", help="YAML file with 'model' and 'train' sections")
    s.add_argument("--data", required=True)
    s.add_argument("--val")
    s.add_argument("--noise-model", help="noise model JSON from calibrate-noise")
    s.add_argument("--noise-sigma", type=float, help="use a known Gaussian noise level instead")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--free-bits", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="sample and reduce denoised images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True, help="TIFF file or directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--estimator", choices=sorted(_REDUCERS), default="mmse")
    s.add_argument("--bandwidth", type=float, help="mean-shift bandwidth for --estimator map")
    s.add_argument("--active-layers", help="k-n: layers k..n read the input, lower ones sample the prior")
    s.add_argument("--prior-mean", action="store_true", help="use prior means in deactivated layers")
    s.add_argument("--diversity-out", help="directory for per-pixel sample std maps")
    s.add_argument("--save-samples", action="store_true", help="also write the sample stack")
    s.add_argument("--tile-size", type=int)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("generate", help="unconditional samples from the prior")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--size", type=_size, required=True, help="HxW")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("inspect-layers", help="grid of variants drawn at one latent layer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--variants", type=int, default=6)
    s.add_argument("--size", type=_size)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect_layers)

    s = sub.add_parser("autocorr", help="spatial autocorrelation map of a noise residual")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--gt", help="clean image; residual = input - gt")
    s.add_argument("--raw-residual", action="store_true", help="treat the input as the residual")
    s.add_argument("--max-lag", type=int, default=64)
    s.add_argument("--background-quantile", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_autocorr)

    s = sub.add_parser("evaluate", help="PSNR/SSIM report as CSV")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--data-range", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("replay", help="re-run a manifest and check outputs are identical")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_replay)
    return p


def _category(err: Exception) -> tuple[str, int]:
    if isinstance(err, CliError):
        return err.category, err.code
    if isinstance(err, CheckpointVersionError):
        return "checkpoint-version-mismatch", 3
    if isinstance(err, CheckpointError):
        return "checkpoint-invalid", 3
    if isinstance(err, FileNotFoundError):
        return "file-not-found", 2
    if isinstance(err, ConfigError):
        return "config-error", 4
    if isinstance(err, TrainingDivergedError):
        return "training-diverged", 6
    if isinstance(err, (ValueError, TypeError)):
        return "invalid-input", 5
    return "internal-error", 1


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exit_:  # --help / --version
        return int(exit_.code or 0)
    except CliError as err:
        print(f"error: {err.category}: {err}", file=sys.stderr)
        return err.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out, man = args.func(args, argv)
    except Exception as err:  # noqa: BLE001 - mapped to a one-line category
        category, code = _category(err)
        msg = " ".join(str(err).split())
        print(f"error: {category}: {msg}", file=sys.stderr)
        if category == "internal-error" and args.verbose:
            raise
        return code
    if man is not None:
        path = man.write(io.manifest_path_for(out))
        print(json.dumps({"command": args.command, "outputs": len(man.outputs),
                          "manifest": str(path)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())

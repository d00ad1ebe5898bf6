"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

Toy trainings are cached under ``$HDN_ACCEPTANCE_CACHE`` (default
``.acceptance_cache`` in the repository root) keyed by a hash of every setting,
so a second run only repeats inference.
"""

import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from hdn.checkpoint import load_checkpoint, save_checkpoint
from hdn.cli import main as cli_main
from hdn.config import HdnConfig, TrainConfig
from hdn.inference import diversity_map, median_estimate, mmse_estimate, sample_denoised
from hdn.losses import free_bits_clamp, hdn_loss, kl_diag_gaussians
from hdn.metrics import psnr
from hdn.model import DecoderOutput, LatentLayer, LayerMode, build_model, count_parameters
from hdn.noise_models import GaussianNoiseModel, fit_gmm, fit_histogram
from hdn.structured import (denoise_deactivated, high_frequency_fraction, stripe_correlation,
                            visualize_layer)
from hdn.synthetic import (LinearForwardModel, make_toy_dataset, measure, structured_residual,
                           tikhonov_reconstruct)
from hdn.training import train

CACHE = Path(os.environ.get("HDN_ACCEPTANCE_CACHE",
                            Path(__file__).resolve().parents[1] / ".acceptance_cache"))

# toy ladder shared by the trained-model criteria
TOY_MODEL = dict(latent_channels=4, initial_filters=16, blocks_per_layer=1, dropout_p=0.0)
TOY_TRAIN = dict(batch_size=16, patch_size=32, checkpoint_every=10 ** 9, validate_every=10 ** 9,
                 log_every=500)

# striped set: 64x64 blobs, pixel noise 25 plus row artefacts, 4-level ladder
STRIPED = dict(kind="striped_blobs", count=200, size=64, seed=0, noise_sigma=25.0,
               stripe_amplitude=40.0, n_layers=4)
STRIPED_STEPS = 2000


def trained_model(name: str, data_kw: dict, n_layers: int, steps: int, noise_sigma: float,
                  seed: int = 0, n_train: int | None = None):
    """Train (or load from cache) a toy model; returns (model, dataset)."""
    ds = make_toy_dataset(**data_kw)
    n_train = n_train or len(ds.noisy) - 10
    cfg = HdnConfig(n_layers=n_layers, input_patch_size=(32, 32), **TOY_MODEL)
    tc = TrainConfig(total_steps=steps, seed=seed, **TOY_TRAIN)
    key = hashlib.sha256(json.dumps([cfg.to_dict(), tc.to_dict(), ds.params, n_train,
                                     noise_sigma], sort_keys=True).encode()).hexdigest()[:16]
    path = CACHE / f"{name}-{key}.npz"
    if path.exists():
        return load_checkpoint(path).model.eval(), ds
    model = build_model(cfg, seed=seed)
    res = train(model, ds.noisy[:n_train], None, GaussianNoiseModel(noise_sigma), tc,
                CACHE / f"{name}-{key}-run")
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, noise_model=GaussianNoiseModel(noise_sigma),
                    train_state={"history": res.history[-1:]})
    return model.eval(), ds


# 1 ----------------------------------------------------------------------------

def test_criterion_1_analytic_kl(acceptance):
    rng = np.random.default_rng(0)
    n = 10 ** 6
    worst = 0.0
    for _ in range(100):
        q_mu, p_mu = rng.normal(0, 2, 2)
        q_sigma, p_sigma = rng.uniform(0.2, 3.0, 2)
        z = q_mu + q_sigma * rng.standard_normal(n)
        terms = (-0.5 * ((z - q_mu) / q_sigma) ** 2 - math.log(q_sigma)
                 + 0.5 * ((z - p_mu) / p_sigma) ** 2 + math.log(p_sigma))
        se = terms.std(ddof=1) / math.sqrt(n)
        closed = kl_diag_gaussians(torch.tensor([q_mu]), torch.tensor([q_sigma]),
                                   torch.tensor([p_mu]), torch.tensor([p_sigma]),
                                   per_layer=False).item()
        worst = max(worst, abs(terms.mean() - closed) / se)
    mu = torch.randn(50, dtype=torch.float64)
    sig = torch.rand(50, dtype=torch.float64) + 0.1
    self_kl = kl_diag_gaussians(mu, sig, mu, sig, per_layer=False)
    ok = worst < 3.0 and bool(torch.all(self_kl == 0))
    acceptance(1, ok, f"max |MC - closed form| = {worst:.2f} SE over 100 draws (< 3); "
                      f"KL(q,q) == 0 exactly: {bool(torch.all(self_kl == 0))}")


# 2 ----------------------------------------------------------------------------

def test_criterion_2_gradient_oracle(acceptance):
    cfg = HdnConfig(n_layers=1, latent_channels=2, initial_filters=4, blocks_per_layer=1,
                    dropout_p=0.0, free_bits=0.0, input_patch_size=(8, 8))
    model = build_model(cfg, seed=0).double()
    model.set_normalization(50.0, 20.0)
    model.train()
    n_params = count_parameters(model)
    x = torch.from_numpy(np.random.default_rng(1).uniform(0, 100, (2, 1, 8, 8)))
    nm = GaussianNoiseModel(10.0)

    def loss():
        return hdn_loss(x, model(x, rng_seed=5), nm, free_bits=0.0).total

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    numeric = torch.empty_like(analytic)
    h = 1e-6
    i = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = loss().item()
                flat[j] = orig - h
                down = loss().item()
                flat[j] = orig
                numeric[i] = (up - down) / (2 * h)
                i += 1
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-6)
    rel = ((analytic - numeric).abs() / scale).max().item()
    acceptance(2, n_params <= 5000 and rel < 1e-2,
               f"{n_params} parameters, max relative gradient error {rel:.2e} (< 1e-2)")


# 3 ----------------------------------------------------------------------------

def test_criterion_3_decomposition_identity(acceptance):
    rng = np.random.default_rng(3)
    worst_identity = 0.0
    for _ in range(20):
        n = int(rng.integers(4, 33))
        m = int(rng.integers(2, 33))
        A = rng.normal(size=(m, n))
        fm = LinearForwardModel(A, lam=float(rng.uniform(0.01, 2.0)))
        s = rng.normal(size=n) * 10
        e_sigma = float(rng.uniform(0, 1))
        y = measure(fm, s, e_sigma, seed=int(rng.integers(1 << 31)))
        e = y - fm.apply(s)
        lhs = tikhonov_reconstruct(fm, y) - s
        worst_identity = max(worst_identity, np.abs(lhs - structured_residual(fm, s, e)).max())
    worst_exact = 0.0
    for _ in range(20):
        n = int(rng.integers(4, 33))
        A = rng.normal(size=(n + int(rng.integers(0, 8)), n))
        fm = LinearForwardModel(A, lam=0.0)
        s = rng.normal(size=n)
        worst_exact = max(worst_exact, np.abs(structured_residual(fm, s, np.zeros(A.shape[0]))).max())
    acceptance(3, worst_identity <= 1e-6 and worst_exact <= 1e-8,
               f"identity error {worst_identity:.1e} (<= 1e-6); full-rank noiseless residual "
               f"{worst_exact:.1e} (<= 1e-8)")


# 4 ----------------------------------------------------------------------------

def test_criterion_4_free_bits(acceptance):
    g = torch.Generator().manual_seed(4)
    x = torch.rand(2, 1, 8, 8, generator=g) * 100
    signal = (x + torch.randn(x.shape, generator=g)).requires_grad_()
    layers, leaves = [], []
    for i, shift in enumerate((1e-3, 2.0)):  # layer 1 below, layer 2 above the threshold
        shape = (2, 2, 8 // 2 ** i, 8 // 2 ** i)
        p_mu, p_sigma = torch.zeros(shape), torch.ones(shape)
        q_mu = (torch.zeros(shape) + shift).requires_grad_()
        q_sigma = torch.ones(shape).requires_grad_()
        kl = kl_diag_gaussians(q_mu, q_sigma, p_mu, p_sigma)
        layers.append(LatentLayer(p_mu, p_sigma, q_mu, LayerMode.POSTERIOR, q_mu, q_sigma, kl))
        leaves.append((q_mu, q_sigma))
    lb = hdn_loss(x, DecoderOutput(signal, layers), GaussianNoiseModel(5.0), free_bits=1.0)
    lb.total.backward()
    below_zero = all(torch.all(t.grad == 0) for t in leaves[0])
    above_live = bool(leaves[1][0].grad.abs().sum() > 0)
    expected = lb.reconstruction + sum(free_bits_clamp(l.kl.mean(), 1.0) / 64 for l in layers)
    additive = abs(lb.total.item() - expected.item())
    raw_below = lb.kl_per_layer[0].item() * 64
    acceptance(4, below_zero and above_live and additive <= 1e-6,
               f"layer KL {raw_below:.3f} nats < 1.0: gradient exactly zero = {below_zero}; "
               f"layer above threshold keeps gradient = {above_live}; |total - sum| = {additive:.1e}")


# 5, 9 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def blob_model():
    clean_range = 200.0
    sigma = 0.2 * clean_range
    data = dict(kind="blobs", count=200, size=64, seed=0, noise_sigma=sigma)
    model, ds = trained_model("blobs", data, n_layers=3, steps=5000, noise_sigma=sigma)
    assert abs(ds.data_range - clean_range) / clean_range < 0.05
    rows = []
    for i in range(190, 200):
        s = sample_denoised(model, ds.noisy[i], k=100, seed=i)
        rng_ = ds.data_range
        rows.append((psnr(ds.clean[i], ds.noisy[i], rng_), psnr(ds.clean[i], mmse_estimate(s), rng_),
                     psnr(ds.clean[i], s.samples[0], rng_),
                     psnr(ds.clean[i], median_estimate(s), rng_)))
    return np.asarray(rows).mean(axis=0)


def test_criterion_5_toy_denoising(blob_model, acceptance):
    noisy, mmse, single, _ = blob_model
    acceptance(5, mmse >= noisy + 4 and mmse >= single,
               f"PSNR noisy {noisy:.2f} dB, MMSE-100 {mmse:.2f} dB (gain {mmse - noisy:.2f} >= 4), "
               f"single sample {single:.2f} dB")


def test_criterion_9_median_vs_mmse(blob_model, acceptance):
    _, mmse, _, median = blob_model
    acceptance(9, abs(median - mmse) <= 1.0 and mmse >= median,
               f"MMSE {mmse:.2f} dB, median {median:.2f} dB, difference {mmse - median:+.2f} dB")


# 6 ----------------------------------------------------------------------------

def test_criterion_6_diversity_trend(acceptance):
    medians = []
    for frac in (0.1, 0.2, 0.3):
        sigma = frac * 200.0
        data = dict(kind="blobs", count=100, size=64, seed=1, noise_sigma=sigma)
        per_seed = []
        for seed in range(3):
            model, ds = trained_model(f"div{frac}", data, n_layers=3, steps=1500,
                                      noise_sigma=sigma, seed=seed)
            vals = [diversity_map(sample_denoised(model, ds.noisy[i], k=20, seed=i)).mean()
                    for i in range(90, 95)]
            per_seed.append(float(np.mean(vals)))
        medians.append(float(np.median(per_seed)))
    ok = medians[0] < medians[1] < medians[2]
    acceptance(6, ok, "median mean diversity at sigma 0.1/0.2/0.3 x range: "
                      + " < ".join(f"{m:.2f}" for m in medians))


# 7, 8 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def striped_model():
    return trained_model("striped", STRIPED, n_layers=STRIPED["n_layers"], steps=STRIPED_STEPS,
                         noise_sigma=STRIPED["noise_sigma"])


def test_criterion_7_structured_noise_removal(striped_model, acceptance):
    model, ds = striped_model
    n = model.n_layers
    stats = {}
    for spec in (f"1-{n}", f"3-{n}"):
        ac, ps = [], []
        for i in range(190, 200):
            est = mmse_estimate(denoise_deactivated(model, ds.noisy[i], spec, k=30, seed=i))
            ac.append(stripe_correlation(est - ds.clean[i], lag=8, axis=1))
            ps.append(psnr(ds.clean[i], est, ds.data_range))
        stats[spec] = (float(np.mean(ac)), float(np.mean(ps)))
    (ac_full, ps_full), (ac_deact, ps_deact) = stats[f"1-{n}"], stats[f"3-{n}"]
    reduction = 1 - ac_deact / ac_full
    ok = ac_full >= 0.3 and reduction >= 0.5 and ps_deact - ps_full >= 1.0
    acceptance(7, ok, f"lag-8 row autocorrelation 1-{n}: {ac_full:.2f} (>= 0.3), 3-{n}: "
                      f"{ac_deact:.2f} (reduction {100 * reduction:.0f}% >= 50%); PSNR "
                      f"{ps_full:.2f} -> {ps_deact:.2f} dB (gain >= 1)")


def test_criterion_8_layer_visualisation(striped_model, acceptance):
    model, _ = striped_model
    n = model.n_layers
    frac = {i: high_frequency_fraction(visualize_layer(model, i, 6, seed=3, dims=(64, 64),
                                                       return_grid=False))
            for i in range(1, n + 1)}
    ok = frac[1] >= 0.6 and frac[2] >= 0.6 and frac[n] <= 0.4
    acceptance(8, ok, "share of across-variant energy above Nyquist/4: "
                      + ", ".join(f"layer {i} {v:.2f}" for i, v in frac.items())
                      + " (layers 1-2 >= 0.60, top <= 0.40)")


# 10 ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path, monkeypatch, capsys, acceptance):
    cfg = HdnConfig(n_layers=2, latent_channels=2, initial_filters=8, blocks_per_layer=1,
                    dropout_p=0.2, input_patch_size=(16, 16))
    model = build_model(cfg, seed=0)
    model.set_normalization(100.0, 50.0)
    save_checkpoint(tmp_path / "m.npz", model)
    loaded = load_checkpoint(tmp_path / "m.npz").model
    x = torch.rand(2, 1, 16, 16) * 200
    model.eval()
    loaded.eval()
    with torch.no_grad():
        bitwise = torch.equal(model(x, rng_seed=1).signal, loaded(x, rng_seed=1).signal)

    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.yaml").write_text(
        "model:\n  n_layers: 2\n  latent_channels: 2\n  initial_filters: 4\n"
        "  blocks_per_layer: 1\ntrain:\n  total_steps: 4\n  batch_size: 2\n  patch_size: 16\n")
    commands = [
        (["make-data", "--kind", "striped_blobs", "--count", "4", "--size", "32", "--out", "data"],
         "data/manifest.json"),
        (["calibrate-noise", "--noisy", "data/noisy", "--clean", "data/clean", "--kind", "gmm",
          "--iters", "3", "--out", "nm.json"], "nm.json.manifest.json"),
        (["train", "--config", "tiny.yaml", "--data", "data/noisy", "--noise-model", "nm.json",
          "--out", "run"], "run/manifest.json"),
        (["denoise", "--checkpoint", "run/last.npz", "--in", "data/noisy", "--samples", "3",
          "--estimator", "median", "--diversity-out", "div", "--out", "den"], "den/manifest.json"),
        (["generate", "--checkpoint", "run/last.npz", "--size", "32x32", "--count", "2",
          "--out", "gen"], "gen/manifest.json"),
        (["inspect-layers", "--checkpoint", "run/last.npz", "--layer", "1", "--out", "grid.tif"],
         "grid.tif.manifest.json"),
        (["autocorr", "--in", "data/noisy/img_00000.tif", "--gt", "data/clean/img_00000.tif",
          "--max-lag", "8", "--out", "ac.tif"], "ac.tif.manifest.json"),
        (["evaluate", "--gt", "data/clean", "--pred", "data/noisy", "--out", "rep.csv"],
         "rep.csv.manifest.json"),
    ]
    replayed = []
    for argv, manifest in commands:
        first = cli_main(argv) == 0 and Path(manifest).exists()
        again = cli_main(["replay", "--manifest", manifest]) == 0
        replayed.append(first and again)
    capsys.readouterr()
    ok = bitwise and all(replayed)
    acceptance(10, ok, f"checkpoint round-trip bitwise = {bitwise}; "
                       f"{sum(replayed)}/{len(replayed)} CLI manifests replay bit-identically")


# 11 ---------------------------------------------------------------------------

def test_criterion_11_noise_calibration(acceptance):
    ds = make_toy_dataset("blobs", 120, size=64, seed=11, noise_sigma=25.0)
    gmm = fit_gmm(ds.noisy[:100], ds.clean[:100], k=3, degree=2, iters=30, seed=0)
    s_grid = np.linspace(40, 200, 9)
    x_grid = np.linspace(-200, 450, 26001)
    sig = []
    for s in s_grid:
        dens = np.exp(gmm.log_likelihood(x_grid, np.full_like(x_grid, s)))
        dens /= np.trapezoid(dens, x_grid)
        mean = np.trapezoid(x_grid * dens, x_grid)
        sig.append(math.sqrt(np.trapezoid((x_grid - mean) ** 2 * dens, x_grid)))
    sigma_err = max(abs(v - 25.0) / 25.0 for v in sig)

    hist = fit_histogram(ds.noisy[:100], ds.clean[:100])
    x_test, s_test = ds.noisy[100:], ds.clean[100:]
    ll_hist = float(np.mean(hist.log_likelihood(x_test, s_test)))
    ll_true = float(np.mean(-0.5 * ((x_test - s_test) / 25.0) ** 2
                            - math.log(25.0 * math.sqrt(2 * math.pi))))
    ll_err = abs(ll_hist - ll_true) / abs(ll_true)
    acceptance(11, sigma_err <= 0.05 and ll_err <= 0.02,
               f"GMM std over signal levels {min(sig):.2f}..{max(sig):.2f} (worst error "
               f"{100 * sigma_err:.1f}% <= 5%); histogram held-out log-likelihood {ll_hist:.4f} vs "
               f"analytic {ll_true:.4f} ({100 * ll_err:.2f}% <= 2%)")

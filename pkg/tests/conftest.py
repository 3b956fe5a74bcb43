"""Session fixtures for the acceptance suite.

Each fixture builds a seeded synthetic dataset and (where needed) trains a
small model once per session; every arm derives its RNG streams from a root
seed plus a stable tag, so single tests reproduce the same numbers as the
full run.
"""

import time

import numpy as np
import pytest
import torch

from divnoise import data, noise_models, segmentation, synthetic, training, vae
from divnoise.seeding import derive_seed

PHANTOM_ROOT = 5152
GLYPH_ROOT = 90210
PATCH = 28
CONSENSUS_SIGMA = 70.0
CONSENSUS_RADIUS = 3
COLEARN_LAW = (14.0, 900.0)


@pytest.fixture()
def check(request):
    """Print one PASS/FAIL line per criterion (past any output capture), then
    enforce it."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _check(cid: int, ok: bool, detail: str) -> None:
        line = f"criterion {cid:02d}: {'PASS' if ok else 'FAIL'} - {detail}"
        with capman.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)
        assert ok, line

    return _check


def train_phantom_arm(clean_train, tag, *, sigma=None, beta=1.0, depth=1,
                      mode="divnoising", sigma_min=None, var_law=None,
                      epochs=200, kl_anneal=5, base_features=16):
    """Corrupt the clean stack, then train one model arm; all randomness is
    keyed on (PHANTOM_ROOT, tag)."""
    rng = np.random.default_rng(derive_seed(PHANTOM_ROOT, f"corrupt-{tag}"))
    if var_law is None:
        noisy = clean_train + rng.normal(0, sigma, clean_train.shape)
    else:
        a, b = var_law
        noisy = clean_train + rng.normal(0, 1, clean_train.shape) * np.sqrt(a * clean_train + b)
    stack = data.ImageStack([im.astype(np.float32) for im in noisy])
    stats = data.compute_stats(stack)
    tr, va = data.extract_patches(stack, PATCH, 0.1, derive_seed(PHANTOM_ROOT, f"split-{tag}"))
    if mode == "divnoising":
        nmod = noise_models.GaussianNoiseModel(sigma)
    else:
        nmod = noise_models.LinearVarianceModel(0.0, stats.std**2, sigma_min)
    arch = vae.ArchitectureConfig(
        depth=depth, base_features=base_features, latent_dims_per_position=8, mode=mode
    )
    torch.manual_seed(derive_seed(PHANTOM_ROOT, f"init-{tag}"))
    model = vae.VaeModel(arch, stats, nmod)
    cfg = training.TrainConfig(
        batch_size=32, beta=beta, kl_anneal_epochs=kl_anneal,
        early_stop_patience_epochs=30, lr_patience_epochs=12,
        max_steps=len(tr.patches) * epochs,
        seed=derive_seed(PHANTOM_ROOT, f"train-{tag}"),
    )
    training.train(model, tr, va, cfg)
    return model


def corrupt_phantom_eval(eval_clean, sigma, tag):
    rng = np.random.default_rng(derive_seed(PHANTOM_ROOT, f"eval-corrupt-{tag}"))
    return (eval_clean + rng.normal(0, sigma, eval_clean.shape)).astype(np.float32)


@pytest.fixture(scope="session")
def phantom_set():
    """320 membrane phantoms: 120 for training arms, 200 held out with labels."""
    images, labels = synthetic.membrane_phantoms(
        320, size=64, seed=PHANTOM_ROOT, brightness=(190.0, 250.0),
        membrane_intensity=10.0,
    )
    return {
        "train_clean": images[:120],
        "eval_clean": images[120:],
        "eval_labels": labels[120:],
    }


@pytest.fixture(scope="session")
def beta_arm_models(phantom_set):
    """Three depth-1 arms at sigma=30 with beta in {0.1, 1, 10}."""
    train = phantom_set["train_clean"]
    return {
        beta: train_phantom_arm(train, f"s30-b{beta}", sigma=30.0, beta=beta, depth=1)
        for beta in (0.1, 1.0, 10.0)
    }


@pytest.fixture(scope="session")
def sigma_arm_models(phantom_set):
    """Three depth-2 arms at beta=1 with sigma in {30, 50, 70}."""
    train = phantom_set["train_clean"]
    return {
        sigma: train_phantom_arm(train, f"d2-s{sigma:.0f}", sigma=sigma, beta=1.0, depth=2)
        for sigma in (30.0, 50.0, 70.0)
    }


@pytest.fixture(scope="session")
def glyph_bundle():
    """28x28 stroke glyphs at sigma=140: a depth-2 model trained for 40 epochs
    plus the 200-image held-out evaluation pair."""
    sigma = 140.0
    clean = synthetic.glyph_images(1340, size=28, seed=GLYPH_ROOT)
    clean_train, clean_eval = clean[:1140], clean[1140:]
    rng = np.random.default_rng(derive_seed(GLYPH_ROOT, "corrupt-train"))
    noisy_train = (clean_train + rng.normal(0, sigma, clean_train.shape)).astype(np.float32)
    stack = data.ImageStack(list(noisy_train))
    stats = data.compute_stats(stack)
    tr, va = data.extract_patches(stack, 28, 0.1, derive_seed(GLYPH_ROOT, "split"))
    arch = vae.ArchitectureConfig(depth=2, base_features=16, latent_dims_per_position=8)
    torch.manual_seed(derive_seed(GLYPH_ROOT, "init"))
    model = vae.VaeModel(arch, stats, noise_models.GaussianNoiseModel(sigma))
    cfg = training.TrainConfig(
        batch_size=32, beta=1.0, kl_anneal_epochs=5, early_stop_patience_epochs=30,
        lr_patience_epochs=12, max_steps=len(tr.patches) * 40,
        seed=derive_seed(GLYPH_ROOT, "train"),
    )
    t0 = time.perf_counter()
    training.train(model, tr, va, cfg)
    train_seconds = time.perf_counter() - t0
    rng = np.random.default_rng(derive_seed(GLYPH_ROOT, "corrupt-eval"))
    noisy_eval = (clean_eval + rng.normal(0, sigma, clean_eval.shape)).astype(np.float32)
    return {
        "model": model,
        "clean_eval": clean_eval,
        "noisy_eval": noisy_eval,
        "sigma": sigma,
        "train_seconds": train_seconds,
    }


@pytest.fixture(scope="session")
def c11_bundle(phantom_set, sigma_arm_models):
    """Model arm plus segmentation settings for the consensus study."""
    if CONSENSUS_SIGMA in sigma_arm_models:
        model = sigma_arm_models[CONSENSUS_SIGMA]
    else:
        model = train_phantom_arm(
            phantom_set["train_clean"], f"d2-s{CONSENSUS_SIGMA:.0f}",
            sigma=CONSENSUS_SIGMA, beta=1.0, depth=2,
        )
    seg_cfg = segmentation.SegPipelineConfig(mean_filter_radius=CONSENSUS_RADIUS)
    return model, CONSENSUS_SIGMA, seg_cfg


@pytest.fixture(scope="session")
def colearn_model():
    """Co-learned arm on wide-brightness phantoms corrupted with a known
    linear variance law; yields (model, clean stack, (a, b))."""
    a, b = COLEARN_LAW
    clean, _ = synthetic.membrane_phantoms(
        160, size=64, seed=PHANTOM_ROOT + 7, brightness=(30.0, 250.0),
        membrane_intensity=15.0,
    )
    model = train_phantom_arm(
        clean, "colearn7", mode="unsupervised_divnoising", sigma_min=5.0,
        var_law=(a, b), depth=1, epochs=300, kl_anneal=10,
    )
    return model, clean, (a, b)

"""PSNR-based evaluation, sample diversity, and the sweep drivers.

Diversity is quantified as the population standard deviation of per-sample
PSNR within one posterior sample set: a deterministic denoiser scores 0, and
wider posteriors score higher.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import inference
from .errors import DimensionError, DomainError, InputError
from .seeding import derive_seed

RANGE_MODES = ("gt_minmax_per_image", "fixed_255")


@dataclass
class PsnrConfig:
    range_mode: str = "gt_minmax_per_image"

    def __post_init__(self):
        if self.range_mode not in RANGE_MODES:
            raise InputError(f"range_mode must be one of {RANGE_MODES}, got '{self.range_mode}'")


def psnr(gt: np.ndarray, pred: np.ndarray, config: PsnrConfig | None = None) -> float:
    """20 * log10(range / RMSE); range is per-image ground-truth min-max span
    or the fixed 8-bit 255 depending on the config. Identical inputs give inf."""
    config = config if config is not None else PsnrConfig()
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise DimensionError(f"gt and prediction shapes differ: {gt.shape} vs {pred.shape}")
    if config.range_mode == "fixed_255":
        value_range = 255.0
    else:
        value_range = float(gt.max() - gt.min())
        if value_range <= 0:
            raise DomainError("constant ground truth has no min-max range; use fixed_255")
    rmse = float(np.sqrt(np.mean(np.square(gt - pred))))
    if rmse == 0.0:
        return float("inf")
    return 20.0 * np.log10(value_range / rmse)


def diversity_std_psnr(gt: np.ndarray, samples, config: PsnrConfig | None = None) -> float:
    """Population std of per-sample PSNR over a sample set (K >= 2)."""
    arr = samples.samples if isinstance(samples, inference.SampleSet) else np.asarray(samples)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise InputError(f"need a (K>=2, H, W) sample stack, got shape {arr.shape}")
    values = np.array([psnr(gt, s, config) for s in arr])
    return float(np.std(values))


def evaluate_denoising(
    model, noisy_images, gt_images, n_samples: int, seed: int,
    config: PsnrConfig | None = None,
) -> dict:
    """Per-image input PSNR, MMSE PSNR and diversity, plus their means."""
    noisy = np.asarray(noisy_images, dtype=np.float32)
    gt = np.asarray(gt_images, dtype=np.float32)
    if noisy.shape != gt.shape or noisy.ndim != 3:
        raise DimensionError(
            f"noisy and gt must be matching (N, H, W) stacks, got {noisy.shape} vs {gt.shape}"
        )
    rows = []
    for i in range(noisy.shape[0]):
        ss = inference.sample_posterior(model, noisy[i], n_samples, derive_seed(seed, f"eval-{i}"))
        rows.append(
            {
                "image": i,
                "input_psnr": psnr(gt[i], noisy[i], config),
                "mmse_psnr": psnr(gt[i], inference.mmse(ss), config),
                "diversity": diversity_std_psnr(gt[i], ss, config),
            }
        )
    return {
        "rows": rows,
        "mean_input_psnr": float(np.mean([r["input_psnr"] for r in rows])),
        "mean_mmse_psnr": float(np.mean([r["mmse_psnr"] for r in rows])),
        "mean_diversity": float(np.mean([r["diversity"] for r in rows])),
    }


def beta_sweep(
    betas,
    model_factory,
    train_patches,
    val_patches,
    train_config,
    eval_noisy,
    eval_gt,
    n_samples: int,
    seed: int,
    psnr_config: PsnrConfig | None = None,
) -> list:
    """Train one model per beta (identical seeds and init via model_factory)
    and evaluate each; returns one row dict per beta."""
    from . import training  # local import: trainer depends on vae, not on evaluation

    rows = []
    for beta in betas:
        model = model_factory()
        cfg = replace(train_config, beta=float(beta))
        report = training.train(model, train_patches, val_patches, cfg)
        result = evaluate_denoising(model, eval_noisy, eval_gt, n_samples, seed, psnr_config)
        rows.append(
            {
                "beta": float(beta),
                "mmse_psnr": result["mean_mmse_psnr"],
                "diversity": result["mean_diversity"],
                "input_psnr": result["mean_input_psnr"],
                "best_epoch": report.best_epoch,
                "stop_reason": report.stop_reason,
            }
        )
    return rows


def noise_diversity_study(
    sigmas,
    model_factory,
    clean_train,
    clean_val,
    clean_eval,
    train_config,
    n_samples: int,
    seed: int,
    psnr_config: PsnrConfig | None = None,
) -> list:
    """Corrupt the same clean data at each Gaussian sigma, train, and measure
    diversity. model_factory(sigma, stats) must return a fresh model whose
    noise model matches sigma and whose stats match the corrupted data."""
    from .data import DataStats

    rows = []
    for sigma in sigmas:
        rng = np.random.default_rng(derive_seed(seed, f"corrupt-{sigma}"))
        noisy_train = clean_train + rng.normal(0.0, sigma, clean_train.shape)
        noisy_val = clean_val + rng.normal(0.0, sigma, clean_val.shape)
        noisy_eval = clean_eval + rng.normal(0.0, sigma, clean_eval.shape)
        stats = DataStats(float(noisy_train.mean()), float(noisy_train.std()))
        model = model_factory(float(sigma), stats)
        from . import training

        training.train(
            model, noisy_train.astype(np.float32), noisy_val.astype(np.float32), train_config
        )
        result = evaluate_denoising(
            model, noisy_eval.astype(np.float32), clean_eval, n_samples, seed, psnr_config
        )
        rows.append(
            {
                "sigma": float(sigma),
                "mmse_psnr": result["mean_mmse_psnr"],
                "diversity": result["mean_diversity"],
                "input_psnr": result["mean_input_psnr"],
            }
        )
    return rows


def write_rows_csv(path, rows) -> None:
    if not rows:
        raise InputError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def plot_metric(path, rows, x_key: str, y_keys, title: str) -> None:
    """Line plot of one or more row columns against x_key (log x for beta)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [row[x_key] for row in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in y_keys:
        ax.plot(xs, [row[key] for row in rows], marker="o", label=key)
    if x_key == "beta":
        ax.set_xscale("log")
    ax.set_xlabel(x_key)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

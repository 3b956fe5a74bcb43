"""Command-line pipeline entry point.

One YAML config file describes a run (data, noise model, architecture,
training, inference, evaluation, segmentation, sweeps). Environment variables
prefixed DIVNOISE_ override file values (DIVNOISE_TRAIN__BATCH_SIZE=16 sets
train.batch_size), and repeatable --set SECTION.KEY=VALUE flags override both.
All randomness derives from the single top-level seed via labeled hashing, so
re-running a subcommand with the same config reproduces its outputs bit for
bit. Exit codes: 0 ok, 2 config/input error, 3 runtime or divergence error.
"""

import contextlib
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import data as data_mod
from . import evaluation, inference, noise_models, segmentation, training, vae
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DivnoiseError,
    FormatError,
    InputError,
)
from .seeding import derive_seed

ENV_PREFIX = "DIVNOISE_"
NOISE_MODES = ("gaussian", "gmm", "colearn", "bootstrap_self", "none")


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class DataConfig:
    path: str = ""
    format: str = "array_container"
    gt_path: str | None = None
    gt_format: str | None = None
    patch_size: int = 64
    val_fraction: float = 0.1
    holdout_images: int = 0  # tail images reserved as the evaluation set
    corruption: data_mod.CorruptionSpec | None = None

    def __post_init__(self):
        if self.patch_size < 1:
            raise InputError("data.patch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InputError("data.val_fraction must lie in [0, 1)")
        if self.holdout_images < 0:
            raise InputError("data.holdout_images must be >= 0")


@dataclass
class NoiseConfig:
    mode: str = "gaussian"
    sigma: float = 0.0
    file: str | None = None
    calibration_path: str | None = None
    calibration_format: str = "tiff_stack"
    sigma_min: float = 50.0
    components: int = 3
    coeffs: int = 2
    iterations: int = 2000
    learning_rate: float = 0.1
    batch_size: int = 65536

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise InputError(f"noise.mode must be one of {NOISE_MODES}, got '{self.mode}'")

    def gmm_fit_config(self, seed: int) -> noise_models.GmmFitConfig:
        return noise_models.GmmFitConfig(
            n_components=self.components,
            n_coeffs=self.coeffs,
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=seed,
        )


@dataclass
class InferenceSpec:
    n_samples: int = 100
    tile: int = 0
    margin: int = 24
    map_output: bool = False
    window: int = 10
    overlap: int = 3
    initial_bandwidth: float = 200.0
    bandwidth_decay: float = 0.9
    final_bandwidth: float = 100.0
    cluster_bandwidth: float = 800.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise InputError("inference.n_samples must be >= 1")
        if self.tile < 0 or self.margin < 0:
            raise InputError("inference.tile and inference.margin must be >= 0")

    def mean_shift_config(self) -> inference.MeanShiftConfig:
        return inference.MeanShiftConfig(
            window=self.window,
            overlap=self.overlap,
            initial_bandwidth=self.initial_bandwidth,
            bandwidth_decay=self.bandwidth_decay,
            final_bandwidth=self.final_bandwidth,
            cluster_bandwidth=self.cluster_bandwidth,
        )


@dataclass
class EvalSpec:
    range_mode: str = "gt_minmax_per_image"

    def psnr_config(self) -> evaluation.PsnrConfig:
        return evaluation.PsnrConfig(range_mode=self.range_mode)


@dataclass
class SegSpec:
    mean_filter_radius: int = 15
    connectivity: int = 4
    consensus_samples: int = 30

    def pipeline_config(self) -> segmentation.SegPipelineConfig:
        return segmentation.SegPipelineConfig(
            mean_filter_radius=self.mean_filter_radius,
            connectivity=self.connectivity,
            consensus_samples=self.consensus_samples,
        )


@dataclass
class SweepSpec:
    betas: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    sigmas: list = field(default_factory=lambda: [30.0, 50.0, 70.0])

    def __post_init__(self):
        self.betas = [float(b) for b in self.betas]
        self.sigmas = [float(s) for s in self.sigmas]
        if not self.betas or not self.sigmas:
            raise InputError("sweep.betas and sweep.sigmas must be non-empty")


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/run"
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    arch: vae.ArchitectureConfig = field(default_factory=vae.ArchitectureConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    inference: InferenceSpec = field(default_factory=InferenceSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seg: SegSpec = field(default_factory=SegSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)


_SECTIONS = {
    "data": DataConfig,
    "noise": NoiseConfig,
    "arch": vae.ArchitectureConfig,
    "train": training.TrainConfig,
    "inference": InferenceSpec,
    "eval": EvalSpec,
    "seg": SegSpec,
    "sweep": SweepSpec,
}


def _construct(cls, mapping: dict, where: str):
    """Strictly build a config dataclass: unknown keys are errors."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) under '{where}': {', '.join(unknown)}")
    try:
        return cls(**mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' config: {exc}") from exc


def build_run_config(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    tree = dict(tree)
    kwargs = {}
    if "seed" in tree:
        kwargs["seed"] = int(tree.pop("seed"))
    if "run_dir" in tree:
        kwargs["run_dir"] = str(tree.pop("run_dir"))
    for name, cls in _SECTIONS.items():
        sub = tree.pop(name, None)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
        sub = dict(sub)
        if name == "data":
            corruption = sub.pop("corruption", None)
            cfg = _construct(cls, sub, name)
            if corruption is not None:
                if not isinstance(corruption, dict):
                    raise ConfigError("data.corruption must be a mapping")
                cfg.corruption = _construct(
                    data_mod.CorruptionSpec, corruption, "data.corruption"
                )
            kwargs[name] = cfg
        else:
            kwargs[name] = _construct(cls, sub, name)
    if tree:
        raise ConfigError(f"unknown top-level config key(s): {', '.join(sorted(tree))}")
    return RunConfig(**kwargs)


def _merge_path(tree: dict, parts: list, value) -> None:
    node = tree
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def _env_overrides(environ) -> list:
    out = []
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX) :].split("__") if p]
        if not parts:
            raise ConfigError(f"cannot parse override variable '{key}'")
        out.append((parts, environ[key], key))
    return out


def _parse_scalar(raw: str, where: str):
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for '{where}': {exc}") from exc


def load_config(path, environ=None, overrides=()) -> RunConfig:
    """Parse YAML, then apply DIVNOISE_* environment overrides, then --set
    overrides (most specific wins)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")

    environ = os.environ if environ is None else environ
    for parts, raw, origin in _env_overrides(environ):
        _merge_path(tree, parts, _parse_scalar(raw, origin))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got '{item}'")
        _merge_path(tree, key.strip().lower().split("."), _parse_scalar(raw, key))
    return build_run_config(tree)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


# ---------------------------------------------------------------------------
# Shared command plumbing


@contextlib.contextmanager
def run_directory(run_dir):
    """Create the run directory and hold its lock file for the command."""
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"run directory {path} is locked by another process; "
            f"remove {lock} if that process is gone"
        ) from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _execute(body):
    try:
        body()
    except (ConfigError, FormatError) as exc:
        _fail(str(exc), 2)
    except (InputError, ValueError) as exc:
        _fail(str(exc), 2)
    except FileNotFoundError as exc:
        _fail(str(exc), 2)
    except DivergenceError as exc:
        _fail(str(exc), 3)
    except DivnoiseError as exc:
        _fail(str(exc), 3)


def _config_options(fn):
    fn = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="SECTION.KEY=VALUE",
        help="Override a config value (repeatable).",
    )(fn)
    fn = click.option(
        "--config",
        "-c",
        "config_path",
        required=True,
        type=click.Path(exists=True, dir_okay=False),
        help="YAML run configuration.",
    )(fn)
    return fn


def _require(value, message: str):
    if value in (None, ""):
        raise ConfigError(message)
    return value


def _load_input_stack(cfg: RunConfig, name="input") -> data_mod.ImageStack:
    """Load cfg.data.path and apply the corruption spec (seeded from the root
    seed) when one is configured, so train/denoise/evaluate see identical
    noisy pixels."""
    _require(cfg.data.path, "data.path is required")
    stack = data_mod.load_stack(cfg.data.path, cfg.data.format, name)
    if cfg.data.corruption is not None:
        stack = data_mod.corrupt(stack, cfg.data.corruption, derive_seed(cfg.seed, "corrupt"))
    return stack


def _load_gt_stack(cfg: RunConfig) -> data_mod.ImageStack:
    _require(cfg.data.gt_path, "data.gt_path is required for this command")
    fmt = cfg.data.gt_format or cfg.data.format
    return data_mod.load_stack(cfg.data.gt_path, fmt, "ground truth")


def _noise_model_for_training(cfg: RunConfig, stats: data_mod.DataStats):
    """Resolve the configured noise-model spec for cmd_train; returns None for
    vanilla mode."""
    noise = cfg.noise
    mode = noise.mode
    arch_mode = cfg.arch.mode
    if mode == "none":
        if arch_mode != "vanilla":
            raise ConfigError("noise.mode 'none' is only valid with arch.mode 'vanilla'")
        return None
    if arch_mode == "vanilla":
        raise ConfigError("arch.mode 'vanilla' requires noise.mode 'none'")
    if mode == "colearn":
        if arch_mode != "unsupervised_divnoising":
            raise ConfigError("noise.mode 'colearn' requires arch.mode 'unsupervised_divnoising'")
        # start from a signal-independent guess: all data variance is noise
        return noise_models.LinearVarianceModel(
            0.0, stats.std**2, noise.sigma_min, metadata={"source": "colearn init"}
        )
    if arch_mode != "divnoising":
        raise ConfigError(f"noise.mode '{mode}' requires arch.mode 'divnoising'")
    if mode == "gaussian":
        if noise.sigma <= 0:
            raise ConfigError("noise.mode 'gaussian' requires noise.sigma > 0")
        return noise_models.GaussianNoiseModel(noise.sigma)
    # gmm / bootstrap_self: a fitted DNNM file, or calibration data to fit now
    if noise.file:
        return noise_models.load_noise_model(
            _existing_path(noise.file, "noise.file")
        )
    if mode == "bootstrap_self":
        raise ConfigError(
            "noise.mode 'bootstrap_self' requires noise.file produced by "
            "'divnoise fit-noise' with a co-learned checkpoint"
        )
    if not noise.calibration_path:
        raise ConfigError("noise.mode 'gmm' requires noise.file or noise.calibration_path")
    calib = _load_calibration(cfg)
    return noise_models.fit_gmm(calib, noise.gmm_fit_config(derive_seed(cfg.seed, "noise-fit")))


def _load_calibration(cfg: RunConfig) -> noise_models.CalibrationStack:
    path = _existing_path(cfg.noise.calibration_path, "noise.calibration_path")
    stack = data_mod.load_stack(path, cfg.noise.calibration_format, "calibration")
    return noise_models.CalibrationStack(stack.images)


def _existing_path(path, what: str):
    if not path or not Path(path).exists():
        raise ConfigError(f"{what} does not exist: {path!r}")
    return path


def _fresh_model(cfg: RunConfig, stats, noise_model) -> vae.VaeModel:
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    return vae.VaeModel(cfg.arch, stats, noise_model)


def _sample_one(model, image, cfg: RunConfig, seed: int) -> inference.SampleSet:
    spec = cfg.inference
    h, w = image.shape
    if spec.tile > 0 and (h > spec.tile or w > spec.tile):
        return inference.denoise_tiled(
            model, image, spec.tile, spec.margin, spec.n_samples, seed
        )
    return inference.sample_posterior(model, image, spec.n_samples, seed)


def _save_float_tiff(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.float32), mode="F").save(path)


def _print_rows(rows) -> None:
    for row in rows:
        click.echo("  " + "  ".join(f"{k}={_fmt(v)}" for k, v in row.items()))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------------------
# Subcommands


@click.group()
@click.version_option(package_name="divnoise")
def main():
    """Unsupervised diverse denoising: noise-model fitting, VAE training,
    posterior sampling, evaluation, and segmentation fusion."""


@main.command("fit-noise")
@_config_options
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Co-learned checkpoint (required for noise.mode=bootstrap_self).",
)
def fit_noise(config_path, overrides, checkpoint):
    """Fit or materialize a pixel noise model and write a DNNM file."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        with run_directory(cfg.run_dir) as run_dir:
            out_path = run_dir / "noise_model.dnnm"
            mode = cfg.noise.mode
            if mode == "gaussian":
                if cfg.noise.sigma <= 0:
                    raise ConfigError("noise.mode 'gaussian' requires noise.sigma > 0")
                model = noise_models.GaussianNoiseModel(cfg.noise.sigma)
                noise_models.save_noise_model(out_path, model)
                click.echo(f"wrote gaussian noise model (sigma={cfg.noise.sigma}) to {out_path}")
                return
            if mode == "gmm":
                if not cfg.noise.calibration_path:
                    raise ConfigError("noise.mode 'gmm' requires noise.calibration_path")
                calib = _load_calibration(cfg)
                fit_cfg = cfg.noise.gmm_fit_config(derive_seed(cfg.seed, "noise-fit"))
                model = noise_models.fit_gmm(calib, fit_cfg)
                signal = calib.signal_estimate
                ll = noise_models.log_likelihood(
                    model,
                    calib.observations,
                    np.broadcast_to(signal, calib.observations.shape),
                ).mean()
                noise_models.save_noise_model(out_path, model)
                click.echo(f"wrote gmm noise model to {out_path}")
                click.echo(f"fit log-likelihood: {ll:.6f} nats/pixel")
                return
            if mode == "bootstrap_self":
                if checkpoint is None:
                    raise ConfigError(
                        "noise.mode 'bootstrap_self' needs --checkpoint pointing at a "
                        "co-learned model"
                    )
                model = vae.load_checkpoint(checkpoint)
                stack = _load_input_stack(cfg)
                denoised = np.stack(
                    [
                        inference.mmse(
                            _sample_one(
                                model, img, cfg, derive_seed(cfg.seed, f"bootstrap-{i}")
                            )
                        )
                        for i, img in enumerate(stack.images)
                    ]
                )
                fit_cfg = cfg.noise.gmm_fit_config(derive_seed(cfg.seed, "noise-fit"))
                refit = noise_models.fit_gmm_pixels(stack.images, denoised, fit_cfg)
                refit.metadata["source"] = "bootstrap (self)"
                ll = noise_models.log_likelihood(refit, stack.images, denoised).mean()
                noise_models.save_noise_model(out_path, refit)
                click.echo(f"wrote bootstrap (self) noise model to {out_path}")
                click.echo(f"fit log-likelihood: {ll:.6f} nats/pixel")
                return
            raise ConfigError(
                f"noise.mode '{mode}' has no standalone fit; 'colearn' is trained by "
                f"'divnoise train' and 'none' means vanilla mode"
            )

    _execute(body)


@main.command("train")
@_config_options
def train_cmd(config_path, overrides):
    """Train a model; writes checkpoint.dnck plus CSV/JSON reports."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        with run_directory(cfg.run_dir) as run_dir:
            stack = _load_input_stack(cfg, "training data")
            stats = data_mod.compute_stats(stack)
            train_set, val_set = data_mod.extract_patches(
                stack, cfg.data.patch_size, cfg.data.val_fraction, derive_seed(cfg.seed, "split")
            )
            noise_model = _noise_model_for_training(cfg, stats)
            model = _fresh_model(cfg, stats, noise_model)
            click.echo(
                f"model: mode={cfg.arch.mode} depth={cfg.arch.depth} "
                f"parameters={vae.count_parameters(model)}"
            )
            train_cfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
            report = training.train(model, train_set, val_set, train_cfg)
            ck_path = run_dir / "checkpoint.dnck"
            vae.save_checkpoint(
                ck_path,
                model,
                extra={
                    "stop_reason": report.stop_reason,
                    "best_epoch": report.best_epoch,
                    "best_val_total": report.best_val_total,
                    "presentations": report.presentations,
                },
            )
            report.to_csv(run_dir / "train_report.csv")
            report.to_json(run_dir / "train_report.json")
            save_config(cfg, run_dir / "resolved_config.yaml")
            click.echo(
                f"stopped after epoch {len(report.records)} ({report.stop_reason}); "
                f"best val loss {report.best_val_total:.6f} at epoch {report.best_epoch}"
            )
            if cfg.arch.mode == "unsupervised_divnoising":
                a, b = model.colearned_raw_ab()
                click.echo(f"co-learned variance: a={a:.6g} b={b:.6g}")
            click.echo(f"wrote {ck_path}")
            if report.stop_reason == "diverged":
                raise DivergenceError(
                    "training diverged; the best checkpoint before divergence was written"
                )

    _execute(body)


@main.command("denoise")
@_config_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--input", "input_path", type=click.Path(exists=True), default=None)
@click.option("--map", "want_map", is_flag=True, default=False, help="Also write MAP estimates.")
def denoise_cmd(config_path, overrides, checkpoint, input_path, want_map):
    """Draw posterior samples and write them with the MMSE (and MAP) images."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        with run_directory(cfg.run_dir) as run_dir:
            ck = checkpoint or run_dir / "checkpoint.dnck"
            model = vae.load_checkpoint(_existing_path(ck, "checkpoint"))
            if input_path is not None:
                stack = data_mod.load_stack(input_path, cfg.data.format, "input")
                if cfg.data.corruption is not None:
                    stack = data_mod.corrupt(
                        stack, cfg.data.corruption, derive_seed(cfg.seed, "corrupt")
                    )
            else:
                stack = _load_input_stack(cfg)
            samples_dir = run_dir / "samples"
            mmse_dir = run_dir / "mmse"
            samples_dir.mkdir(exist_ok=True)
            mmse_dir.mkdir(exist_ok=True)

            mmse_stack = []
            map_stack = []
            t0 = time.perf_counter()
            for i, image in enumerate(stack.images):
                try:
                    ss = _sample_one(model, image, cfg, derive_seed(cfg.seed, f"denoise-{i}"))
                except DimensionError as exc:
                    raise InputError(
                        f"{exc}; set inference.tile/inference.margin to denoise "
                        f"oversized images in windows"
                    ) from exc
                data_mod.save_array_container(samples_dir / f"img_{i:03d}.arr", ss.samples)
                est = inference.mmse(ss)
                mmse_stack.append(est)
                _save_float_tiff(mmse_dir / f"img_{i:03d}.tiff", est)
                if want_map or cfg.inference.map_output:
                    map_stack.append(inference.map_estimate(ss, cfg.inference.mean_shift_config()))
            elapsed = time.perf_counter() - t0

            data_mod.save_array_container(run_dir / "mmse.arr", np.stack(mmse_stack))
            if map_stack:
                data_mod.save_array_container(run_dir / "map.arr", np.stack(map_stack))
            log = {
                "n_images": len(stack.images),
                "n_samples": cfg.inference.n_samples,
                "seconds_total": elapsed,
                "seconds_per_image": elapsed / len(stack.images),
                "map": bool(map_stack),
            }
            (run_dir / "denoise_log.json").write_text(json.dumps(log, indent=2))
            click.echo(
                f"drew {cfg.inference.n_samples} samples for {len(stack.images)} image(s) "
                f"in {elapsed:.2f} s ({log['seconds_per_image']:.2f} s/image)"
            )
            click.echo(f"wrote {run_dir / 'mmse.arr'}")

    _execute(body)


@main.command("evaluate")
@_config_options
@click.option("--pred", type=click.Path(exists=True, dir_okay=False), default=None)
def evaluate_cmd(config_path, overrides, pred):
    """Score predictions against ground truth; writes eval.csv."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        with run_directory(cfg.run_dir) as run_dir:
            gt = _load_gt_stack(cfg)
            pred_path = pred or run_dir / "mmse.arr"
            predictions = data_mod.load_array_container(_existing_path(pred_path, "--pred"))
            noisy = _load_input_stack(cfg)
            if len(predictions) != len(gt.images):
                raise InputError(
                    f"prediction stack has {len(predictions)} images, "
                    f"ground truth has {len(gt.images)}"
                )
            psnr_cfg = cfg.eval.psnr_config()
            samples_dir = run_dir / "samples"
            rows = []
            for i in range(len(gt.images)):
                row = {
                    "image": i,
                    "input_psnr": evaluation.psnr(gt.images[i], noisy.images[i], psnr_cfg),
                    "mmse_psnr": evaluation.psnr(gt.images[i], predictions[i], psnr_cfg),
                }
                sample_file = samples_dir / f"img_{i:03d}.arr"
                if sample_file.exists():
                    samples = data_mod.load_array_container(sample_file)
                    row["diversity"] = evaluation.diversity_std_psnr(
                        gt.images[i], samples, psnr_cfg
                    )
                rows.append(row)
            evaluation.write_rows_csv(run_dir / "eval.csv", rows)
            _print_rows(rows)
            click.echo(
                f"mean input PSNR {np.mean([r['input_psnr'] for r in rows]):.3f} dB, "
                f"mean MMSE PSNR {np.mean([r['mmse_psnr'] for r in rows]):.3f} dB"
            )

    _execute(body)


@main.command("generate")
@_config_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--n-samples", "-K", "n_samples", type=int, default=None)
@click.option("--shape", nargs=2, type=int, default=None, help="Output H W.")
def generate_cmd(config_path, overrides, checkpoint, n_samples, shape):
    """Decode prior draws into images; writes a sample grid PNG."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        with run_directory(cfg.run_dir) as run_dir:
            ck = checkpoint or run_dir / "checkpoint.dnck"
            model = vae.load_checkpoint(_existing_path(ck, "checkpoint"))
            k = n_samples or cfg.inference.n_samples
            hw = tuple(shape) if shape else (cfg.data.patch_size, cfg.data.patch_size)
            ss = inference.generate_from_prior(model, hw, k, derive_seed(cfg.seed, "generate"))
            out_dir = run_dir / "generated"
            out_dir.mkdir(exist_ok=True)
            data_mod.save_array_container(out_dir / "samples.arr", ss.samples)

            cols = math.ceil(math.sqrt(k))
            rows = math.ceil(k / cols)
            grid = np.zeros((rows * hw[0], cols * hw[1]), dtype=np.float32)
            for i, img in enumerate(ss.samples):
                r, c = divmod(i, cols)
                grid[r * hw[0] : (r + 1) * hw[0], c * hw[1] : (c + 1) * hw[1]] = img
            lo, hi = float(grid.min()), float(grid.max())
            scale = 255.0 / (hi - lo) if hi > lo else 0.0
            from PIL import Image

            Image.fromarray(((grid - lo) * scale).astype(np.uint8), mode="L").save(
                out_dir / "grid.png"
            )
            click.echo(f"wrote {k} generated samples and {out_dir / 'grid.png'}")

    _execute(body)


@main.command("segment")
@_config_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option(
    "--consensus",
    type=click.Choice(["avg", "none"]),
    default="avg",
    help="'avg' fuses posterior samples; 'none' segments the input directly.",
)
@click.option("--n-samples", "-K", "n_samples", type=int, default=None)
def segment_cmd(config_path, overrides, checkpoint, consensus, n_samples):
    """Segment inputs (optionally via posterior-sample consensus)."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        with run_directory(cfg.run_dir) as run_dir:
            seg_cfg = cfg.seg.pipeline_config()
            stack = _load_input_stack(cfg)
            gt_labels = None
            if cfg.data.gt_path:
                gt = _load_gt_stack(cfg)
                gt_labels = [np.asarray(im, dtype=np.int32) for im in gt.images]
            out_dir = run_dir / "segmentation"
            out_dir.mkdir(exist_ok=True)
            k = n_samples or cfg.seg.consensus_samples
            model = None
            sample_cfg = cfg
            if consensus == "avg":
                ck = checkpoint or run_dir / "checkpoint.dnck"
                model = vae.load_checkpoint(_existing_path(ck, "checkpoint"))
                sample_cfg = dataclasses.replace(
                    cfg, inference=dataclasses.replace(cfg.inference, n_samples=k)
                )
            rows = []
            for i, image in enumerate(stack.images):
                if consensus == "avg":
                    ss = _sample_one(
                        model, image, sample_cfg, derive_seed(cfg.seed, f"segment-{i}")
                    )
                    fused = segmentation.consensus_avg(ss, seg_cfg)
                    row = {"image": i}
                    if gt_labels is not None:
                        gt_map = segmentation.LabelMap(gt_labels[i])
                        per_sample = [
                            segmentation.seg_score(segmentation.segment(s, seg_cfg), gt_map)
                            for s in ss.samples
                        ]
                        row["consensus_score"] = segmentation.seg_score(fused, gt_map)
                        row["mean_sample_score"] = float(np.mean(per_sample))
                    data_mod.save_array_container(
                        out_dir / f"labels_img_{i:03d}.arr", [fused.labels.astype(np.float32)]
                    )
                    rows.append(row)
                else:
                    label_map = segmentation.segment(image, seg_cfg)
                    row = {"image": i, "instances": label_map.n_instances}
                    if gt_labels is not None:
                        row["score"] = segmentation.seg_score(
                            label_map, segmentation.LabelMap(gt_labels[i])
                        )
                    data_mod.save_array_container(
                        out_dir / f"labels_img_{i:03d}.arr", [label_map.labels.astype(np.float32)]
                    )
                    rows.append(row)
            evaluation.write_rows_csv(out_dir / "scores.csv", rows)
            _print_rows(rows)
            click.echo(f"wrote label maps and {out_dir / 'scores.csv'}")

    _execute(body)


def _sweep_data(cfg: RunConfig):
    """Clean-stack split shared by the sweep commands: tail images are the
    evaluation set, the rest become train/val patches."""
    stack = data_mod.load_stack(cfg.data.path, cfg.data.format, "clean data")
    holdout = cfg.data.holdout_images
    if holdout < 1:
        raise ConfigError("sweeps need data.holdout_images >= 1 for evaluation")
    if holdout >= len(stack.images):
        raise ConfigError(
            f"data.holdout_images={holdout} leaves no training images "
            f"(stack has {len(stack.images)})"
        )
    train_stack = data_mod.ImageStack(stack.images[:-holdout], stack.name)
    eval_clean = stack.images[-holdout:]
    return train_stack, eval_clean


@main.command("beta-sweep")
@_config_options
def beta_sweep_cmd(config_path, overrides):
    """Train at each sweep.betas value and tabulate PSNR and diversity."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        if cfg.data.corruption is None:
            raise ConfigError("beta-sweep needs data.corruption (data.path must be clean)")
        with run_directory(cfg.run_dir) as run_dir:
            train_clean, eval_clean = _sweep_data(cfg)
            noisy = data_mod.corrupt(
                data_mod.ImageStack(
                    list(train_clean.images) + list(eval_clean), train_clean.name
                ),
                cfg.data.corruption,
                derive_seed(cfg.seed, "corrupt"),
            )
            n_eval = len(eval_clean)
            noisy_train = data_mod.ImageStack(noisy.images[:-n_eval], noisy.name)
            eval_noisy = np.stack(noisy.images[-n_eval:])
            eval_gt = np.stack(eval_clean)
            stats = data_mod.compute_stats(noisy_train)
            train_set, val_set = data_mod.extract_patches(
                noisy_train, cfg.data.patch_size, cfg.data.val_fraction,
                derive_seed(cfg.seed, "split"),
            )
            noise_model = _noise_model_for_training(cfg, stats)
            train_cfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
            rows = evaluation.beta_sweep(
                cfg.sweep.betas,
                lambda: _fresh_model(cfg, stats, noise_model),
                train_set,
                val_set,
                train_cfg,
                eval_noisy,
                eval_gt,
                cfg.inference.n_samples,
                derive_seed(cfg.seed, "eval"),
                cfg.eval.psnr_config(),
            )
            evaluation.write_rows_csv(run_dir / "beta_sweep.csv", rows)
            evaluation.plot_metric(
                run_dir / "beta_sweep.png", rows, "beta", ["mmse_psnr", "diversity"],
                "beta sweep",
            )
            _print_rows(rows)
            click.echo(f"wrote {run_dir / 'beta_sweep.csv'}")

    _execute(body)


@main.command("diversity-study")
@_config_options
def diversity_study_cmd(config_path, overrides):
    """Corrupt the clean data at each sweep.sigmas level, train, and measure
    sample diversity."""

    def body():
        cfg = load_config(config_path, overrides=overrides)
        with run_directory(cfg.run_dir) as run_dir:
            train_clean, eval_clean = _sweep_data(cfg)
            train_set, val_set = data_mod.extract_patches(
                train_clean, cfg.data.patch_size, cfg.data.val_fraction,
                derive_seed(cfg.seed, "split"),
            )

            def factory(sigma, stats):
                torch.manual_seed(derive_seed(cfg.seed, "init"))
                return vae.VaeModel(
                    cfg.arch, stats, noise_models.GaussianNoiseModel(sigma)
                )

            if cfg.arch.mode != "divnoising":
                raise ConfigError("diversity-study requires arch.mode 'divnoising'")
            train_cfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
            rows = evaluation.noise_diversity_study(
                cfg.sweep.sigmas,
                factory,
                train_set.patches,
                val_set.patches,
                np.stack(eval_clean),
                train_cfg,
                cfg.inference.n_samples,
                derive_seed(cfg.seed, "eval"),
                cfg.eval.psnr_config(),
            )
            evaluation.write_rows_csv(run_dir / "diversity_study.csv", rows)
            evaluation.plot_metric(
                run_dir / "diversity_study.png", rows, "sigma", ["diversity", "mmse_psnr"],
                "noise level vs diversity",
            )
            _print_rows(rows)
            click.echo(f"wrote {run_dir / 'diversity_study.csv'}")

    _execute(body)


if __name__ == "__main__":
    main()

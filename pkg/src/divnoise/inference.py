"""Posterior sampling and the estimators built on top of it.

A trained model induces a posterior over clean signals; everything here
consumes i.i.d. decoder samples of that posterior: MMSE (sample mean), MAP
(annealed mean-shift mode seeking over overlapping windows), representative
solution clustering, prior sampling, and margin-based tiling for images larger
than memory or the divisibility constraint allows.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import vae
from .errors import DimensionError, InputError
from .seeding import derive_seed


@dataclass
class SampleSet:
    """K posterior samples of one image, raw units, shape (K, H, W)."""

    samples: np.ndarray
    source_shape: tuple
    seed: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 3:
            raise DimensionError(f"samples must be (K, H, W), got {self.samples.shape}")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class MeanShiftConfig:
    """Mean-shift settings for MAP and clustering.

    MAP runs per window (``window`` x ``window`` tiles, ``overlap`` pixels of
    feathered overlap), seeded at the sample mean, with a flat kernel whose
    bandwidth anneals from ``initial_bandwidth`` by ``bandwidth_decay`` while
    it stays >= ``final_bandwidth``. Clustering runs on whole images with the
    fixed ``cluster_bandwidth``.
    """

    window: int = 10
    overlap: int = 3
    initial_bandwidth: float = 200.0
    bandwidth_decay: float = 0.9
    final_bandwidth: float = 100.0
    cluster_bandwidth: float = 800.0
    cluster_max_iters: int = 20
    cluster_seeds: int = 100

    def __post_init__(self):
        if self.window < 1:
            raise InputError("window must be >= 1")
        if not 0 <= self.overlap < self.window:
            raise InputError("overlap must satisfy 0 <= overlap < window")
        if not self.final_bandwidth > 0:
            raise InputError("final_bandwidth must be > 0")
        if self.initial_bandwidth < self.final_bandwidth:
            raise InputError("initial_bandwidth must be >= final_bandwidth")
        if not 0 < self.bandwidth_decay < 1:
            raise InputError("bandwidth_decay must lie in (0, 1)")
        if self.cluster_bandwidth <= 0 or self.cluster_max_iters < 1 or self.cluster_seeds < 1:
            raise InputError("cluster settings must be positive")


def bandwidth_schedule(initial: float, decay: float, final: float) -> list:
    """Bandwidths actually executed: initial * decay**n while >= final."""
    out = []
    bw = initial
    while bw >= final:
        out.append(bw)
        bw *= decay
    return out


def _as_samples(obj) -> np.ndarray:
    arr = obj.samples if isinstance(obj, SampleSet) else np.asarray(obj)
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise InputError(f"expected a non-empty (K, H, W) sample stack, got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def _check_divisible(model: vae.VaeModel, shape) -> None:
    factor = model.arch.downsample_factor
    if shape[0] % factor or shape[1] % factor:
        raise DimensionError(
            f"image shape {tuple(shape)} is not divisible by {factor}; "
            "use denoise_tiled with a compatible tile size"
        )


def _decode_signal_chunks(model, make_z, n_samples, chunk=64):
    outs = []
    with torch.no_grad():
        was_training = model.training
        model.eval()
        done = 0
        while done < n_samples:
            take = min(chunk, n_samples - done)
            dec = model.decode(make_z(take))
            outs.append(dec.signal[:, 0].to(torch.float32).cpu().numpy())
            done += take
        if was_training:
            model.train()
    return np.concatenate(outs, axis=0)


def sample_posterior(model: vae.VaeModel, x: np.ndarray, n_samples: int, seed: int) -> SampleSet:
    """Draw n_samples decoder outputs from q(z | x).

    The image is encoded once; each sample reparameterizes a fresh z. On a
    vanilla-mode model the decoded per-pixel means are returned. The model is
    left unmodified.
    """
    if n_samples < 1:
        raise InputError(f"n_samples must be >= 1, got {n_samples}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {x.shape}")
    _check_divisible(model, x.shape)

    dtype = next(model.parameters()).dtype
    xt = torch.from_numpy(x).to(dtype).reshape(1, 1, *x.shape)
    gen = torch.Generator().manual_seed(seed & 0x7FFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        code = model.encode(model.normalize(xt))
    mu, log_var = code.mu, code.log_var

    def make_z(take):
        eps = torch.empty((take,) + mu.shape[1:], dtype=dtype).normal_(generator=gen)
        return mu + torch.exp(0.5 * log_var) * eps

    samples = _decode_signal_chunks(model, make_z, n_samples)
    return SampleSet(samples=samples, source_shape=tuple(x.shape), seed=seed)


def generate_from_prior(model: vae.VaeModel, shape, n_samples: int, seed: int) -> SampleSet:
    """Decode n_samples latents drawn from the prior N(0, I) at the latent
    resolution implied by ``shape``."""
    if n_samples < 1:
        raise InputError(f"n_samples must be >= 1, got {n_samples}")
    h, w = int(shape[0]), int(shape[1])
    _check_divisible(model, (h, w))
    factor = model.arch.downsample_factor
    latent_shape = (model.arch.latent_dims_per_position, h // factor, w // factor)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed & 0x7FFF_FFFF_FFFF_FFFF)

    def make_z(take):
        return torch.empty((take,) + latent_shape, dtype=dtype).normal_(generator=gen)

    samples = _decode_signal_chunks(model, make_z, n_samples)
    return SampleSet(samples=samples, source_shape=(h, w), seed=seed)


def mmse(samples) -> np.ndarray:
    """Pixel-wise mean over the sample stack (the MMSE estimate)."""
    return _as_samples(samples).mean(axis=0).astype(np.float32)


def _mean_shift_converge(vectors, start, bandwidth, max_iters=200, tol_factor=1e-4):
    """Iterate flat-kernel mean shift from ``start`` until the move is tiny."""
    current = start
    bw_sq = bandwidth * bandwidth
    for _ in range(max_iters):
        dist_sq = np.square(vectors - current).sum(axis=1)
        mask = dist_sq <= bw_sq
        if not mask.any():
            break
        nxt = vectors[mask].mean(axis=0)
        move = float(np.sqrt(np.square(nxt - current).sum()))
        current = nxt
        if move <= tol_factor * bandwidth:
            break
    return current


def _annealed_mode(vectors, config: MeanShiftConfig):
    """Mean-shift mode with decaying bandwidth, seeded at the sample mean.

    Returns (mode vector, last bandwidth executed)."""
    current = vectors.mean(axis=0)
    last_bw = None
    for bw in bandwidth_schedule(
        config.initial_bandwidth, config.bandwidth_decay, config.final_bandwidth
    ):
        current = _mean_shift_converge(vectors, current, bw)
        last_bw = bw
    return current, last_bw


def _tile_grid(size, window, stride):
    positions = list(range(0, size - window + 1, stride))
    if positions[-1] != size - window:
        positions.append(size - window)
    return positions


def _map_tiles(samples: np.ndarray, config: MeanShiftConfig):
    """Yield (row, col, window, mode_tile, vectors, last_bandwidth) per tile."""
    k, h, w = samples.shape
    win = min(config.window, h, w)
    stride = max(win - config.overlap, 1)
    for r in _tile_grid(h, win, stride):
        for c in _tile_grid(w, win, stride):
            vectors = samples[:, r : r + win, c : c + win].reshape(k, -1)
            mode, last_bw = _annealed_mode(vectors, config)
            yield r, c, win, mode.reshape(win, win), vectors, last_bw


def _feather_profile(window, overlap):
    ramp = np.minimum(
        np.minimum(np.arange(window) + 1, window - np.arange(window)) / (overlap + 1), 1.0
    )
    return ramp


def map_estimate(samples, config: MeanShiftConfig | None = None) -> np.ndarray:
    """Approximate posterior mode.

    Runs annealed flat-kernel mean shift over each overlapping window of the
    sample stack (seeded at the window's sample mean) and stitches the window
    modes with linear feathering across the overlap.
    """
    config = config if config is not None else MeanShiftConfig()
    arr = _as_samples(samples)
    _, h, w = arr.shape
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for r, c, win, tile, _, _ in _map_tiles(arr, config):
        profile = _feather_profile(win, min(config.overlap, win - 1))
        weight = np.outer(profile, profile)
        num[r : r + win, c : c + win] += weight * tile
        den[r : r + win, c : c + win] += weight
    return (num / den).astype(np.float32)


@dataclass
class Cluster:
    center: np.ndarray
    members: int


def cluster_solutions(samples, config: MeanShiftConfig | None = None) -> list:
    """Group whole-image samples into representative solutions.

    The first ``cluster_seeds`` samples seed fixed-bandwidth mean shift
    (at most ``cluster_max_iters`` iterations each); converged points closer
    than half the bandwidth are merged. Returns clusters ordered by member
    count (members = number of seeds absorbed; counts sum to the seed count).
    """
    config = config if config is not None else MeanShiftConfig()
    arr = _as_samples(samples)
    k, h, w = arr.shape
    if k < config.cluster_seeds:
        raise InputError(
            f"need at least cluster_seeds={config.cluster_seeds} samples, got {k}"
        )
    vectors = arr.reshape(k, -1)
    seeds = vectors[: config.cluster_seeds]

    converged = [
        _mean_shift_converge(
            vectors, seed, config.cluster_bandwidth, max_iters=config.cluster_max_iters
        )
        for seed in seeds
    ]

    merge_dist = config.cluster_bandwidth / 2.0
    centers = []
    counts = []
    for point in converged:
        for i, center in enumerate(centers):
            if np.sqrt(np.square(point - center).sum()) < merge_dist:
                counts[i] += 1
                break
        else:
            centers.append(point)
            counts.append(1)

    order = sorted(range(len(centers)), key=lambda i: (-counts[i], i))
    return [
        Cluster(center=centers[i].reshape(h, w).astype(np.float32), members=counts[i])
        for i in order
    ]


def denoise_tiled(
    model: vae.VaeModel, x: np.ndarray, tile: int, margin: int, n_samples: int, seed: int
) -> SampleSet:
    """Sample the posterior tile by tile for images too large to encode whole.

    Each tile is sampled with ``margin`` pixels of reflected context on every
    side (tile + 2*margin must be divisible by the model's downsample factor);
    only tile centers are stitched. An image no larger than one tile falls
    through to a single sample_posterior call.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {x.shape}")
    h, w = x.shape
    if h <= tile and w <= tile:
        return sample_posterior(model, x, n_samples, seed)
    if h < tile or w < tile:
        raise InputError(
            f"tile {tile} exceeds image shape {x.shape} along one axis; "
            "shrink the tile or denoise untiled"
        )
    if margin < 0:
        raise InputError("margin must be >= 0")
    factor = model.arch.downsample_factor
    if (tile + 2 * margin) % factor:
        raise DimensionError(
            f"tile + 2*margin = {tile + 2 * margin} must be divisible by {factor}"
        )

    padded = np.pad(x, margin, mode="reflect")
    out = np.empty((n_samples, h, w), dtype=np.float32)
    for r in _tile_grid(h, tile, tile):
        for c in _tile_grid(w, tile, tile):
            window = padded[r : r + tile + 2 * margin, c : c + tile + 2 * margin]
            tile_seed = derive_seed(seed, f"tile-{r}-{c}")
            ss = sample_posterior(model, window, n_samples, tile_seed)
            out[:, r : r + tile, c : c + tile] = ss.samples[
                :, margin : margin + tile, margin : margin + tile
            ]
    return SampleSet(samples=out, source_shape=(h, w), seed=seed)

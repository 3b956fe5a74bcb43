"""Fully convolutional VAE with noise-model reconstruction likelihoods.

The encoder maps a normalized image to a per-position diagonal Gaussian over
latent space (latent_dims_per_position channels at 1/2**depth resolution); the
decoder maps a latent sample back to a signal estimate in normalized units.
This module is the single place where unit conversion happens: ``decode``
returns raw-unit signals (signal = signal_norm * std + mean), and ``loss``
evaluates the reconstruction likelihood in raw units against raw inputs.

Three operating modes:

* "divnoising": the reconstruction term is -sum log p_NM(x|s) under a fixed,
  externally supplied pixel noise model.
* "unsupervised_divnoising": same, but the noise model is a co-learned
  linear-variance Gaussian whose (a, b) receive gradients with the weights.
* "vanilla": the decoder predicts per-pixel mean and variance itself.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import _binio
from .data import DataStats
from .errors import DimensionError, DivergenceError, FormatError, InputError
from .noise_models import (
    LinearVarianceModel,
    PixelNoiseModel,
    deserialize_noise_model,
    serialize_noise_model,
)

MAGIC = b"DNCK"
FORMAT_VERSION = 1

MODES = ("divnoising", "vanilla", "unsupervised_divnoising")
LOG_VAR_CLAMP = 20.0


@dataclass
class ArchitectureConfig:
    depth: int = 2
    base_features: int = 32
    latent_dims_per_position: int = 64
    conv_kernel: int = 3
    pool: int = 2
    mode: str = "divnoising"
    padding_mode: str = "zeros"

    def __post_init__(self):
        if self.depth < 1:
            raise InputError(f"depth must be >= 1, got {self.depth}")
        if self.base_features < 1 or self.latent_dims_per_position < 1:
            raise InputError("base_features and latent_dims_per_position must be >= 1")
        if self.conv_kernel % 2 != 1:
            raise InputError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.pool != 2:
            raise InputError(f"only pool=2 is supported, got {self.pool}")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.padding_mode not in ("zeros", "circular"):
            raise InputError(f"padding_mode must be 'zeros' or 'circular', got '{self.padding_mode}'")

    @property
    def downsample_factor(self) -> int:
        return self.pool**self.depth


@dataclass
class LatentCode:
    """Per-position diagonal Gaussian over latent space, shape (B, L, h, w)."""

    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass
class DecodedOutput:
    """Decoder output in raw intensity units.

    variance is None in divnoising mode, the co-learned clamped affine
    variance in unsupervised mode, and the predicted per-pixel variance in
    vanilla mode.
    """

    signal: torch.Tensor
    variance: torch.Tensor | None = None


class VaeModel(nn.Module):
    def __init__(
        self,
        arch: ArchitectureConfig,
        data_stats: DataStats | None = None,
        noise_model: PixelNoiseModel | None = None,
    ):
        super().__init__()
        self.arch = arch
        self.data_stats = data_stats if data_stats is not None else DataStats(0.0, 1.0)

        if arch.mode == "divnoising":
            if noise_model is None:
                raise InputError("divnoising mode requires a pixel noise model")
            self.noise_model = noise_model
        elif arch.mode == "unsupervised_divnoising":
            if not isinstance(noise_model, LinearVarianceModel):
                raise InputError(
                    "unsupervised_divnoising mode requires a LinearVarianceModel "
                    "carrying the initial (a, b) and sigma_min"
                )
            self.noise_model = noise_model
            self.sigma_min = noise_model.sigma_min
        else:
            if noise_model is not None:
                raise InputError("vanilla mode predicts its own variance; no noise model")
            self.noise_model = None

        k = arch.conv_kernel
        pmode = arch.padding_mode

        def conv(c_in, c_out, kernel=k):
            return nn.Conv2d(
                c_in, c_out, kernel, padding=kernel // 2 if kernel > 1 else 0,
                padding_mode=pmode if kernel > 1 else "zeros",
            )

        widths = [arch.base_features * 2**i for i in range(arch.depth)]
        bottleneck = widths[-1]
        latent = arch.latent_dims_per_position

        blocks = []
        c_in = 1
        for width in widths:
            blocks.append(
                nn.Sequential(
                    conv(c_in, width), nn.ReLU(),
                    conv(width, width), nn.ReLU(),
                    nn.MaxPool2d(arch.pool),
                )
            )
            c_in = width
        self.enc_blocks = nn.ModuleList(blocks)
        self.mu_head = conv(bottleneck, latent, kernel=1)
        self.log_var_head = conv(bottleneck, latent, kernel=1)

        self.dec_in = nn.Sequential(conv(latent, bottleneck), nn.ReLU())
        dec_blocks = []
        for i in range(arch.depth - 1, 0, -1):
            width = widths[i]
            dec_blocks.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=arch.pool, mode="nearest"),
                    conv(width, width), nn.ReLU(),
                    conv(width, widths[i - 1]), nn.ReLU(),
                )
            )
        dec_blocks.append(
            nn.Sequential(
                nn.Upsample(scale_factor=arch.pool, mode="nearest"),
                conv(widths[0], widths[0]), nn.ReLU(),
                conv(widths[0], widths[0]), nn.ReLU(),
            )
        )
        self.dec_blocks = nn.ModuleList(dec_blocks)
        out_channels = 2 if arch.mode == "vanilla" else 1
        self.out_head = nn.Sequential(
            conv(widths[0], widths[0]), nn.ReLU(),
            conv(widths[0], out_channels),
        )

        if arch.mode == "unsupervised_divnoising":
            # (a, b) are learned in normalized-image units so Adam steps at the
            # configured lr can traverse them; the mapping to raw units is the
            # exact affine change of variables, clamp included.
            mean, std = self.data_stats.mean, self.data_stats.std
            if not std > 0:
                raise InputError("unsupervised mode needs data_stats with std > 0")
            a_norm = noise_model.a / std
            b_norm = (noise_model.b + noise_model.a * mean) / (std * std)
            self.noise_a = nn.Parameter(torch.tensor(float(a_norm)))
            self.noise_b = nn.Parameter(torch.tensor(float(b_norm)))

    # -- unit bridging ----------------------------------------------------

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        if not self.data_stats.std > 0:
            raise InputError("data_stats.std must be > 0 to normalize")
        return (x - self.data_stats.mean) / self.data_stats.std

    def denormalize(self, s_norm: torch.Tensor) -> torch.Tensor:
        return s_norm * self.data_stats.std + self.data_stats.mean

    # -- core passes -------------------------------------------------------

    def encode(self, x: torch.Tensor) -> LatentCode:
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"encode expects (B, 1, H, W), got shape {tuple(x.shape)}")
        factor = self.arch.downsample_factor
        if x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(
                f"input of shape {tuple(x.shape[2:])} is not divisible by {factor} "
                f"(depth {self.arch.depth}); pad, crop, or denoise in tiles"
            )
        h = x
        for block in self.enc_blocks:
            h = block(h)
        mu = self.mu_head(h)
        log_var = torch.clamp(self.log_var_head(h), -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        return LatentCode(mu=mu, log_var=log_var)

    def decode(self, z: torch.Tensor) -> DecodedOutput:
        latent = self.arch.latent_dims_per_position
        if z.ndim != 4 or z.shape[1] != latent:
            raise DimensionError(
                f"decode expects (B, {latent}, h, w) latent samples, got shape {tuple(z.shape)}"
            )
        h = self.dec_in(z)
        for block in self.dec_blocks:
            h = block(h)
        out = self.out_head(h)
        s_norm = out[:, :1]
        std = self.data_stats.std
        if self.arch.mode == "vanilla":
            var_norm = nn.functional.softplus(out[:, 1:2]) + 1e-6
            return DecodedOutput(self.denormalize(s_norm), var_norm * std * std)
        if self.arch.mode == "unsupervised_divnoising":
            floor = self.sigma_min**2 / (std * std)
            var_norm = torch.clamp(
                self.noise_a * s_norm + self.noise_b,
                min=torch.as_tensor(floor, dtype=s_norm.dtype),
            )
            return DecodedOutput(self.denormalize(s_norm), var_norm * std * std)
        return DecodedOutput(self.denormalize(s_norm), None)

    # -- noise-model views ---------------------------------------------------

    def colearned_raw_ab(self) -> tuple[float, float]:
        if self.arch.mode != "unsupervised_divnoising":
            raise InputError("co-learned (a, b) exist only in unsupervised_divnoising mode")
        mean, std = self.data_stats.mean, self.data_stats.std
        a = float(self.noise_a.detach()) * std
        b = float(self.noise_b.detach()) * std * std - a * mean
        return a, b

    def fitted_noise_model(self) -> PixelNoiseModel | None:
        """The noise model inference should use: the live co-learned model in
        unsupervised mode, the configured model otherwise, None for vanilla."""
        if self.arch.mode == "unsupervised_divnoising":
            a, b = self.colearned_raw_ab()
            return LinearVarianceModel(a, b, self.sigma_min, metadata={"colearned": True})
        return self.noise_model


def encode(model: VaeModel, x: torch.Tensor) -> LatentCode:
    return model.encode(x)


def decode(model: VaeModel, z: torch.Tensor) -> DecodedOutput:
    return model.decode(z)


def reparameterize(code: LatentCode, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw z = mu + exp(log_var / 2) * eps with eps ~ N(0, I)."""
    eps = torch.empty_like(code.mu).normal_(generator=generator)
    return code.mu + torch.exp(0.5 * code.log_var) * eps


def kl_divergence(code: LatentCode) -> torch.Tensor:
    """Closed-form KL(q || N(0, I)), summed over batch, dims and positions."""
    return 0.5 * torch.sum(
        code.mu**2 + torch.exp(code.log_var) - 1.0 - code.log_var
    )


def reconstruction_nll(
    noise_model: PixelNoiseModel | None,
    x: torch.Tensor,
    s: torch.Tensor,
    variance: torch.Tensor | None = None,
) -> torch.Tensor:
    """-sum_i log p(x_i | s_i) in raw units.

    With ``variance`` given (vanilla / co-learned paths), the per-pixel
    likelihood is Gaussian with that variance; otherwise the supplied noise
    model is evaluated.
    """
    if x.shape != s.shape:
        raise DimensionError(f"x and s shapes differ: {tuple(x.shape)} vs {tuple(s.shape)}")
    if variance is not None:
        nll = 0.5 * torch.log(2.0 * math.pi * variance) + (x - s) ** 2 / (2.0 * variance)
        return nll.sum()
    if noise_model is None:
        raise InputError("reconstruction_nll needs a noise model or explicit variances")
    return -noise_model.log_prob(x, s).sum()


def loss(
    model: VaeModel,
    x: torch.Tensor,
    beta: float = 1.0,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Single-sample training loss on a raw-unit batch.

    Returns (total, recon, kl), each a scalar tensor expressed per pixel:
    component sums divided by the batch's pixel count. total = recon + beta*kl.

    Raises:
        DivergenceError: any component is non-finite.
    """
    code = model.encode(model.normalize(x))
    z = reparameterize(code, generator)
    dec = model.decode(z)
    if dec.variance is not None:
        rec_sum = reconstruction_nll(None, x, dec.signal, variance=dec.variance)
    else:
        rec_sum = reconstruction_nll(model.noise_model, x, dec.signal)
    n = x.numel()
    recon = rec_sum / n
    kl = kl_divergence(code) / n
    total = recon + beta * kl
    if not bool(torch.isfinite(total)):
        raise DivergenceError(
            f"non-finite loss: recon={recon.detach().item():.6g}, "
            f"kl={kl.detach().item():.6g}, beta={beta}"
        )
    return total, recon, kl


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: VaeModel, extra: dict | None = None) -> None:
    """Write the DNCK checkpoint container.

    Layout: magic "DNCK", u16 version, JSON header (architecture, data stats,
    extra metadata), named float32 little-endian parameter blocks, then an
    optional embedded noise-model container.
    """
    header = {
        "arch": asdict(model.arch),
        "data_stats": [model.data_stats.mean, model.data_stats.std],
        "extra": extra or {},
    }
    if model.arch.mode == "unsupervised_divnoising":
        header["sigma_min"] = model.sigma_min
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")

    out = [MAGIC, _binio.u16(FORMAT_VERSION), _binio.u32(len(hbytes)), hbytes]
    state = model.state_dict()
    names = sorted(state.keys())
    out.append(_binio.u32(len(names)))
    for name in names:
        tensor = state[name].detach().cpu().to(torch.float32).numpy()
        nb = name.encode("utf-8")
        out.append(_binio.u16(len(nb)))
        out.append(nb)
        out.append(_binio.u8(tensor.ndim))
        for dim in tensor.shape:
            out.append(_binio.u32(dim))
        out.append(tensor.astype("<f4").tobytes())

    nm = model.fitted_noise_model()
    if nm is None:
        out.append(_binio.u8(0))
    else:
        nm_bytes = serialize_noise_model(nm)
        out.append(_binio.u8(1))
        out.append(_binio.u32(len(nm_bytes)))
        out.append(nm_bytes)

    from pathlib import Path

    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> VaeModel:
    """Rebuild a VaeModel (float32) from a DNCK container."""
    from pathlib import Path

    data = Path(path).read_bytes()
    r = _binio.Reader(data, f"checkpoint {path}")
    if r.take(4) != MAGIC:
        raise FormatError(f"checkpoint {path}: bad magic, expected DNCK")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise FormatError(
            f"checkpoint {path}: version mismatch, expected {FORMAT_VERSION}, found {version}"
        )
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    arch = ArchitectureConfig(**header["arch"])
    stats = DataStats(*header["data_stats"])

    blocks = {}
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        numel = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * numel), dtype="<f4").reshape(shape)
        blocks[name] = torch.from_numpy(arr.copy())

    noise_model = None
    if r.u8() == 1:
        noise_model = deserialize_noise_model(r.take(r.u32()))
    if arch.mode == "vanilla":
        noise_model = None
    elif noise_model is None:
        raise FormatError(f"checkpoint {path}: mode {arch.mode} requires an embedded noise model")

    model = VaeModel(arch, stats, noise_model)
    missing = sorted(set(model.state_dict()) ^ set(blocks))
    if missing:
        raise FormatError(f"checkpoint {path}: parameter blocks mismatch: {missing}")
    model.load_state_dict(blocks)
    return model

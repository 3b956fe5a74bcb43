"""Pixel noise models: p_NM(x_i | s_i) evaluated independently per pixel.

Three variants share one interface:

* GaussianNoiseModel      -- fixed, signal-independent Gaussian.
* GmmNoiseModel           -- signal-dependent Gaussian mixture whose weights,
                             means and variances are polynomials in the
                             normalized signal, fitted to calibration data.
* LinearVarianceModel     -- Gaussian whose variance is affine in the signal,
                             clamped below; the co-learned variant trained
                             jointly with the network exports this type.

All likelihoods are evaluated in raw intensity units. ``log_prob`` takes torch
tensors (it must stay differentiable with respect to the signal during
training); ``log_likelihood`` is the numpy-facing wrapper.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _binio
from .errors import DimensionError, DomainError, FormatError, InputError

MAGIC = b"DNNM"
FORMAT_VERSION = 1

_KIND_CODES = {"gaussian": 1, "gmm": 2, "linear_variance": 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _poly_eval(coeffs: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Evaluate per-component polynomials with ascending coefficients.

    coeffs has shape (C, P); t has any shape. Returns (C,) + t.shape with
    value[k] = sum_p coeffs[k, p] * t**p.
    """
    out = coeffs[:, -1].reshape(-1, *([1] * t.ndim)).expand(-1, *t.shape).clone()
    for p in range(coeffs.shape[1] - 2, -1, -1):
        out = out * t + coeffs[:, p].reshape(-1, *([1] * t.ndim))
    return out


class PixelNoiseModel:
    """Interface shared by all noise models."""

    kind: str
    metadata: dict

    def log_prob(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class GaussianNoiseModel(PixelNoiseModel):
    """Signal-independent Gaussian noise with known standard deviation."""

    kind = "gaussian"

    def __init__(self, sigma: float, metadata: dict | None = None):
        if not sigma > 0:
            raise DomainError(f"sigma must be > 0, got {sigma}")
        self.sigma = float(sigma)
        self.metadata = dict(metadata or {})

    def log_prob(self, x, s):
        var = self.sigma * self.sigma
        return -0.5 * math.log(2.0 * math.pi * var) - (x - s) ** 2 / (2.0 * var)

    def __repr__(self):
        return f"GaussianNoiseModel(sigma={self.sigma})"


class LinearVarianceModel(PixelNoiseModel):
    """Gaussian noise with variance affine in the signal.

    variance(s) = max(a * s + b, sigma_min**2). The clamp keeps the likelihood
    finite where the affine part would turn non-positive.
    """

    kind = "linear_variance"

    def __init__(self, a: float, b: float, sigma_min: float, metadata: dict | None = None):
        if not sigma_min > 0:
            raise DomainError(f"sigma_min must be > 0, got {sigma_min}")
        self.a = float(a)
        self.b = float(b)
        self.sigma_min = float(sigma_min)
        self.metadata = dict(metadata or {})

    def variance(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.maximum(self.a * s + self.b, self.sigma_min**2)

    def log_prob(self, x, s):
        floor = torch.as_tensor(self.sigma_min**2, dtype=s.dtype, device=s.device)
        var = torch.clamp(self.a * s + self.b, min=floor)
        return -0.5 * torch.log(2.0 * math.pi * var) - (x - s) ** 2 / (2.0 * var)

    def __repr__(self):
        return (
            f"LinearVarianceModel(a={self.a:.6g}, b={self.b:.6g}, "
            f"sigma_min={self.sigma_min:.6g})"
        )


class GmmNoiseModel(PixelNoiseModel):
    """Signal-dependent Gaussian mixture.

    Each of the C components carries three degree-(P-1) polynomials in the
    normalized signal t = (s - lo) / (hi - lo): a weight logit (softmax across
    components), a mean in raw units, and a log-variance (exponentiated, then
    clamped at ``var_floor``).
    """

    kind = "gmm"

    def __init__(
        self,
        weight_coeffs,
        mean_coeffs,
        var_coeffs,
        signal_range,
        var_floor: float,
        metadata: dict | None = None,
    ):
        self.weight_coeffs = np.asarray(weight_coeffs, dtype=np.float64)
        self.mean_coeffs = np.asarray(mean_coeffs, dtype=np.float64)
        self.var_coeffs = np.asarray(var_coeffs, dtype=np.float64)
        shapes = {self.weight_coeffs.shape, self.mean_coeffs.shape, self.var_coeffs.shape}
        if len(shapes) != 1 or self.weight_coeffs.ndim != 2:
            raise DimensionError(
                "weight/mean/var coefficient arrays must share one (components, coeffs) shape"
            )
        lo, hi = float(signal_range[0]), float(signal_range[1])
        if not hi > lo:
            raise DomainError(f"signal_range must satisfy hi > lo, got ({lo}, {hi})")
        if not var_floor > 0:
            raise DomainError(f"var_floor must be > 0, got {var_floor}")
        self.signal_range = (lo, hi)
        self.var_floor = float(var_floor)
        self.metadata = dict(metadata or {})

    @property
    def n_components(self):
        return self.weight_coeffs.shape[0]

    @property
    def n_coeffs(self):
        return self.weight_coeffs.shape[1]

    def _component_params(self, s: torch.Tensor):
        lo, hi = self.signal_range
        t = (s - lo) / (hi - lo)
        kw = dict(dtype=s.dtype, device=s.device)
        logits = _poly_eval(torch.as_tensor(self.weight_coeffs, **kw), t)
        means = _poly_eval(torch.as_tensor(self.mean_coeffs, **kw), t)
        log_vars = _poly_eval(torch.as_tensor(self.var_coeffs, **kw), t)
        floor = torch.as_tensor(self.var_floor, **kw)
        variances = torch.clamp(torch.exp(log_vars), min=floor)
        return torch.log_softmax(logits, dim=0), means, variances

    def log_prob(self, x, s):
        log_w, means, variances = self._component_params(s)
        comp = (
            log_w
            - 0.5 * torch.log(2.0 * math.pi * variances)
            - (x.unsqueeze(0) - means) ** 2 / (2.0 * variances)
        )
        return torch.logsumexp(comp, dim=0)

    def component_curves(self, s: np.ndarray):
        """Evaluate (weights, means, variances) on a numpy signal grid, each of
        shape (C,) + s.shape. Convenience for inspection and tests."""
        with torch.no_grad():
            log_w, means, variances = self._component_params(
                torch.as_tensor(np.asarray(s, dtype=np.float64))
            )
        return log_w.exp().numpy(), means.numpy(), variances.numpy()

    def __repr__(self):
        return (
            f"GmmNoiseModel(components={self.n_components}, coeffs={self.n_coeffs}, "
            f"signal_range={self.signal_range})"
        )


@dataclass
class CalibrationStack:
    """Repeated observations of one static scene.

    observations is (M, H, W) with M >= 2; signal_estimate is filled by
    estimate_signal.
    """

    observations: np.ndarray
    signal_estimate: np.ndarray | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        if self.observations.ndim != 3:
            raise DimensionError(
                f"observations must be (M, H, W), got shape {self.observations.shape}"
            )
        if self.observations.shape[0] < 2:
            raise InputError(
                f"calibration needs at least 2 observations, got {self.observations.shape[0]}"
            )


def estimate_signal(calib: CalibrationStack) -> np.ndarray:
    """Pixel-wise mean of the calibration observations; stored on the stack."""
    est = calib.observations.astype(np.float64).mean(axis=0).astype(np.float32)
    calib.signal_estimate = est
    return est


@dataclass
class GmmFitConfig:
    """Settings for the gradient-based GMM fit."""

    n_components: int = 3
    n_coeffs: int = 2
    iterations: int = 2000
    learning_rate: float = 0.1
    batch_size: int = 65536
    seed: int = 0
    signal_range: tuple | None = None
    var_floor: float | None = None

    def __post_init__(self):
        if self.n_components < 1 or self.n_coeffs < 1:
            raise InputError("n_components and n_coeffs must be >= 1")
        if self.iterations < 1 or self.batch_size < 1:
            raise InputError("iterations and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be > 0")


def fit_gmm_pixels(x: np.ndarray, s: np.ndarray, config: GmmFitConfig) -> GmmNoiseModel:
    """Fit a GmmNoiseModel to paired (noisy, signal) pixels.

    The fit maximizes the mean log-likelihood with Adam on random minibatches;
    the learning rate follows a cosine decay from config.learning_rate to 0
    over config.iterations. Means start at the identity (mean ~ s, with a small
    per-component jitter to break symmetry), weights start uniform, and
    log-variances start at the log residual variance.

    Returns the fitted model with the per-iteration negative log-likelihood
    trace attached as ``model.fit_loss_trace``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if x.shape != s.shape:
        raise DimensionError(f"x and s pixel counts differ: {x.shape} vs {s.shape}")
    if x.size == 0:
        raise InputError("no calibration pixels provided")

    lo, hi = config.signal_range if config.signal_range is not None else (s.min(), s.max())
    lo, hi = float(lo), float(hi)
    if not hi > lo:
        raise DomainError(
            f"signal range is degenerate ({lo}, {hi}); calibration signal must vary"
        )
    span = hi - lo
    var_floor = config.var_floor if config.var_floor is not None else (1e-3 * span) ** 2

    res_var = float(np.var(x - s))
    floored_init = res_var < var_floor
    res_var = max(res_var, var_floor)
    res_std = math.sqrt(res_var)

    C, P = config.n_components, config.n_coeffs
    centered = np.arange(C, dtype=np.float64) - (C - 1) / 2.0
    weight_coeffs = np.zeros((C, P))
    mean_coeffs = np.zeros((C, P))
    mean_coeffs[:, 0] = lo + 0.3 * res_std * centered
    if P > 1:
        mean_coeffs[:, 1] = span
    else:
        mean_coeffs[:, 0] = s.mean() + 0.3 * res_std * centered
    var_coeffs = np.zeros((C, P))
    var_coeffs[:, 0] = math.log(res_var) + 0.25 * centered / max(C - 1, 1)

    w = torch.tensor(weight_coeffs, requires_grad=True)
    m = torch.tensor(mean_coeffs, requires_grad=True)
    v = torch.tensor(var_coeffs, requires_grad=True)
    opt = torch.optim.Adam([w, m, v], lr=config.learning_rate)

    x_t = torch.from_numpy(x)
    t_t = torch.from_numpy((s - lo) / span)
    rng = np.random.default_rng(config.seed)
    floor_t = torch.tensor(var_floor, dtype=torch.float64)
    trace = np.empty(config.iterations)

    for it in range(config.iterations):
        lr = 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * it / config.iterations))
        for group in opt.param_groups:
            group["lr"] = lr
        idx = torch.from_numpy(rng.integers(0, x.size, size=min(config.batch_size, x.size)))
        xb, tb = x_t[idx], t_t[idx]
        log_w = torch.log_softmax(_poly_eval(w, tb), dim=0)
        means = _poly_eval(m, tb)
        variances = torch.clamp(torch.exp(_poly_eval(v, tb)), min=floor_t)
        comp = (
            log_w
            - 0.5 * torch.log(2.0 * math.pi * variances)
            - (xb.unsqueeze(0) - means) ** 2 / (2.0 * variances)
        )
        loss = -torch.logsumexp(comp, dim=0).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace[it] = loss.item()

    model = GmmNoiseModel(
        w.detach().numpy(),
        m.detach().numpy(),
        v.detach().numpy(),
        (lo, hi),
        var_floor,
        metadata={"fitted_pixels": int(x.size)},
    )
    model.fit_loss_trace = trace

    grid = np.linspace(lo, hi, 64)
    _, _, fitted_vars = model.component_curves(grid)
    if floored_init or np.mean(fitted_vars <= var_floor * (1 + 1e-9)) > 0.5:
        warnings.warn(
            "fitted variances sit at the floor over most of the signal range; "
            "calibration data look noise-free or degenerate",
            stacklevel=2,
        )
    return model


def fit_gmm(calib: CalibrationStack, config: GmmFitConfig) -> GmmNoiseModel:
    """Fit a GmmNoiseModel from a calibration stack.

    Pairs every observation pixel with the pixel-wise signal estimate
    (computed if absent) and runs fit_gmm_pixels.
    """
    if calib.signal_estimate is None:
        estimate_signal(calib)
    m = calib.observations.shape[0]
    x = calib.observations.reshape(m, -1).astype(np.float64).reshape(-1)
    s = np.tile(calib.signal_estimate.astype(np.float64).reshape(-1), m)
    return fit_gmm_pixels(x, s, config)


def colearned_variance(s: np.ndarray, model: LinearVarianceModel) -> np.ndarray:
    """Evaluate the clamped affine variance curve on raw signal values."""
    if not isinstance(model, LinearVarianceModel):
        raise InputError(f"expected a LinearVarianceModel, got {type(model).__name__}")
    return model.variance(s)


def log_likelihood(model: PixelNoiseModel, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Per-pixel log p_NM(x | s) as float64, same shape as the inputs."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.shape != s.shape:
        raise DimensionError(f"x and s shapes differ: {x.shape} vs {s.shape}")
    with torch.no_grad():
        out = model.log_prob(torch.from_numpy(x), torch.from_numpy(s))
    return out.numpy()


def serialize_noise_model(model: PixelNoiseModel) -> bytes:
    """Encode a noise model into the DNNM container.

    Layout: magic "DNNM", u16 version, u8 kind, u32 value count + float64
    little-endian coefficient block, u32 length + JSON metadata trailer.
    """
    if model.kind == "gaussian":
        values = [model.sigma]
        meta = {"metadata": model.metadata}
    elif model.kind == "linear_variance":
        values = [model.a, model.b, model.sigma_min]
        meta = {"metadata": model.metadata}
    elif model.kind == "gmm":
        values = (
            list(model.weight_coeffs.reshape(-1))
            + list(model.mean_coeffs.reshape(-1))
            + list(model.var_coeffs.reshape(-1))
            + [model.signal_range[0], model.signal_range[1], model.var_floor]
        )
        meta = {
            "n_components": model.n_components,
            "n_coeffs": model.n_coeffs,
            "metadata": model.metadata,
        }
    else:
        raise InputError(f"cannot serialize noise model kind '{model.kind}'")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    return (
        MAGIC
        + _binio.u16(FORMAT_VERSION)
        + _binio.u8(_KIND_CODES[model.kind])
        + _binio.u32(len(values))
        + _binio.f64s(values)
        + _binio.u32(len(meta_bytes))
        + meta_bytes
    )


def deserialize_noise_model(data: bytes) -> PixelNoiseModel:
    """Decode a DNNM container produced by serialize_noise_model."""
    r = _binio.Reader(data, "noise model container")
    if r.take(4) != MAGIC:
        raise FormatError("noise model container: bad magic, expected DNNM")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise FormatError(
            f"noise model container: version mismatch, expected {FORMAT_VERSION}, found {version}"
        )
    code = r.u8()
    if code not in _CODE_KINDS:
        raise FormatError(f"noise model container: unknown kind code {code}")
    values = r.f64s(r.u32())
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    kind = _CODE_KINDS[code]
    user_meta = meta.get("metadata", {})
    if kind == "gaussian":
        if len(values) != 1:
            raise FormatError("gaussian noise model expects exactly 1 value")
        return GaussianNoiseModel(values[0], metadata=user_meta)
    if kind == "linear_variance":
        if len(values) != 3:
            raise FormatError("linear variance noise model expects exactly 3 values")
        return LinearVarianceModel(*values, metadata=user_meta)
    c, p = meta["n_components"], meta["n_coeffs"]
    expected = 3 * c * p + 3
    if len(values) != expected:
        raise FormatError(f"gmm noise model expects {expected} values, found {len(values)}")
    blocks = np.asarray(values[: 3 * c * p]).reshape(3, c, p)
    lo, hi, floor = values[3 * c * p :]
    return GmmNoiseModel(blocks[0], blocks[1], blocks[2], (lo, hi), floor, metadata=user_meta)


def save_noise_model(path, model: PixelNoiseModel) -> None:
    Path(path).write_bytes(serialize_noise_model(model))


def load_noise_model(path) -> PixelNoiseModel:
    return deserialize_noise_model(Path(path).read_bytes())

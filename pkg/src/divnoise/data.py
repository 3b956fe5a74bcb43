"""Image loading, patch extraction, augmentation, corruption, statistics.

All images are grayscale 2-D float32 arrays in raw intensity units. Encoder
inputs are standardized later with the training-set statistics computed here;
noise-model likelihoods are always evaluated in raw units, so nothing in this
module rescales intensities.
"""

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageSequence

from .errors import DimensionError, DomainError, EmptyDatasetError, FormatError, InputError

STACK_FORMATS = ("tiff_stack", "png_dir", "array_container")
CORRUPTION_KINDS = ("gaussian", "poisson_gaussian_saltpepper")

# Deterministic order of the eight dihedral transforms: four rotations, then
# the four rotations of the left-right mirror.
DIHEDRAL_COUNT = 8


@dataclass
class DataStats:
    """Population mean and standard deviation over every pixel of a stack."""

    mean: float
    std: float


@dataclass
class ImageStack:
    """A named list of 2-D float32 images plus optional pixel statistics."""

    images: list
    name: str = ""
    stats: DataStats | None = None

    def __post_init__(self):
        for i, img in enumerate(self.images):
            arr = np.asarray(img)
            if arr.ndim != 2:
                raise DimensionError(
                    f"stack '{self.name}': image {i} has shape {arr.shape}, expected 2-D"
                )
            self.images[i] = arr.astype(np.float32, copy=False)

    def __len__(self):
        return len(self.images)


@dataclass
class PatchSet:
    """Square patches with provenance back to their source images.

    ``sources[i]`` is ``(image_index, row, col)`` of patch ``i``'s top-left
    corner in the originating stack.
    """

    patches: np.ndarray
    patch_size: int
    sources: np.ndarray

    def __len__(self):
        return len(self.patches)


@dataclass
class CorruptionSpec:
    """Synthetic corruption description.

    kind "gaussian" adds zero-mean noise with ``gaussian_sigma``. kind
    "poisson_gaussian_saltpepper" applies, in order, Poisson resampling at
    photon scale ``poisson_lambda`` (x = Poisson(s * lambda) / lambda), additive
    Gaussian noise, then sets a ``saltpepper_fraction`` share of pixels to 0 or
    255 with equal probability.
    """

    kind: str = "gaussian"
    gaussian_sigma: float = 0.0
    poisson_lambda: float = 0.0
    saltpepper_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise InputError(
                f"unknown corruption kind '{self.kind}', expected one of {CORRUPTION_KINDS}"
            )
        if self.gaussian_sigma < 0:
            raise DomainError("gaussian_sigma must be >= 0")
        if not 0.0 <= self.saltpepper_fraction <= 1.0:
            raise DomainError("saltpepper_fraction must lie in [0, 1]")
        if self.kind == "poisson_gaussian_saltpepper" and self.poisson_lambda <= 0:
            raise DomainError("poisson_lambda must be > 0 for Poisson corruption")


def _load_pil_frame(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 3:
        raise DimensionError(
            f"expected grayscale image, got shape {arr.shape}; convert to single channel first"
        )
    return arr.astype(np.float32)


def load_stack(path, fmt: str, name: str | None = None) -> ImageStack:
    """Load an ImageStack from disk.

    Args:
        path: file (tiff_stack, array_container) or directory (png_dir).
        fmt: one of "tiff_stack", "png_dir", "array_container".
        name: stack name; defaults to the path stem.

    Raises:
        InputError: unknown format name.
        EmptyDatasetError: the source decoded to zero images.
        FormatError: malformed array container.
        OSError: unreadable path.
    """
    if fmt not in STACK_FORMATS:
        raise InputError(f"unknown stack format '{fmt}', expected one of {STACK_FORMATS}")
    path = Path(path)
    stack_name = name if name is not None else path.stem

    if fmt == "tiff_stack":
        with Image.open(path) as im:
            images = [_load_pil_frame(frame) for frame in ImageSequence.Iterator(im)]
    elif fmt == "png_dir":
        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff")
        )
        images = []
        for p in files:
            with Image.open(p) as im:
                images.append(_load_pil_frame(im))
    else:
        images = list(load_array_container(path))

    if not images:
        raise EmptyDatasetError(f"no images decoded from {path} (format {fmt})")
    return ImageStack(images=images, name=stack_name)


def load_array_container(path) -> np.ndarray:
    """Read the raw array container: 3 little-endian uint32 (count, height,
    width) followed by count*height*width little-endian float32 values."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: array container shorter than its 12-byte shape header")
    n, h, w = struct.unpack("<III", data[:12])
    expected = 12 + 4 * n * h * w
    if len(data) != expected:
        raise FormatError(
            f"{path}: array container payload is {len(data) - 12} bytes, "
            f"expected {expected - 12} for shape ({n}, {h}, {w})"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=12)
    return flat.reshape(n, h, w).astype(np.float32)


def save_array_container(path, images) -> None:
    """Write images (iterable of 2-D arrays or an (N, H, W) array) to the raw
    array container format. All images must share one shape."""
    arr = np.asarray([np.asarray(im, dtype=np.float32) for im in images], dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"expected (N, H, W) images of one shape, got shape {arr.shape}")
    n, h, w = arr.shape
    payload = struct.pack("<III", n, h, w) + arr.astype("<f4").tobytes()
    Path(path).write_bytes(payload)


def compute_stats(stack: ImageStack) -> DataStats:
    """Compute population mean/std over all pixels and store them on the stack.

    A constant stack is degenerate for normalization; it is flagged with a
    warning and std is stored as 0.0 so downstream code can reject it.
    """
    if len(stack) == 0:
        raise EmptyDatasetError("cannot compute statistics of an empty stack")
    total = 0.0
    total_sq = 0.0
    count = 0
    for img in stack.images:
        img64 = img.astype(np.float64)
        total += img64.sum()
        total_sq += np.square(img64).sum()
        count += img64.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    std = float(np.sqrt(var))
    if std == 0.0:
        warnings.warn(
            f"stack '{stack.name}' is constant; normalization statistics are degenerate",
            stacklevel=2,
        )
    stack.stats = DataStats(mean=float(mean), std=std)
    return stack.stats


def extract_patches(
    stack: ImageStack, patch_size: int, val_fraction: float, seed: int
) -> tuple[PatchSet, PatchSet]:
    """Tile every image into non-overlapping patches and split train/val.

    Tiling uses floor division: rows/cols that do not fit a full patch are
    discarded. The validation split draws round(total * val_fraction) patches
    without replacement using the given seed; both sets keep the original
    deterministic tiling order.

    Raises:
        InputError: patch larger than some image, or val_fraction outside [0, 1).
    """
    if not 0.0 <= val_fraction < 1.0:
        raise InputError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    if patch_size < 1:
        raise InputError(f"patch_size must be positive, got {patch_size}")
    patches = []
    sources = []
    for idx, img in enumerate(stack.images):
        h, w = img.shape
        if patch_size > h or patch_size > w:
            raise InputError(
                f"patch size {patch_size} exceeds image {idx} of shape ({h}, {w})"
            )
        for r in range(0, h - patch_size + 1, patch_size):
            for c in range(0, w - patch_size + 1, patch_size):
                patches.append(img[r : r + patch_size, c : c + patch_size])
                sources.append((idx, r, c))
    total = len(patches)
    if total == 0:
        raise EmptyDatasetError("tiling produced zero patches")
    patches = np.stack(patches).astype(np.float32)
    sources = np.asarray(sources, dtype=np.int64)

    n_val = int(round(total * val_fraction))
    rng = np.random.default_rng(seed)
    val_idx = np.sort(rng.choice(total, size=n_val, replace=False))
    val_mask = np.zeros(total, dtype=bool)
    val_mask[val_idx] = True

    train = PatchSet(patches[~val_mask], patch_size, sources[~val_mask])
    val = PatchSet(patches[val_mask], patch_size, sources[val_mask])
    return train, val


def apply_dihedral(image: np.ndarray, k: int) -> np.ndarray:
    """Apply dihedral transform ``k`` in 0..7: k%4 counterclockwise quarter
    turns, preceded by a left-right mirror when k >= 4. Square input only."""
    if image.shape[-2] != image.shape[-1]:
        raise DimensionError(
            f"dihedral transforms need square patches, got shape {image.shape}"
        )
    if not 0 <= k < DIHEDRAL_COUNT:
        raise InputError(f"dihedral index must be in 0..7, got {k}")
    out = image
    if k >= 4:
        out = np.flip(out, axis=-1)
    out = np.rot90(out, k % 4, axes=(-2, -1))
    return np.ascontiguousarray(out)


def augment_eightfold(patches: np.ndarray) -> np.ndarray:
    """Expand (N, P, P) patches into (8N, P, P): for each input patch, its
    eight dihedral images in the deterministic apply_dihedral order."""
    patches = np.asarray(patches)
    if patches.ndim != 3:
        raise DimensionError(f"expected (N, P, P) patches, got shape {patches.shape}")
    out = np.empty((patches.shape[0] * 8,) + patches.shape[1:], dtype=patches.dtype)
    for i, patch in enumerate(patches):
        for k in range(DIHEDRAL_COUNT):
            out[i * 8 + k] = apply_dihedral(patch, k)
    return out


def corrupt(stack: ImageStack, spec: CorruptionSpec, seed: int) -> ImageStack:
    """Return a corrupted copy of the stack.

    Drawing order is fixed (images in order; per image: Poisson, Gaussian,
    salt-and-pepper mask, salt-vs-pepper values) so a given seed reproduces the
    corruption bit-for-bit.

    Raises:
        DomainError: negative signal passed to Poisson corruption.
    """
    rng = np.random.default_rng(seed)
    out = []
    for idx, img in enumerate(stack.images):
        x = img.astype(np.float64)
        if spec.kind == "poisson_gaussian_saltpepper":
            if np.any(x < 0):
                raise DomainError(
                    f"image {idx} has negative intensities; Poisson corruption "
                    "requires a non-negative signal"
                )
            x = rng.poisson(x * spec.poisson_lambda).astype(np.float64) / spec.poisson_lambda
            if spec.gaussian_sigma > 0:
                x = x + rng.normal(0.0, spec.gaussian_sigma, size=x.shape)
            if spec.saltpepper_fraction > 0:
                mask = rng.random(x.shape) < spec.saltpepper_fraction
                salt = rng.random(x.shape) < 0.5
                x[mask] = np.where(salt[mask], 255.0, 0.0)
        else:
            if spec.gaussian_sigma > 0:
                x = x + rng.normal(0.0, spec.gaussian_sigma, size=x.shape)
        out.append(x.astype(np.float32))
    return ImageStack(images=out, name=stack.name)

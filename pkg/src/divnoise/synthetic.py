"""Deterministic synthetic image generators for demos and self-tests.

Two families: random stroke glyphs (sparse bright curves on a dark field)
and Voronoi membrane phantoms (bright cells separated by a dark boundary
network, with instance labels).
"""

import numpy as np
from scipy import ndimage

from .errors import InputError


def glyph_images(
    n_images: int,
    size: int = 28,
    seed: int = 0,
    strokes=(2, 4),
    stroke_length=(8, 17),
    blur_sigma: float = 0.8,
    peak: float = 220.0,
) -> np.ndarray:
    """(N, size, size) float32 stack of random curved strokes in [0, 255]."""
    if n_images < 1 or size < 8:
        raise InputError(f"need n_images >= 1 and size >= 8, got {n_images}, {size}")
    rng = np.random.default_rng(seed)
    out = np.zeros((n_images, size, size), dtype=np.float64)
    margin = max(3, size // 7)
    for i in range(n_images):
        canvas = out[i]
        for _ in range(rng.integers(strokes[0], strokes[1] + 1)):
            pos = rng.uniform(margin, size - margin, size=2)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            for _ in range(rng.integers(stroke_length[0], stroke_length[1])):
                r, c = int(round(pos[0])), int(round(pos[1]))
                canvas[max(r - 1, 0) : r + 1, max(c - 1, 0) : c + 1] = 1.0
                angle += rng.normal(0.0, 0.35)
                pos += (np.cos(angle), np.sin(angle))
                pos = np.clip(pos, 1.0, size - 2.0)
        ndimage.gaussian_filter(canvas, blur_sigma, output=canvas)
        top = canvas.max()
        if top > 0:
            canvas *= rng.uniform(0.75, 1.0) * peak / top
    return out.astype(np.float32)


def membrane_phantoms(
    n_images: int,
    size: int = 64,
    seed: int = 0,
    cell_spacing: float = 12.0,
    membrane_halfwidth: float = 1.1,
    membrane_intensity: float = 25.0,
    brightness=(120.0, 230.0),
    blur_sigma: float = 0.6,
):
    """Voronoi cell phantoms.

    Returns (images, labels): images is (N, size, size) float32 with bright
    cell interiors and dark membranes, labels is (N, size, size) int32 with
    one id per cell and 0 on the membrane ridge. cell_spacing sets the mean
    seed distance, so cells are roughly cell_spacing pixels across.
    """
    if n_images < 1 or size < 16:
        raise InputError(f"need n_images >= 1 and size >= 16, got {n_images}, {size}")
    rng = np.random.default_rng(seed)
    n_cells = max(4, int(round((size / cell_spacing) ** 2)))
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)

    images = np.empty((n_images, size, size), dtype=np.float32)
    labels = np.empty((n_images, size, size), dtype=np.int32)
    for i in range(n_images):
        m = int(rng.integers(max(4, n_cells - 2), n_cells + 3))
        seeds = rng.uniform(0.0, size, size=(m, 2))
        dists = np.sqrt(
            (rows[None] - seeds[:, 0, None, None]) ** 2
            + (cols[None] - seeds[:, 1, None, None]) ** 2
        )
        order = np.argsort(dists, axis=0)
        nearest = order[0]
        d1 = np.take_along_axis(dists, order[0:1], axis=0)[0]
        d2 = np.take_along_axis(dists, order[1:2], axis=0)[0]
        membrane = (d2 - d1) < membrane_halfwidth

        shade = rng.uniform(brightness[0], brightness[1], size=m)
        img = shade[nearest]
        img[membrane] = membrane_intensity
        if blur_sigma > 0:
            img = ndimage.gaussian_filter(img, blur_sigma)
        images[i] = np.clip(img, 0.0, 255.0)

        lab = (nearest + 1).astype(np.int32)
        lab[membrane] = 0
        labels[i] = lab
    return images, labels

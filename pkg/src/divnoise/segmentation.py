"""Membrane segmentation downstream task and sample-consensus labelling.

Pipeline: local-mean binarization -> skeletonize the membrane complement ->
connected components of the non-skeleton support. Consensus segmentation
averages the per-sample binary maps before the final labelling pass, which
suppresses sample-to-sample boundary flicker.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import DimensionError, InputError

CONNECTIVITY_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


@dataclass
class SegPipelineConfig:
    mean_filter_radius: int = 15
    connectivity: int = 4
    consensus_samples: int = 30

    def __post_init__(self):
        if self.mean_filter_radius < 1:
            raise InputError(f"mean_filter_radius must be >= 1, got {self.mean_filter_radius}")
        if self.connectivity not in CONNECTIVITY_STRUCTURES:
            raise InputError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.consensus_samples < 2:
            raise InputError(f"consensus_samples must be >= 2, got {self.consensus_samples}")


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) int32, 0 is background

    @property
    def n_instances(self) -> int:
        return int(self.labels.max())


def local_mean_binarize(image: np.ndarray, radius: int) -> np.ndarray:
    """Foreground = strictly brighter than the local mean in a square window
    of side 2*radius + 1 (reflect boundary). Ties count as background, so a
    constant image yields an empty mask (flagged with a warning)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {image.shape}")
    local_mean = ndimage.uniform_filter(image, size=2 * radius + 1, mode="reflect")
    binary = image > local_mean
    if not binary.any():
        warnings.warn("local-mean binarization produced an empty foreground mask")
    return binary


def boundary_skeleton(binary: np.ndarray) -> np.ndarray:
    """One-pixel-wide skeleton of the dark membrane network (the mask
    complement)."""
    return skeletonize(~np.asarray(binary, dtype=bool))


def sample_binary_map(image: np.ndarray, config: SegPipelineConfig | None = None) -> np.ndarray:
    """Float32 map that is 1 off the skeleton and 0 on it; this is the
    per-sample quantity averaged by the consensus."""
    config = config if config is not None else SegPipelineConfig()
    skeleton = boundary_skeleton(local_mean_binarize(image, config.mean_filter_radius))
    return (~skeleton).astype(np.float32)


def segment(image: np.ndarray, config: SegPipelineConfig | None = None) -> LabelMap:
    """Full pipeline on a single image; every non-skeleton pixel gets a cell
    label, skeleton pixels stay background."""
    config = config if config is not None else SegPipelineConfig()
    non_skeleton = sample_binary_map(image, config) > 0
    labels, _ = ndimage.label(non_skeleton, structure=CONNECTIVITY_STRUCTURES[config.connectivity])
    return LabelMap(labels.astype(np.int32))


def consensus_avg(samples, config: SegPipelineConfig | None = None) -> LabelMap:
    """Average the per-sample non-skeleton maps, then segment the average."""
    config = config if config is not None else SegPipelineConfig()
    arr = np.asarray(getattr(samples, "samples", samples), dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise InputError(f"need a (K>=2, H, W) sample stack, got shape {arr.shape}")
    avg = np.mean([sample_binary_map(s, config) for s in arr], axis=0)
    return LabelMap(segment(avg, config).labels)


def seg_score(pred: LabelMap, gt: LabelMap) -> float:
    """Greedy one-to-one IoU matching between predicted and ground-truth
    instances, averaged over ground-truth instances. Background (0) is
    excluded on both sides."""
    pred_labels = np.asarray(pred.labels)
    gt_labels = np.asarray(gt.labels)
    if pred_labels.shape != gt_labels.shape:
        raise DimensionError(
            f"label map shapes differ: {pred_labels.shape} vs {gt_labels.shape}"
        )
    gt_ids = np.unique(gt_labels)
    gt_ids = gt_ids[gt_ids > 0]
    if gt_ids.size == 0:
        raise InputError("ground truth has no instances")
    pred_ids = np.unique(pred_labels)
    pred_ids = pred_ids[pred_ids > 0]
    if pred_ids.size == 0:
        return 0.0

    both = (gt_labels > 0) & (pred_labels > 0)
    pred_span = int(pred_labels.max()) + 1
    pair_codes = gt_labels[both].astype(np.int64) * pred_span + pred_labels[both]
    codes, inter = np.unique(pair_codes, return_counts=True)
    gt_areas = np.bincount(gt_labels.ravel())
    pred_areas = np.bincount(pred_labels.ravel())

    pairs = []
    for code, n in zip(codes, inter):
        g = int(code // pred_span)
        p = int(code % pred_span)
        iou = n / float(gt_areas[g] + pred_areas[p] - n)
        pairs.append((iou, g, p))
    # highest IoU first; deterministic tie-break on label ids
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))

    matched_gt: set = set()
    matched_pred: set = set()
    total = 0.0
    for iou, g, p in pairs:
        if g in matched_gt or p in matched_pred:
            continue
        matched_gt.add(g)
        matched_pred.add(p)
        total += iou
    return total / float(gt_ids.size)

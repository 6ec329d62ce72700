"""Two-stage cascade: lung network -> lung ROI -> EED -> infection network."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .eed import EedParams
from .imaging import resize_bilinear, resize_nearest
from .network import UNet
from .training import ROI_MARGIN, lung_bbox, normalize_patch, roi_patch

log = logging.getLogger(__name__)

THRESHOLD = 0.5
KEEP_FRACTION = 0.10
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class CascadeResult:
    lung_mask: np.ndarray
    infection_mask: np.ndarray
    roi_box: tuple[int, int, int, int] | None
    lung_prob: np.ndarray | None = None
    infection_prob: np.ndarray | None = None
    lung_empty: bool = False


def postprocess_lung(prob: np.ndarray, threshold: float = THRESHOLD) -> tuple[np.ndarray, bool]:
    """Threshold, keep 4-connected components >= 10% of the largest, fill holes.

    Returns ``(mask, empty)``; ``empty`` flags that nothing survived.
    """
    binary = np.asarray(prob) >= threshold
    labels, count = ndimage.label(binary, structure=_FOUR_CONNECTED)
    if count == 0:
        log.warning("lung postprocessing: no component above threshold %.2f", threshold)
        return np.zeros(binary.shape, bool), True
    areas = np.bincount(labels.ravel())[1:]
    keep = np.flatnonzero(areas >= KEEP_FRACTION * areas.max()) + 1
    mask = np.isin(labels, keep)
    return ndimage.binary_fill_holes(mask), False


def crop_roi(image: np.ndarray, lung_mask: np.ndarray, margin: int = ROI_MARGIN):
    """Crop ``image`` to the lung bounding box grown by ``margin``; returns (crop, roi_box)."""
    if not np.any(lung_mask):
        raise ValueError("cannot crop to an empty lung mask")
    r0, c0, h, w = box = lung_bbox(np.asarray(lung_mask, bool), margin)
    return np.asarray(image)[r0:r0 + h, c0:c0 + w], box


def uncrop(mask_at_roi: np.ndarray, roi_box, original_shape) -> np.ndarray:
    r0, c0, h, w = roi_box
    if mask_at_roi.shape != (h, w):
        raise ValueError(f"ROI mask shape {mask_at_roi.shape} does not match box {roi_box}")
    out = np.zeros(original_shape, dtype=mask_at_roi.dtype)
    out[r0:r0 + h, c0:c0 + w] = mask_at_roi
    return out


def _model_size(model: UNet, fallback: tuple[int, int]) -> tuple[int, int]:
    return tuple(model.input_size) if model.input_size else fallback


def segment_lung(image: np.ndarray, lung_model: UNet) -> tuple[np.ndarray, np.ndarray, bool]:
    """Lung probability at the original size plus the postprocessed mask."""
    size = _model_size(lung_model, image.shape)
    x = normalize_patch(resize_bilinear(image, size))
    prob = resize_bilinear(lung_model.predict(x), image.shape)
    mask, empty = postprocess_lung(prob)
    return prob, mask, empty


def segment_infection(
    image: np.ndarray, lung_mask: np.ndarray, infection_model: UNet, eed: EedParams | None
) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]:
    """Infection mask and ROI-scale probability for an already segmented lung."""
    box = lung_bbox(lung_mask)
    size = _model_size(infection_model, (box[2], box[3]))
    raw, _, box = roi_patch(image, lung_mask, size, eed)
    prob = infection_model.predict(normalize_patch(raw))
    r0, c0, h, w = box
    roi = resize_nearest(prob >= THRESHOLD, (h, w)) & lung_mask[r0:r0 + h, c0:c0 + w]
    return uncrop(roi, box, lung_mask.shape), prob, box


def run_cascade(
    image: np.ndarray,
    lung_model: UNet,
    infection_model: UNet,
    eed: EedParams | None = EedParams(),
) -> CascadeResult:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or not np.all(np.isfinite(image)):
        raise ValueError("cascade input must be a finite 2D image")
    lung_prob, lung_mask, empty = segment_lung(image, lung_model)
    if empty or not lung_mask.any():
        return CascadeResult(lung_mask, np.zeros_like(lung_mask), None, lung_prob, None, lung_empty=True)
    infection, inf_prob, box = segment_infection(image, lung_mask, infection_model, eed)
    return CascadeResult(lung_mask, infection & lung_mask, box, lung_prob, inf_prob)


def overlay(image: np.ndarray, lung_mask: np.ndarray, infection_mask: np.ndarray) -> np.ndarray:
    """RGB uint8 visualisation: grey slice, lung boundary green, infection boundary red."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    grey = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    rgb = np.repeat((grey * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    for mask, colour in ((lung_mask, (0, 255, 0)), (infection_mask, (255, 0, 0))):
        mask = np.asarray(mask, bool)
        edge = mask & ~ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)
        rgb[edge] = colour
    return rgb

"""Resampling helpers shared by data preparation and the cascade.

Both resizers use pixel-centre alignment: output pixel i samples input
coordinate (i + 0.5) * in / out - 0.5.
"""

from __future__ import annotations

import numpy as np


def _centres(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == tuple(shape):
        return image.copy()
    ys = np.clip(_centres(shape[0], h), 0, h - 1)
    xs = np.clip(_centres(shape[1], w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_nearest(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask)
    h, w = mask.shape
    if (h, w) == tuple(shape):
        return mask.copy()
    ys = np.clip(np.floor((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(int), 0, h - 1)
    xs = np.clip(np.floor((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(int), 0, w - 1)
    return mask[ys][:, xs]

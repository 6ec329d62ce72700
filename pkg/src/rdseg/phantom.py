"""Synthetic chest-slice phantoms: body ellipse, two dark lungs, GGO-like blurred-disc lesions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .io import SampleRecord, save_manifest, write_mask, write_raster

BODY_LEVEL = 0.75
LUNG_LEVEL = 0.15
LESION_PEAK = 0.35
NOISE_SIGMA = 0.02
EDGE_BLUR = 1.0
MAX_PLACEMENT_TRIES = 200


@dataclass
class Phantom:
    image: np.ndarray
    lung: np.ndarray
    infection: np.ndarray
    body: np.ndarray


def _ellipse(shape, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(seed: int, size: int = 128, lesion_count: int = 1) -> Phantom:
    if size % 16 or size <= 0:
        raise ValueError(f"phantom size must be a positive multiple of 16, got {size}")
    if lesion_count < 0:
        raise ValueError(f"lesion_count must be >= 0, got {lesion_count}")
    rng = np.random.default_rng(seed)
    shape = (size, size)
    c = size / 2
    jitter = lambda: rng.uniform(-0.03, 0.03) * size  # noqa: E731

    body = _ellipse(shape, c + jitter(), c + jitter(), 0.40 * size, 0.46 * size)
    lung = np.zeros(shape, bool)
    for side in (-1, 1):
        ry = (0.28 + rng.uniform(-0.02, 0.02)) * size
        rx = (0.15 + rng.uniform(-0.02, 0.02)) * size
        lung |= _ellipse(shape, c + jitter(), c + side * 0.21 * size + jitter() / 2, ry, rx)
    lung &= body

    image = np.where(body, BODY_LEVEL, 0.0)
    image[lung] = LUNG_LEVEL
    infection = np.zeros(shape, bool)
    yy, xx = np.mgrid[:size, :size]
    lung_pixels = np.argwhere(lung)
    for k in range(lesion_count):
        for _ in range(MAX_PLACEMENT_TRIES):
            radius = rng.uniform(0.06, 0.10) * size
            cy, cx = lung_pixels[rng.integers(len(lung_pixels))]
            r = np.hypot(yy - cy, xx - cx)
            # disc of the given radius blurred by a Gaussian of width EDGE_BLUR
            blob = 0.5 * special.erfc((r - radius) / (np.sqrt(2) * EDGE_BLUR))
            core = r <= radius
            if not (core & ~lung).any():
                break
        else:
            raise RuntimeError(f"could not place lesion {k} inside the lungs after {MAX_PLACEMENT_TRIES} tries")
        image += np.where(lung, LESION_PEAK * blob, 0.0)
        infection |= core

    image += rng.normal(0.0, NOISE_SIGMA, shape)
    return Phantom(np.clip(image, 0.0, 1.0).astype(np.float32), lung, infection, body)


def parse_lesion_range(spec: str | int) -> tuple[int, int]:
    """"2" -> (2, 2), "0..3" -> (0, 3)."""
    if isinstance(spec, int):
        return spec, spec
    if ".." in spec:
        lo, hi = (int(p) for p in spec.split("..", 1))
    else:
        lo = hi = int(spec)
    if lo < 0 or hi < lo:
        raise ValueError(f"bad lesion range {spec!r}")
    return lo, hi


def write_phantom_dataset(
    out_dir,
    count: int,
    size: int = 128,
    lesions: str | int = "1..3",
    seed: int = 0,
    test_count: int = 0,
) -> list[SampleRecord]:
    """Write ``count`` phantoms plus ``manifest.json``; the last ``test_count`` go to the test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = parse_lesion_range(lesions)
    seeds = np.random.SeedSequence(seed).generate_state(count)
    counts = np.random.default_rng(seed).integers(lo, hi + 1, size=count)
    records = []
    for i in range(count):
        sid = f"phantom{i:04d}"
        ph = generate_phantom(int(seeds[i]), size, int(counts[i]))
        write_raster(out / f"{sid}_image.imgf", ph.image, "imgf32")
        write_mask(out / f"{sid}_lung.pgm", ph.lung)
        write_mask(out / f"{sid}_infection.pgm", ph.infection)
        records.append(
            SampleRecord(
                id=sid,
                image_path=f"{sid}_image.imgf",
                lung_mask_path=f"{sid}_lung.pgm",
                infection_mask_path=f"{sid}_infection.pgm",
                split="test" if i >= count - test_count else "train",
            )
        )
    save_manifest(out / "manifest.json", records)
    return records

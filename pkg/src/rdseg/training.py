"""Soft-dice training of either cascade stage, plus its data preparation."""

from __future__ import annotations

import logging
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import ShapeError, Tape, Tensor, _emit, backward
from .eed import EedParams, eed_filter
from .imaging import resize_bilinear, resize_nearest
from .io import Manifest
from .network import ModelConfig, UNet

log = logging.getLogger(__name__)

STAGES = ("lung", "infection")
DEFAULT_BATCH = {"lung": 32, "infection": 16}
ROI_MARGIN = 5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    # None -> 32 for the lung stage, 16 for the infection stage
    batch_size: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    dice_smooth: float = 1.0
    patch_size: int = 256

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def batch_for(self, stage: str) -> int:
        return self.batch_size if self.batch_size is not None else DEFAULT_BATCH[stage]


# --------------------------------------------------------------------------
# loss


def soft_dice_loss(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> tuple[float, np.ndarray]:
    """Batch-mean of 1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s); returns (loss, d loss / d pred)."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"soft_dice_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes, dtype=np.float64)
    total = pred.sum(axis=axes, dtype=np.float64) + target.sum(axis=axes, dtype=np.float64) + smooth
    num = 2 * inter + smooth
    loss = float(np.mean(1 - num / total))
    bshape = (n,) + (1,) * (pred.ndim - 1)
    grad = -(2 * target * total.reshape(bshape) - num.reshape(bshape)) / (total.reshape(bshape) ** 2 * n)
    return loss, grad.astype(pred.dtype)


def soft_dice(pred: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Tape-recorded scalar version of :func:`soft_dice_loss`."""
    loss, grad = soft_dice_loss(pred.data, target, smooth)
    return _emit("soft_dice", (pred,), np.asarray(loss, dtype=pred.dtype), lambda g: (g * grad,))


# --------------------------------------------------------------------------
# optimizer


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, config: TrainConfig) -> None:
    """Bias-corrected Adam update of ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        dt = p.dtype
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * g * g
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.data = p.data - dt.type(config.learning_rate) * m_hat / (np.sqrt(v_hat) + dt.type(config.adam_epsilon))


# --------------------------------------------------------------------------
# data preparation


def normalize_patch(patch: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the patch; all zeros when std < 1e-8."""
    patch = np.asarray(patch, dtype=np.float64)
    std = patch.std()
    if std < 1e-8:
        return np.zeros_like(patch)
    return (patch - patch.mean()) / std


def lung_bbox(mask: np.ndarray, margin: int = ROI_MARGIN) -> tuple[int, int, int, int]:
    """Tight box of ``mask`` grown by ``margin`` and clipped: (row0, col0, rows, cols)."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    r0 = max(int(rows[0]) - margin, 0)
    c0 = max(int(cols[0]) - margin, 0)
    r1 = min(int(rows[-1]) + margin + 1, mask.shape[0])
    c1 = min(int(cols[-1]) + margin + 1, mask.shape[1])
    return r0, c0, r1 - r0, c1 - c0


def roi_patch(
    image: np.ndarray, lung: np.ndarray, size: tuple[int, int], eed: EedParams | None, margin: int = ROI_MARGIN
) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]:
    """Crop to the lung box, zero outside the lungs, filter, resize, re-mask.

    Returns ``(patch, lung_at_size, box)``; ``patch`` is not yet normalized
    and is exactly 0 wherever ``lung_at_size`` is False.
    """
    r0, c0, h, w = box = lung_bbox(lung, margin)
    crop = np.asarray(image, dtype=np.float64)[r0:r0 + h, c0:c0 + w]
    lung_crop = lung[r0:r0 + h, c0:c0 + w]
    crop = np.where(lung_crop, crop, 0.0)
    if eed is not None:
        crop = eed_filter(crop, eed)
    lung_rs = resize_nearest(lung_crop, size)
    patch = np.where(lung_rs, resize_bilinear(crop, size), 0.0)
    return patch, lung_rs, box


@dataclass
class TrainingPair:
    id: str
    image: np.ndarray  # normalized network input (h, w)
    target: np.ndarray  # binary mask (h, w)
    lung: np.ndarray | None = None  # ROI lung mask at network size (infection stage)
    raw: np.ndarray | None = None  # pre-normalization input


def prepare_infection_set(
    manifest: Manifest,
    target_size: int | tuple[int, int] = 256,
    eed: EedParams | None = EedParams(),
) -> list[TrainingPair]:
    """Lung-ROI training pairs for the infection network; samples with empty infection masks are dropped."""
    size = (target_size, target_size) if isinstance(target_size, int) else tuple(target_size)
    pairs = []
    for s in manifest.samples:
        lung = manifest.load_lung(s)
        if lung is None:
            raise ValueError(f"sample {s.id}: infection training needs a lung mask")
        if not lung.any():
            raise ValueError(f"sample {s.id}: lung mask is empty")
        infection = manifest.load_infection(s)
        if infection is None or not (infection & lung).any():
            log.debug("skipping %s: no infection annotation", s.id)
            continue
        image = manifest.load_image(s)
        raw, lung_rs, (r0, c0, h, w) = roi_patch(image, lung, size, eed)
        target = resize_nearest((infection & lung)[r0:r0 + h, c0:c0 + w], size) & lung_rs
        if not target.any():
            continue
        pairs.append(TrainingPair(s.id, normalize_patch(raw), target, lung_rs, raw))
    return pairs


def prepare_lung_set(manifest: Manifest, target_size: int | tuple[int, int] = 256) -> list[TrainingPair]:
    """Whole normalized slices with lung masks; no ROI crop and no filtering."""
    size = (target_size, target_size) if isinstance(target_size, int) else tuple(target_size)
    pairs = []
    for s in manifest.samples:
        lung = manifest.load_lung(s)
        if lung is None:
            raise ValueError(f"sample {s.id}: lung training needs a lung mask")
        raw = resize_bilinear(manifest.load_image(s), size)
        pairs.append(TrainingPair(s.id, normalize_patch(raw), resize_nearest(lung, size), raw=raw))
    return pairs


def prepare_stage(stage: str, manifest: Manifest, patch_size: int, eed: EedParams | None) -> list[TrainingPair]:
    if stage == "lung":
        return prepare_lung_set(manifest, patch_size)
    if stage == "infection":
        return prepare_infection_set(manifest, patch_size, eed)
    raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: UNet
    losses: list[tuple[int, float]]
    optimizer: OptimizerState
    config: TrainConfig


def stack_pairs(pairs: list[TrainingPair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.image for p in pairs])[:, None].astype(dtype)
    y = np.stack([p.target for p in pairs])[:, None].astype(dtype)
    return x, y


def fit(
    images: np.ndarray,
    targets: np.ndarray,
    model: UNet,
    config: TrainConfig,
    batch_size: int,
    deterministic: bool = True,
    on_epoch_end: Callable[[int, UNet], None] | None = None,
) -> TrainResult:
    """Adam on the soft dice loss over ``(n, 1, h, w)`` arrays; returns the per-epoch mean losses.

    ``on_epoch_end(epoch, model)`` runs after every epoch (snapshots, logging).
    """
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    state = OptimizerState()
    rng = np.random.default_rng([config.seed, 1])
    losses = []
    limiter = threadpool_limits(limits=1) if deterministic else nullcontext()
    with limiter:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                if len(idx) * images.shape[2] * images.shape[3] < 2:
                    continue
                with Tape() as tape:
                    pred = model.forward(Tensor(images[idx]), mode="train")
                    loss = soft_dice(pred, targets[idx], config.dice_smooth)
                grads = backward(tape, loss, wrt=model.params)
                adam_step(model.params, grads, state, config)
                total += float(loss.data) * len(idx)
            losses.append((epoch, total / n))
            log.info("epoch %d mean soft dice loss %.6f", epoch, total / n)
            model.input_size = tuple(images.shape[2:])
            if on_epoch_end is not None:
                on_epoch_end(epoch, model)
    return TrainResult(model, losses, state, config)


def train(
    stage: str,
    manifest: Manifest,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    eed: EedParams | None = EedParams(),
    deterministic: bool = True,
    on_epoch_end: Callable[[int, UNet], None] | None = None,
) -> TrainResult:
    """Train one stage on the manifest's train split (all samples if no split is marked train)."""
    subset = manifest.split("train")
    if not subset.samples:
        subset = manifest
    pairs = prepare_stage(stage, subset, train_config.patch_size, eed)
    if not pairs:
        raise ValueError(f"no usable training pairs for stage {stage!r}")
    x, y = stack_pairs(pairs)
    model = UNet(model_config, seed=train_config.seed)
    return fit(x, y, model, train_config, train_config.batch_for(stage), deterministic, on_epoch_end)


def evaluate_soft_dice(model: UNet, images: np.ndarray, targets: np.ndarray, smooth: float = 1.0, batch: int = 16) -> float:
    """Mean soft dice coefficient (1 - loss) of inference-mode predictions."""
    total = 0.0
    for start in range(0, len(images), batch):
        pred = model.forward(Tensor(images[start:start + batch]), mode="infer").data
        loss, _ = soft_dice_loss(pred, targets[start:start + batch], smooth)
        total += (1 - loss) * len(pred)
    return total / len(images)


def write_loss_log(path, losses: list[tuple[int, float]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch\tmean_loss\n")
        for epoch, value in losses:
            f.write(f"{epoch}\t{value:.9g}\n")


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)

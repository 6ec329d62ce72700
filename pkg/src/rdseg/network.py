"""ResDense U-Net: a U-Net whose every level is a ResDense block.

A ResDense block chains residual units with dense (concatenation) wiring:
unit k sees the block input concatenated with the outputs of units 1..k-1,
and a 1x1 transition convolution closes the block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    maxpool2x2,
    no_grad,
    relu,
    sigmoid,
    upsample2x,
)


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 5
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1
    residual_units_per_block: int = 2

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be >= 1: {self}")
        if self.residual_units_per_block < 1:
            raise ValueError("residual_units_per_block must be >= 1")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ResDenseBlockSpec:
    in_channels: int
    unit_width: int
    out_channels: int
    units: int = 2

    @property
    def concat_width(self) -> int:
        return self.in_channels + self.units * self.unit_width

    def unit_in_channels(self, k: int) -> int:
        return self.in_channels + k * self.unit_width


def block_specs(config: ModelConfig) -> list[tuple[str, ResDenseBlockSpec]]:
    """Blocks in execution order: encoder levels top-down, then decoder bottom-up."""
    units = config.residual_units_per_block
    specs = []
    in_ch = config.in_channels
    for level in range(config.levels):
        w = config.width(level)
        specs.append((f"enc{level}", ResDenseBlockSpec(in_ch, w, w, units)))
        in_ch = w
    for level in reversed(range(config.levels - 1)):
        w = config.width(level)
        # skip (w) concatenated with the upsampled deeper output (2w)
        specs.append((f"dec{level}", ResDenseBlockSpec(w + 2 * w, w, w, units)))
    return specs


class UNet:
    """Parameters, batch-norm statistics and topology of one ResDense U-Net.

    ``params`` maps names to trainable tensors in creation order, ``bn`` maps
    batch-norm layer prefixes to their running statistics. ``input_size`` is
    the (h, w) the network was trained at, when known.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.input_size: tuple[int, int] | None = None
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._rng = np.random.default_rng(seed)
        self.specs = block_specs(config)
        for prefix, spec in self.specs:
            self._init_block(prefix, spec)
        self._conv("head", config.width(0), config.out_channels, 1)
        del self._rng

    # -- construction -----------------------------------------------------

    def _conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        std = np.sqrt(2.0 / (c_in * k * k))
        w = self._rng.standard_normal((c_out, c_in, k, k)) * std
        self.params[f"{name}.weight"] = Tensor(w.astype(self.dtype), f"{name}.weight", True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(c_out, self.dtype), f"{name}.bias", True)

    def _bn(self, name: str, channels: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(channels, self.dtype), f"{name}.gamma", True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(channels, self.dtype), f"{name}.beta", True)
        self.bn[name] = BatchNormState.fresh(channels, self.dtype)

    def _init_block(self, prefix: str, spec: ResDenseBlockSpec) -> None:
        for k in range(spec.units):
            c_in = spec.unit_in_channels(k)
            unit = f"{prefix}.unit{k}"
            self._conv(f"{unit}.conv1", c_in, spec.unit_width, 3)
            self._bn(f"{unit}.bn1", spec.unit_width)
            self._conv(f"{unit}.conv2", spec.unit_width, spec.unit_width, 3)
            self._bn(f"{unit}.bn2", spec.unit_width)
            if c_in != spec.unit_width:
                self._conv(f"{unit}.proj", c_in, spec.unit_width, 1)
        self._conv(f"{prefix}.transition", spec.concat_width, spec.out_channels, 1)

    # -- bookkeeping ------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Trainable parameters followed by running statistics, in a fixed order."""
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def astype(self, dtype) -> "UNet":
        """Copy of this model with every array cast to ``dtype`` (float64 for gradcheck)."""
        clone = object.__new__(UNet)
        clone.config, clone.seed, clone.input_size = self.config, self.seed, self.input_size
        clone.dtype = np.dtype(dtype)
        clone.specs = self.specs
        clone.params = {
            n: Tensor(t.data.astype(dtype), n, t.requires_grad) for n, t in self.params.items()
        }
        clone.bn = {
            n: BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype), s.batches_seen)
            for n, s in self.bn.items()
        }
        return clone

    # -- forward ----------------------------------------------------------

    def _conv_fwd(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _bn_fwd(self, name: str, x: Tensor, training: bool) -> Tensor:
        return batch_norm(
            x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn[name], training
        )

    def _unit_fwd(self, unit: str, x: Tensor, training: bool) -> Tensor:
        h = self._conv_fwd(f"{unit}.conv1", x)
        h = relu(self._bn_fwd(f"{unit}.bn1", h, training))
        h = self._conv_fwd(f"{unit}.conv2", h)
        h = self._bn_fwd(f"{unit}.bn2", h, training)
        shortcut = self._conv_fwd(f"{unit}.proj", x) if f"{unit}.proj.weight" in self.params else x
        return relu(add(h, shortcut))

    def block_forward(self, prefix: str, spec: ResDenseBlockSpec, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != spec.in_channels:
            raise ShapeError(
                f"block {prefix} expects {spec.in_channels} input channels, got shape {x.shape}"
            )
        features = x
        for k in range(spec.units):
            out = self._unit_fwd(f"{prefix}.unit{k}", features, training)
            features = concat_channels(features, out)
        return self._conv_fwd(f"{prefix}.transition", features)

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        """Probability map of shape (n, out_channels, h, w).

        ``mode="train"`` uses batch statistics (updating the running ones) and
        records onto the active tape; ``mode="infer"`` uses running statistics
        and records nothing.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if x.data.ndim != 4:
            raise ShapeError(f"network input must be (n, c, h, w), got {x.shape}")
        d = self.config.divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise ShapeError(
                f"input height and width must be divisible by {d} for a "
                f"{self.config.levels}-level network, got {x.shape[2]}x{x.shape[3]}"
            )
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"network expects {self.config.in_channels} input channels, got {x.shape}")
        if mode == "infer":
            with no_grad():
                return self._forward(x, training=False)
        return self._forward(x, training=True)

    def _forward(self, x: Tensor, training: bool) -> Tensor:
        levels = self.config.levels
        specs = dict(self.specs)
        skips = []
        h = x
        for level in range(levels):
            h = self.block_forward(f"enc{level}", specs[f"enc{level}"], h, training)
            if level < levels - 1:
                skips.append(h)
                h = maxpool2x2(h)
        for level in reversed(range(levels - 1)):
            h = concat_channels(skips[level], upsample2x(h))
            h = self.block_forward(f"dec{level}", specs[f"dec{level}"], h, training)
        return sigmoid(self._conv_fwd("head", h))

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Inference on a (n, c, h, w) or (h, w) array; returns numpy probabilities."""
        arr = np.asarray(images, dtype=self.dtype)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[None, None]
        out = self.forward(Tensor(arr), mode="infer").data
        return out[0, 0] if squeeze else out


def build_unet(config: ModelConfig = ModelConfig(), seed: int = 0) -> UNet:
    return UNet(config, seed)


def unet_forward(model: UNet, x: Tensor, mode: str = "infer") -> Tensor:
    return model.forward(x, mode)


def resdense_block_forward(model: UNet, prefix: str, x: Tensor, mode: str = "infer") -> Tensor:
    spec = dict(model.specs)[prefix]
    if mode == "infer":
        with no_grad():
            return model.block_forward(prefix, spec, x, training=False)
    return model.block_forward(prefix, spec, x, training=True)

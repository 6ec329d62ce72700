"""Raster, mask, manifest and checkpoint persistence.

Formats
-------
* PGM ``P5``, 8- or 16-bit (big-endian samples), read as ``value / maxval``.
* ``IMGF32``: ``b"IMGF32\\n"``, width and height as little-endian uint32,
  then row-major little-endian float32 samples.
* Masks: 8-bit PGM, 0 = background, 255 = foreground.
* Checkpoint: ``b"RDSN0001"``, little-endian uint64 header length, a JSON
  header, then the contiguous little-endian float32 payload.
* Manifest: JSON ``{"samples": [SampleRecord, ...]}`` with paths relative
  to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .network import ModelConfig, UNet

IMGF_MAGIC = b"IMGF32\n"
CKPT_MAGIC = b"RDSN0001"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A file does not match the format its loader expects."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = f" at byte {offset}" if offset is not None else ""
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}{message}{where}")
        self.path = path
        self.offset = offset


# --------------------------------------------------------------------------
# rasters


def _parse_pgm_header(buf: bytes, path) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload_offset)."""
    if buf[:2] != b"P5":
        raise FormatError(f"bad magic {buf[:2]!r}, expected b'P5'", path, 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header", path, start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("malformed PGM header", path, pos)
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(f"PGM maxval {maxval} out of range", path, pos)
    return width, height, maxval, pos + 1


def _read_pgm_samples(path) -> tuple[np.ndarray, int, int]:
    buf = Path(path).read_bytes()
    width, height, maxval, off = _parse_pgm_header(buf, path)
    itemsize = 1 if maxval < 256 else 2
    need = width * height * itemsize
    if len(buf) - off < need:
        raise FormatError(f"truncated PGM payload: need {need} bytes, have {len(buf) - off}", path, len(buf))
    dtype = np.uint8 if itemsize == 1 else np.dtype(">u2")
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=off).reshape(height, width)
    return data, maxval, off


def read_raster(path) -> np.ndarray:
    """Load a grey-level raster as float32 in [0, 1] (PGM) or as stored (IMGF32)."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(len(IMGF_MAGIC))
    if head == IMGF_MAGIC:
        buf = path.read_bytes()
        if len(buf) < len(IMGF_MAGIC) + 8:
            raise FormatError("truncated IMGF32 header", path, len(buf))
        width, height = struct.unpack_from("<II", buf, len(IMGF_MAGIC))
        off = len(IMGF_MAGIC) + 8
        need = 4 * width * height
        if len(buf) - off < need:
            raise FormatError(f"truncated IMGF32 payload: need {need} bytes, have {len(buf) - off}", path, len(buf))
        return np.frombuffer(buf, dtype="<f4", count=width * height, offset=off).reshape(height, width).astype(np.float32)
    if head[:2] == b"P5":
        data, maxval, _ = _read_pgm_samples(path)
        return (data.astype(np.float64) / maxval).astype(np.float32)
    raise FormatError(f"unrecognised raster magic {head!r}", path, 0)


def write_raster(path, image: np.ndarray, fmt: str | None = None) -> None:
    """Write ``image``; ``fmt`` is "imgf32", "pgm8" or "pgm16" (default by suffix: .pgm -> pgm16)."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"rasters are 2D, got shape {image.shape}")
    if fmt is None:
        fmt = "pgm16" if path.suffix.lower() == ".pgm" else "imgf32"
    h, w = image.shape
    if fmt == "imgf32":
        payload = IMGF_MAGIC + struct.pack("<II", w, h) + image.astype("<f4").tobytes()
    elif fmt in ("pgm8", "pgm16"):
        maxval = 255 if fmt == "pgm8" else 65535
        if image.size and (np.nanmin(image) < 0 or np.nanmax(image) > 1):
            raise ValueError("PGM rasters hold values in [0, 1]")
        q = np.rint(image.astype(np.float64) * maxval)
        dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
        payload = f"P5\n{w} {h}\n{maxval}\n".encode() + q.astype(dtype).tobytes()
    else:
        raise ValueError(f"unknown raster format {fmt!r}")
    path.write_bytes(payload)


def read_mask(path) -> np.ndarray:
    """Load an 8-bit PGM mask as a bool array; any value other than 0/255 is rejected."""
    data, maxval, off = _read_pgm_samples(path)
    if maxval != 255:
        raise FormatError(f"mask must be 8-bit PGM with maxval 255, got maxval {maxval}", path, off)
    bad = np.flatnonzero((data != 0) & (data != 255))
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"nonbinary mask value {int(data.flat[i])}", path, off + i)
    return data == 255


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"masks are 2D, got shape {mask.shape}")
    h, w = mask.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.where(mask.astype(bool), 255, 0).astype(np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 colour image from an (h, w, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


# --------------------------------------------------------------------------
# manifests


@dataclass
class SampleRecord:
    id: str
    image_path: str
    lung_mask_path: str | None = None
    infection_mask_path: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"sample {self.id}: split must be 'train' or 'test', got {self.split!r}")


@dataclass
class Manifest:
    samples: list[SampleRecord]
    root: Path

    def resolve(self, rel: str | None) -> Path | None:
        return None if rel is None else self.root / rel

    def load_image(self, s: SampleRecord) -> np.ndarray:
        return read_raster(self.resolve(s.image_path))

    def load_lung(self, s: SampleRecord) -> np.ndarray | None:
        p = self.resolve(s.lung_mask_path)
        return None if p is None else read_mask(p)

    def load_infection(self, s: SampleRecord) -> np.ndarray | None:
        p = self.resolve(s.infection_mask_path)
        return None if p is None else read_mask(p)

    def split(self, name: str) -> "Manifest":
        return Manifest([s for s in self.samples if s.split == name], self.root)

    def by_id(self) -> dict[str, SampleRecord]:
        return {s.id: s for s in self.samples}


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"not a JSON manifest ({exc})", path) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise FormatError("manifest must be an object with a 'samples' list", path)
    samples = [SampleRecord(**rec) for rec in doc["samples"]]
    seen = set()
    for s in samples:
        if s.id in seen:
            raise FormatError(f"duplicate sample id {s.id!r}", path)
        seen.add(s.id)
    manifest = Manifest(samples, path.parent)
    if check_files:
        for s in samples:
            for rel in (s.image_path, s.lung_mask_path, s.infection_mask_path):
                if rel is not None and not manifest.resolve(rel).exists():
                    raise FileNotFoundError(f"sample {s.id}: missing file {manifest.resolve(rel)}")
    return manifest


def save_manifest(path, samples: list[SampleRecord]) -> None:
    doc = {"samples": [asdict(s) for s in samples]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# checkpoints


def config_digest(obj) -> str:
    """sha256 of the canonical JSON form of a dataclass or dict."""
    d = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_checkpoint(path, model: UNet, train_config=None) -> None:
    tensors = []
    chunks = []
    offset = 0
    for name, arr in model.state_tensors().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": CKPT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config_digest": config_digest(train_config) if train_config is not None else None,
        "input_size": list(model.input_size) if model.input_size else None,
        "bn_batches_seen": {name: st.batches_seen for name, st in model.bn.items()},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks))


def read_checkpoint_header(path) -> tuple[dict, int]:
    """Return the parsed header and the payload start offset."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:8]!r}", path, 0)
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header length", path, len(buf))
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    if len(buf) < 16 + hlen:
        raise FormatError("truncated checkpoint header", path, len(buf))
    try:
        header = json.loads(buf[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("checkpoint header is not valid JSON", path, 16) from None
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')!r}", path, 16)
    return header, 16 + hlen


def load_checkpoint(path, model: UNet | None = None) -> UNet:
    """Restore a model. If ``model`` is given its config must match the file's."""
    path = Path(path)
    header, start = read_checkpoint_header(path)
    buf = path.read_bytes()
    config = ModelConfig.from_dict(header["model_config"])
    if model is None:
        model = UNet(config)
    elif model.config != config:
        raise FormatError(f"checkpoint model_config {config} does not match model {model.config}", path)

    expected = model.state_tensors()
    entries = {t["name"]: t for t in header["tensors"]}
    prev_end = 0
    for t in header["tensors"]:
        if t["offset"] < prev_end:
            raise FormatError(f"tensor {t['name']}: overlapping or out-of-order offset", path, start + t["offset"])
        prev_end = t["offset"] + t["byte_len"]

    loaded = {}
    for name, current in expected.items():
        t = entries.get(name)
        if t is None:
            raise FormatError(f"tensor {name}: missing from checkpoint", path)
        shape = tuple(t["shape"])
        if shape != current.shape:
            raise FormatError(f"tensor {name}: shape {shape} disagrees with model shape {current.shape}", path)
        if t["byte_len"] != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {name}: byte_len {t['byte_len']} inconsistent with shape {shape}", path)
        lo = start + t["offset"]
        if lo + t["byte_len"] > len(buf):
            raise FormatError(f"tensor {name}: truncated payload", path, len(buf))
        loaded[name] = np.frombuffer(buf, dtype="<f4", count=int(np.prod(shape)), offset=lo).reshape(shape)
    extra = set(entries) - set(expected)
    if extra:
        raise FormatError(f"tensor {sorted(extra)[0]}: not part of this model", path)

    for name, t in model.params.items():
        t.data = loaded[name].astype(model.dtype)
    for name, st in model.bn.items():
        st.running_mean = loaded[f"{name}.running_mean"].astype(model.dtype)
        st.running_var = loaded[f"{name}.running_var"].astype(model.dtype)
        st.batches_seen = int(header.get("bn_batches_seen", {}).get(name, 0))
    size = header.get("input_size")
    model.input_size = tuple(size) if size else None
    return model

"""Dataset ingestion, preprocessing, and checkpoint persistence.

Images are binary PPM (`P6`, maxval 255) decoded to float (3, H, W) arrays
in [0, 1]. Manifests are CSV files with a header line naming at least
`path` and `label` columns (separator `;` or `,`, auto-detected from the
header); optional `x1,y1,x2,y2` columns give a region-of-interest box in
pixel coordinates (x1 <= x < x2, y1 <= y < y2). Paths resolve relative to
the manifest file.

Checkpoint layout (all integers little-endian):

    magic  b"NLVT"
    u32    format version (currently 1)
    u32    payload length in bytes
    payload
    u32    CRC-32 of the payload (zlib polynomial)

    payload := u32 config_len | config text (utf-8, flat key = value)
             | u32 entry_count | entry*
    entry   := u16 name_len | name utf-8 | u8 ndim | u32 dim* | f32 values*

Values are stored as 32-bit floats regardless of the model's compute
precision; a save/load round trip is bit-exact at 32 bits. Loading
validates magic, version, checksum, entry names, and shapes before
touching the target model, so a failed load never leaves partial state.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import Model, build_model
from .config import ModelConfig, config_from_text, config_to_text
from .errors import ContractError, CorruptionError, FormatError, ParseError

CHECKPOINT_MAGIC = b"NLVT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# PPM (P6) codec
# ---------------------------------------------------------------------------

def _read_ppm_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping `#` comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos:pos + 1] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"{path}: truncated header at byte {pos}")
    start = pos
    while pos < n and buf[pos:pos + 1] not in b" \t\r\n":
        pos += 1
    return buf[start:pos], pos


def decode_ppm(buf: bytes, path="<bytes>") -> np.ndarray:
    """Decode binary PPM bytes to a float (3, H, W) array in [0, 1]."""
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: bad magic at byte 0 (expected P6)")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(buf, pos, path)
        if not token.isdigit():
            raise FormatError(
                f"{path}: non-numeric header field at byte {pos - len(token)}"
            )
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (need 255)")
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise FormatError(f"{path}: missing whitespace after maxval at byte {pos}")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise FormatError(
            f"{path}: truncated pixel data at byte {pos + len(payload)} "
            f"(need {need} bytes)"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), path)


def save_ppm(path, img: np.ndarray) -> None:
    """Write a float (3, H, W) array in [0, 1] as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected a (3, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(q.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    path: Path
    label: int
    roi: tuple[int, int, int, int] | None = None


@dataclass
class Manifest:
    samples: list[Sample]
    class_count: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.samples)


def load_manifest(path, class_count: int = 43, split: str = "train",
                  check_paths: bool = True) -> Manifest:
    """Parse a manifest CSV; errors carry the offending line number."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines()]
    if not lines:
        raise ParseError(f"{path}: line 1: empty manifest")
    sep = ";" if ";" in lines[0] else ","
    header = [h.strip() for h in lines[0].split(sep)]
    required = ("path", "label")
    for col in required:
        if col not in header:
            raise ParseError(f"{path}: line 1: missing column {col!r}")
    roi_cols = ("x1", "y1", "x2", "y2")
    has_roi = all(c in header for c in roi_cols)
    idx = {name: header.index(name) for name in header}

    samples: list[Sample] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cells = [c.strip() for c in raw.split(sep)]
        if len(cells) != len(header):
            raise ParseError(
                f"{path}: line {lineno}: expected {len(header)} cells, got {len(cells)}"
            )
        try:
            label = int(cells[idx["label"]])
        except ValueError:
            raise ParseError(
                f"{path}: line {lineno}: non-integer label {cells[idx['label']]!r}"
            ) from None
        if not 0 <= label < class_count:
            raise ParseError(
                f"{path}: line {lineno}: label {label} outside [0, {class_count})"
            )
        sample_path = (path.parent / cells[idx["path"]]).resolve()
        if check_paths and not sample_path.is_file():
            raise ParseError(f"{path}: line {lineno}: missing file {sample_path}")
        roi = None
        if has_roi and all(cells[idx[c]] for c in roi_cols):
            try:
                roi = tuple(int(cells[idx[c]]) for c in roi_cols)
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: non-integer ROI"
                ) from None
        samples.append(Sample(sample_path, label, roi))
    return Manifest(samples, class_count, split)


def save_manifest(path, samples: list[Sample], *, sep: str = ";") -> None:
    path = Path(path)
    with_roi = any(s.roi is not None for s in samples)
    cols = ["path", "label"] + (["x1", "y1", "x2", "y2"] if with_roi else [])
    lines = [sep.join(cols)]
    for s in samples:
        rel = Path(s.path)
        try:
            rel = rel.relative_to(path.parent.resolve())
        except ValueError:
            pass
        cells = [str(rel), str(s.label)]
        if with_roi:
            cells += [str(v) for v in (s.roi if s.roi else ("", "", "", ""))]
        lines.append(sep.join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def crop_roi(img: np.ndarray, roi: tuple[int, int, int, int]) -> np.ndarray:
    """Crop (C, H, W) to the box x1 <= x < x2, y1 <= y < y2."""
    x1, y1, x2, y2 = roi
    _, h, w = img.shape
    if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
        raise ContractError(f"degenerate or out-of-bounds ROI {roi} for {w}x{h} image")
    return img[:, y1:y2, x1:x2]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centered sampling and edge clamping.

    Resizing to the source size is the exact identity.
    """
    if out_h < 1 or out_w < 1:
        raise ContractError(f"target size must be positive, got {out_h}x{out_w}")
    c, h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


def normalize_channels(img: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=img.dtype).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=img.dtype).reshape(-1, 1, 1)
    return (img - mean) / std


def preprocess(img: np.ndarray, roi: tuple[int, int, int, int] | None,
               side: int, mean=None, std=None) -> np.ndarray:
    """Crop to the ROI when given, resize to side x side, optionally normalize."""
    if roi is not None:
        img = crop_roi(img, roi)
    img = resize_bilinear(img, side, side)
    if mean is not None and std is not None:
        img = normalize_channels(img, mean, std)
    return img


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

class ArrayDataset:
    """In-memory dataset of [0, 1] images (N, C, side, side) and labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        if len(images) != len(labels):
            raise ContractError(
                f"images ({len(images)}) and labels ({len(labels)}) disagree"
            )
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def label(self, i: int) -> int:
        return int(self.labels[i])


class ManifestDataset:
    """Lazy-loading dataset over a manifest; decoded images are cached
    post-resize so epochs after the first skip the codec."""

    def __init__(self, manifest: Manifest, side: int):
        self.manifest = manifest
        self.side = side
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def image(self, i: int) -> np.ndarray:
        cached = self._cache.get(i)
        if cached is None:
            s = self.manifest.samples[i]
            cached = preprocess(load_ppm(s.path), s.roi, self.side)
            self._cache[i] = cached
        return cached

    def label(self, i: int) -> int:
        return self.manifest.samples[i].label


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    """Serialize config plus every parameter and buffer, checksummed."""
    config_blob = config_to_text(model.config).encode("utf-8")
    entries = list(model.named_state())
    body = [struct.pack("<I", len(config_blob)), config_blob,
            struct.pack("<I", len(entries))]
    body += [_pack_entry(name, arr) for name, arr in entries]
    payload = b"".join(body)
    blob = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(payload)),
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(
                f"{self.path}: truncated at byte {len(self.buf)} "
                f"(need {self.pos + n})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns (config, name -> f32 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptionError(f"{path}: bad magic (not a checkpoint)")
    outer = _Reader(blob[4:], path)
    version = outer.u32()
    if version != CHECKPOINT_VERSION:
        raise CorruptionError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    payload_len = outer.u32()
    payload = outer.take(payload_len)
    stored_crc = outer.u32()
    if zlib.crc32(payload) != stored_crc:
        raise CorruptionError(f"{path}: checksum mismatch")

    r = _Reader(payload, path)
    config_len = r.u32()
    config_text = r.take(config_len).decode("utf-8")
    cfg = config_from_text(config_text)
    count = r.u32()
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        if name in table:
            raise CorruptionError(f"{path}: duplicate parameter {name!r}")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(4 * n_values)
        table[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if r.pos != len(payload):
        raise CorruptionError(f"{path}: {len(payload) - r.pos} trailing payload bytes")
    return cfg, table


def restore_model(model: Model, table: dict[str, np.ndarray], path="<table>") -> None:
    """Copy a verified parameter table into `model`, atomically.

    Every model parameter/buffer must appear with a matching shape, and the
    table must contain no extra names; validation happens before any write.
    """
    state = dict(model.named_state())
    for name, current in state.items():
        entry = table.get(name)
        if entry is None:
            raise CorruptionError(f"{path}: missing parameter {name!r}")
        if tuple(entry.shape) != tuple(current.shape):
            raise CorruptionError(
                f"{path}: shape mismatch for {name!r}: checkpoint "
                f"{tuple(entry.shape)} vs model {tuple(current.shape)}"
            )
    unknown = set(table) - set(state)
    if unknown:
        raise CorruptionError(
            f"{path}: unknown parameter {sorted(unknown)[0]!r}"
        )
    dtype = model.config.dtype
    for name, p in model.named_parameters():
        p.data = table[name].astype(dtype)
        p.grad = None
    buffer_names = {name for name, _ in model.named_buffers()}
    for prefix, mod in model.named_modules():
        for key in list(getattr(mod, "_buffers", {})):
            full = f"{prefix}.{key}" if prefix else key
            if full in buffer_names:
                mod.set_buffer(key, table[full].astype(dtype))


def load_checkpoint(path, model: Model | None = None, seed: int = 0) -> Model:
    """Load a checkpoint; builds the model from the stored config when
    none is supplied, otherwise loads into the given model."""
    cfg, table = read_checkpoint(path)
    if model is None:
        model = build_model(cfg, seed=seed)
    restore_model(model, table, path)
    return model

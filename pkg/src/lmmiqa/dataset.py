"""Manifest loading, image decoding and train/test splits.

The manifest is a UTF-8 CSV with the fixed header ``id,path,split,score,region,noise``.
Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_COLUMNS = ("id", "path", "split", "score", "region", "noise")
SPLITS = ("train", "test")
SCORE_MIN, SCORE_MAX = 0.0, 4.0


class ManifestError(ValueError):
    """Base class for manifest validation failures."""


class MissingColumn(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class ScoreOutOfRange(ManifestError):
    pass


class ImageError(ValueError):
    pass


class DecodeFailure(ImageError):
    pass


class UnsupportedChannelCount(ImageError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    split: str
    score: float | None = None
    region: str | None = None
    noise: float | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id!r}: split must be one of {SPLITS}, got {self.split!r}")
        if self.score is not None and not SCORE_MIN <= self.score <= SCORE_MAX:
            raise ScoreOutOfRange(f"record {self.id!r}: score {self.score} outside [0, 4]")
        if self.noise is not None and self.noise < 0:
            raise ManifestError(f"record {self.id!r}: noise must be >= 0, got {self.noise}")

    @property
    def has_metadata(self) -> bool:
        return bool(self.region) and self.noise is not None


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Grayscale slice with intensities normalized to [0, 1].

    ``encoded`` keeps the original file bytes when the buffer came from disk, so
    prompts can attach exactly what was read instead of a re-encoding.
    """

    pixels: np.ndarray
    encoded: bytes | None = field(default=None, repr=False)
    media_type: str = "image/png"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ImageError(f"expected a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ImageError("intensities must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def png_bytes(self) -> bytes:
        """Bytes to attach to a prompt: the source file if known, else a 16-bit PNG."""
        if self.encoded is not None:
            return self.encoded
        return encode_png16(self.pixels)


@dataclass(frozen=True)
class Dataset:
    records: tuple[ImageRecord, ...]
    root: Path = Path(".")

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def train(self) -> list[ImageRecord]:
        return self.split("train")

    @property
    def test(self) -> list[ImageRecord]:
        return self.split("test")

    def counts(self) -> tuple[int, int]:
        return len(self.train), len(self.test)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def with_records(self, records) -> "Dataset":
        return replace(self, records=tuple(records))


def _parse_float(text: str, what: str, where: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        raise ManifestError(f"{where}: {what} {text!r} is not a decimal number") from None


def load_manifest(path) -> Dataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, expected header {','.join(MANIFEST_COLUMNS)}") from None
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: header missing column(s) {', '.join(missing)}")
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: header must be exactly {','.join(MANIFEST_COLUMNS)}, got {','.join(header)}"
            )

        records = []
        seen = set()
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            where = f"{path.name} row {row_no}"
            if len(row) != len(MANIFEST_COLUMNS):
                raise MissingColumn(f"{where}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            rid, rpath, split, score, region, noise = (c.strip() for c in row)
            if not rid:
                raise ManifestError(f"{where}: empty id")
            if rid in seen:
                raise DuplicateId(f"{where}: duplicate id {rid!r}")
            seen.add(rid)
            score_v = _parse_float(score, "score", where)
            if score_v is not None and not SCORE_MIN <= score_v <= SCORE_MAX:
                raise ScoreOutOfRange(f"{where} (id={rid}): score {score_v} outside [0, 4]")
            if split not in SPLITS:
                raise ManifestError(f"{where} (id={rid}): split must be train or test, got {split!r}")
            if score_v is None and split == "train":
                raise ManifestError(f"{where} (id={rid}): training rows need a score")
            noise_v = _parse_float(noise, "noise", where)
            if noise_v is not None and noise_v < 0:
                raise ManifestError(f"{where} (id={rid}): negative noise {noise_v}")
            records.append(ImageRecord(rid, rpath, split, score_v, region or None, noise_v))
    return Dataset(tuple(records), path.parent)


def _fmt_opt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(dataset: Dataset, path) -> None:
    """Write ``dataset`` in manifest format; floats use ``repr`` so they reload exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in dataset.records:
        writer.writerow([r.id, r.path, r.split, _fmt_opt(r.score), _fmt_opt(r.region), _fmt_opt(r.noise)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def decode_image(data: bytes, name: str = "<bytes>") -> ImageBuffer:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise DecodeFailure(f"{name}: cannot decode image ({exc})") from exc

    mode = img.mode
    if mode in ("L", "1"):
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    elif mode.startswith("I;16") or mode == "I":
        arr = np.asarray(img, dtype=np.float64)
        if arr.min() < 0 or arr.max() > 65535:
            raise DecodeFailure(f"{name}: integer image outside the 16-bit range")
        arr = arr / 65535.0
    elif mode == "F":
        raise DecodeFailure(f"{name}: floating-point images are not supported")
    else:
        raise UnsupportedChannelCount(f"{name}: {len(img.getbands())}-channel image (mode {mode}); grayscale required")
    fmt = (img.format or "png").lower()
    return ImageBuffer(arr, encoded=bytes(data), media_type=f"image/{fmt}")


def load_image(record: ImageRecord, root=None) -> ImageBuffer:
    p = Path(record.path)
    if root is not None and not p.is_absolute():
        p = Path(root) / p
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise DecodeFailure(f"{p}: cannot read file ({exc.strerror or exc})") from exc
    return decode_image(data, str(p))


def encode_png16(pixels: np.ndarray) -> bytes:
    arr = np.rint(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def encode_png8(pixels: np.ndarray) -> bytes:
    arr = np.rint(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()

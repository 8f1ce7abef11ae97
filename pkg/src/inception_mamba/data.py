"""Synthetic blob corpus, portable pixmap/graymap I/O and dataset manifests."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor_core as tc

BACKGROUND = np.array([0.15, 0.2, 0.25])
FOREGROUND = np.array([0.9, 0.75, 0.8])
INTENSITY_RANGE = (0.7, 1.0)
CLUTTER_AMPLITUDE = 0.35


@dataclass
class SegSample:
    image: np.ndarray  # (3, h, w) in [0, 1]
    mask: np.ndarray   # (h, w) class indices
    id: str


@dataclass(frozen=True)
class BlobSpec:
    image_size: int = 64
    blobs_min: int = 1
    blobs_max: int = 3
    radius_min: float = 8.0
    radius_max: float = 16.0
    blur_sigma: float = 1.0
    clutter_density: float = 0.01
    overlap_prob: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        """Raise ValueError naming the first offending field."""
        if self.image_size < 4:
            raise ValueError(f"image_size: must be >= 4, got {self.image_size}")
        if not 1 <= self.blobs_min <= self.blobs_max:
            raise ValueError(f"blobs_min/blobs_max: need 1 <= min <= max, got {self.blobs_min}, {self.blobs_max}")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError(f"radius_min: need 0 < radius_min <= radius_max, got {self.radius_min}, {self.radius_max}")
        if 2 * self.radius_max + 1 > self.image_size:
            raise ValueError(f"radius_max: blob of radius {self.radius_max} does not fit a {self.image_size}px image")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma: must be >= 0, got {self.blur_sigma}")
        if not 0 <= self.clutter_density <= 1:
            raise ValueError(f"clutter_density: must lie in [0, 1], got {self.clutter_density}")
        if not 0 <= self.overlap_prob <= 1:
            raise ValueError(f"overlap_prob: must lie in [0, 1], got {self.overlap_prob}")

    def expected_single_blob_fraction(self) -> float:
        """Mean foreground fraction of a one-blob image: pi * E[a] * E[b] / size^2."""
        mean_r = 0.5 * (self.radius_min + self.radius_max)
        return math.pi * mean_r * mean_r / self.image_size ** 2


def _ellipse(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def gen_blob_sample(spec: BlobSpec, index: int) -> SegSample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    field_ = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    prev = None
    for j in range(int(rng.integers(spec.blobs_min, spec.blobs_max + 1))):
        a, b = rng.uniform(spec.radius_min, spec.radius_max, size=2)
        theta = rng.uniform(0.0, math.pi)
        reach = max(a, b)
        lo, hi = reach, size - 1 - reach
        if prev is not None and rng.random() < spec.overlap_prob:
            pcy, pcx, pr = prev
            angle = rng.uniform(0.0, 2 * math.pi)
            dist = rng.uniform(0.3, 0.8) * (pr + min(a, b))
            cy = float(np.clip(pcy + dist * math.sin(angle), lo, hi))
            cx = float(np.clip(pcx + dist * math.cos(angle), lo, hi))
        else:
            cy, cx = rng.uniform(lo, hi, size=2)
        blob = _ellipse(size, cy, cx, a, b, theta)
        field_[blob] = rng.uniform(*INTENSITY_RANGE)
        mask |= blob
        prev = (cy, cx, min(a, b))
    if spec.blur_sigma > 0:
        field_ = ndimage.gaussian_filter(field_, spec.blur_sigma, mode="nearest")
    image = BACKGROUND[:, None, None] + (FOREGROUND - BACKGROUND)[:, None, None] * field_[None]
    if spec.clutter_density > 0:
        centres = rng.random((size, size)) < spec.clutter_density
        amp = np.where(centres, rng.uniform(-CLUTTER_AMPLITUDE, CLUTTER_AMPLITUDE, size=(size, size)), 0.0)
        speckle = ndimage.convolve(amp, np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], float), mode="constant")
        image = image + speckle[None]
    # quantise to the 8-bit grid so file round-trips are exact
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SegSample(image, mask.astype(np.uint8), f"blob{index:05d}")


def gen_blob_dataset(spec: BlobSpec, n_samples: int, start: int = 0) -> list[SegSample]:
    spec.validate()
    return [gen_blob_sample(spec, i) for i in range(start, start + n_samples)]


# --- portable pixmap / graymap ---------------------------------------------------------

class PnmError(ValueError):
    """Malformed or truncated P5/P6 file."""


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pnm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if data[:2] != magic:
        raise PnmError(f"expected {magic.decode()} header, got {data[:2]!r}")
    pos, vals = 2, []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m or not m.group(1).isdigit():
            raise PnmError("malformed header")
        vals.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = vals
    if maxval != 255:
        raise PnmError(f"maxval must be 255, got {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PnmError("missing whitespace after header")
    payload = data[pos + 1:]
    want = width * height * channels
    if len(payload) < want:
        raise PnmError(f"truncated payload: {len(payload)} of {want} bytes")
    if len(payload) > want:
        raise PnmError(f"{len(payload) - want} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)


def write_image(path, image: np.ndarray) -> None:
    """(3, h, w) image in [0, 1] -> binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) image, got {img.shape}")
    raw = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (img.shape[2], img.shape[1]) + raw.tobytes())


def read_image(path) -> np.ndarray:
    return _parse_pnm(Path(path).read_bytes(), b"P6", 3).transpose(2, 0, 1) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    """(h, w) class-index mask -> binary P5."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.min(initial=0) < 0 or m.max(initial=0) > 255:
        raise ValueError("mask must be 2-D with class indices in [0, 255]")
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (m.shape[1], m.shape[0]) + m.astype(np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    return _parse_pnm(Path(path).read_bytes(), b"P5", 1)[:, :, 0].copy()


# --- manifests ------------------------------------------------------------------------

class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str


def write_manifest(path, entries) -> None:
    lines = [f"{e.id}\t{e.image_path}\t{e.mask_path}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    entries, seen = [], {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise ManifestError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        if parts[0] in seen:
            raise ManifestError(f"duplicate id {parts[0]!r} on lines {seen[parts[0]]} and {lineno}")
        seen[parts[0]] = lineno
        entries.append(ManifestEntry(*parts))
    return entries


def resize_image(image: np.ndarray, h: int, w: int) -> np.ndarray:
    if image.shape[1:] == (h, w):
        return image
    return tc.bilinear_resize(tc.Tensor(image[None]), h, w).data[0].copy()


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize; labels are never blended."""
    if mask.shape == (h, w):
        return mask
    rows = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(int), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(int), mask.shape[1] - 1)
    return mask[rows][:, cols]


def load_manifest(path, size: tuple[int, int] | None = None) -> list[SegSample]:
    """Read every sample named by a manifest (paths relative to its directory)."""
    base = Path(path).parent
    entries = read_manifest(path)
    missing = [(i, e) for i, e in enumerate(entries, start=1)
               if not (base / e.image_path).is_file() or not (base / e.mask_path).is_file()]
    if missing:
        where = ", ".join(f"line {i} ({e.id})" for i, e in missing[:5])
        raise ManifestError(f"missing files for {len(missing)} entries: {where}")
    samples = []
    for e in entries:
        image, mask = read_image(base / e.image_path), read_mask(base / e.mask_path)
        if image.shape[1:] != mask.shape:
            raise ManifestError(f"{e.id}: image {image.shape[1:]} and mask {mask.shape} differ in size")
        if size is not None:
            image, mask = resize_image(image, *size), resize_mask(mask, *size)
        samples.append(SegSample(image, mask, e.id))
    return samples


def write_dataset(out_dir, samples: list[SegSample], manifest_name: str = "manifest.tsv") -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img_rel, mask_rel = f"images/{s.id}.ppm", f"masks/{s.id}.pgm"
        write_image(out / img_rel, s.image)
        write_mask(out / mask_rel, s.mask)
        entries.append(ManifestEntry(s.id, img_rel, mask_rel))
    write_manifest(out / manifest_name, entries)
    return out / manifest_name


def blobspec_fields() -> list[str]:
    return [f.name for f in fields(BlobSpec)]

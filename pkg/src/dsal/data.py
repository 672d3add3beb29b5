"""Synthetic bone-like segmentation data, preprocessing, and PGM file IO."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np


class ConstantImageWarning(UserWarning):
    pass


class PGMError(ValueError):
    """Malformed or out-of-contract PGM file; carries path and byte offset."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float32 [1, H, W] in [0, 1]
    mask: Optional[np.ndarray] = None  # uint8 [H, W] in {0, 1}
    labeled: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.image.shape[1:]:
                raise ValueError(f"sample {self.id}: mask {self.mask.shape} does not match image {self.image.shape}")

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        same_mask = (self.mask is None and other.mask is None) or (
            self.mask is not None and other.mask is not None and np.array_equal(self.mask, other.mask))
        return (self.id == other.id and self.labeled == other.labeled and same_mask
                and self.image.shape == other.image.shape and np.array_equal(self.image, other.image))


@dataclass(frozen=True)
class DatasetConfig:
    resolution: Tuple[int, int] = (64, 64)
    n_train: int = 139
    n_val: int = 20
    n_test: int = 50
    shapes_per_image: Tuple[int, int] = (3, 8)
    noise_sigma: float = 0.08
    illumination: float = 0.2
    fg_level: float = 0.75
    bg_level: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"shapes_per_image must satisfy 1 <= lo <= hi, got {self.shapes_per_image}")
        if min(self.resolution) < 8:
            raise ValueError(f"resolution too small: {self.resolution}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if self.noise_sigma < 0 or self.illumination < 0:
            raise ValueError("noise_sigma and illumination must be non-negative")
        if not 0 <= self.bg_level < self.fg_level <= 1:
            raise ValueError("need 0 <= bg_level < fg_level <= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d


def _capsule_mask(h: int, w: int, p0, p1, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    seg_len2 = float(d @ d)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(seg_len2, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    dy = yy - (p0[0] + t * d[0])
    dx = xx - (p0[1] + t * d[1])
    return dy * dy + dx * dx <= radius * radius


def synth_sample(rng: np.random.Generator, config: DatasetConfig = DatasetConfig(), sample_id: str = "") -> Sample:
    """Render a few bright elongated capsules on a noisy, unevenly lit background.

    Capsule lengths and radii scale with the image size. The mask is the exact
    union of the rendered capsules.
    """
    h, w = config.resolution
    size = min(h, w)
    n_shapes = int(rng.integers(config.shapes_per_image[0], config.shapes_per_image[1] + 1))
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(n_shapes):
        length = rng.uniform(0.12, 0.38) * size
        radius = rng.uniform(0.02, 0.055) * size
        angle = rng.uniform(0.0, np.pi)
        cy = rng.uniform(0.15, 0.85) * h
        cx = rng.uniform(0.15, 0.85) * w
        half = 0.5 * length * np.array([np.sin(angle), np.cos(angle)])
        mask |= _capsule_mask(h, w, (cy - half[0], cx - half[1]), (cy + half[0], cx + half[1]), radius)

    image = np.where(mask, config.fg_level, config.bg_level)
    theta = rng.uniform(0.0, 2 * np.pi)
    strength = rng.uniform(0.0, config.illumination)
    if strength > 0:
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(theta) * (yy / max(h - 1, 1) - 0.5) + np.sin(theta) * (xx / max(w - 1, 1) - 0.5))
        image = image + strength * ramp
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    return Sample(sample_id, image[None].astype(np.float32), mask.astype(np.uint8))


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]. A constant image becomes all zeros (with a warning)."""
    img = np.asarray(image, dtype=np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        warnings.warn("constant image; normalized to zeros", ConstantImageWarning, stacklevel=2)
        return np.zeros_like(img)
    if lo == 0.0 and hi == 1.0:
        return img.copy()
    out = (img - np.float32(lo)) / np.float32(hi - lo)
    return np.clip(out, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid k/255 so in-memory and on-disk images agree."""
    return to_uint8(image).astype(np.float32) / np.float32(255)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def preprocess(image: np.ndarray) -> np.ndarray:
    return quantize(normalize_intensity(image))


class Splits(NamedTuple):
    train: List[Sample]
    val: List[Sample]
    test: List[Sample]


def make_dataset(config: DatasetConfig = DatasetConfig()) -> Splits:
    """Generate and preprocess all samples, then split them by a seeded shuffle.

    Sample ids look like ``train_007``.
    """
    n_total = config.n_train + config.n_val + config.n_test
    root = np.random.SeedSequence(config.seed)
    children = root.spawn(n_total + 1)
    order = np.random.default_rng(children[-1]).permutation(n_total)
    raw = [synth_sample(np.random.default_rng(children[i]), config) for i in range(n_total)]
    bounds = [("train", 0, config.n_train),
              ("val", config.n_train, config.n_train + config.n_val),
              ("test", config.n_train + config.n_val, n_total)]
    out = {}
    for split, lo, hi in bounds:
        samples = []
        for k, src in enumerate(order[lo:hi]):
            s = raw[src]
            samples.append(Sample(f"{split}_{k:03d}", preprocess(s.image), s.mask))
        out[split] = samples
    return Splits(out["train"], out["val"], out["test"])


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit)


def write_pgm(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-d uint8 array")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_pgm(path) -> Tuple[np.ndarray, int]:
    """Parse a binary 8-bit PGM; returns (uint8 [H, W] array, maxval)."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise PGMError(path, 0, "missing P5 magic")
    pos = 2
    fields, starts = [], []
    while len(fields) < 3:
        skipped = False
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                nl = blob.find(b"\n", pos)
                if nl < 0:
                    raise PGMError(path, pos, "unterminated comment in header")
                pos = nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
            skipped = True
        if not skipped:
            raise PGMError(path, pos, "expected whitespace before header field")
        tok_start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise PGMError(path, tok_start, "expected a decimal header field")
        fields.append(int(blob[tok_start:pos]))
        starts.append(tok_start)
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise PGMError(path, pos, "expected a single whitespace byte after maxval")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PGMError(path, starts[0], f"invalid dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise PGMError(path, starts[2], f"maxval {maxval} is not an 8-bit value")
    need = width * height
    if len(blob) - pos != need:
        raise PGMError(path, pos, f"expected {need} pixel bytes, found {len(blob) - pos}")
    arr = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(height, width)
    if int(arr.max(initial=0)) > maxval:
        bad = int(np.argmax(arr > maxval))
        raise PGMError(path, pos + bad, f"pixel value exceeds maxval {maxval}")
    return arr.copy(), maxval


def load_pair(image_path, mask_path=None, sample_id: Optional[str] = None, labeled: bool = False) -> Sample:
    """Read an image PGM (scaled to [0, 1]) and an optional {0, 255} mask PGM."""
    image_path = Path(image_path)
    img, maxval = read_pgm(image_path)
    image = img.astype(np.float32) / np.float32(maxval)
    mask = None
    if mask_path is not None:
        m, mmax = read_pgm(mask_path)
        if m.shape != img.shape:
            raise PGMError(mask_path, 0, f"mask is {m.shape[1]}x{m.shape[0]} but image is {img.shape[1]}x{img.shape[0]}")
        bad = (m != 0) & (m != 255)
        if bad.any():
            header_len = Path(mask_path).stat().st_size - m.size
            idx = int(np.argmax(bad.ravel()))
            raise PGMError(mask_path, header_len + idx, f"mask value {int(m.ravel()[idx])} is not 0 or 255")
        mask = (m == 255).astype(np.uint8)
    return Sample(sample_id or image_path.stem, image[None], mask, labeled=labeled)


def save_pair(sample: Sample, directory) -> Tuple[Path, Optional[Path]]:
    """Write ``<id>.pgm`` and, if the sample has a mask, ``<id>_mask.pgm``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{sample.id}.pgm"
    write_pgm(image_path, to_uint8(sample.image[0]))
    mask_path = None
    if sample.mask is not None:
        mask_path = directory / f"{sample.id}_mask.pgm"
        write_pgm(mask_path, (sample.mask.astype(np.uint8) * 255).astype(np.uint8))
    return image_path, mask_path


def load_split(directory) -> List[Sample]:
    """Load every ``<id>.pgm`` (with ``<id>_mask.pgm`` when present), sorted by id."""
    directory = Path(directory)
    samples = []
    for p in sorted(directory.glob("*.pgm")):
        if p.stem.endswith("_mask"):
            continue
        mp = directory / f"{p.stem}_mask.pgm"
        samples.append(load_pair(p, mp if mp.exists() else None))
    return samples


def stack(samples: List[Sample]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Samples -> ([N,1,H,W] float32 images, [N,H,W] uint8 masks or None)."""
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, 0, 0), np.float32)
    if samples and all(s.mask is not None for s in samples):
        return images, np.stack([s.mask for s in samples])
    return images, None

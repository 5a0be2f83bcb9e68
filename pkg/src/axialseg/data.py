"""Synthetic small-lesion images and the on-disk PGM dataset layout."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

BACKGROUND = 0.2
LESION_CONTRAST = (0.45, 0.65)
OCCLUDER_CONTRAST = (0.06, 0.14)


class DataError(ValueError):
    pass


class PGMError(DataError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    count: int = 8
    size: int = 32
    lesion_radius_range: tuple[float, float] = (3.0, 6.0)
    lesion_count_range: tuple[int, int] = (1, 2)
    noise_sigma: float = 0.03
    occluder_count: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesion_radius_range", tuple(float(r) for r in self.lesion_radius_range))
        object.__setattr__(self, "lesion_count_range", tuple(int(n) for n in self.lesion_count_range))
        self.validate()

    def validate(self) -> None:
        r_min, r_max = self.lesion_radius_range
        n_min, n_max = self.lesion_count_range
        if self.count < 1:
            raise DataError(f"count must be >= 1, got {self.count}")
        if self.size < 16:
            raise DataError(f"size must be >= 16, got {self.size}")
        if not 1.0 <= r_min <= r_max:
            raise DataError(f"lesion_radius_range must satisfy 1 <= r_min <= r_max, got {self.lesion_radius_range}")
        if r_max >= self.size / 4:
            raise DataError(f"r_max={r_max} must be < size/4={self.size / 4}")
        if not 1 <= n_min <= n_max:
            raise DataError(f"lesion_count_range must satisfy 1 <= n_min <= n_max, got {self.lesion_count_range}")
        if self.noise_sigma < 0 or self.occluder_count < 0:
            raise DataError("noise_sigma and occluder_count must be non-negative")

    def area_bound(self) -> float:
        """Upper bound on the lesion area fraction of any generated mask."""
        r_max = self.lesion_radius_range[1]
        return math.pi * r_max**2 * self.lesion_count_range[1] / self.size**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_radius_range"] = list(self.lesion_radius_range)
        d["lesion_count_range"] = list(self.lesion_count_range)
        return d


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


def _ellipse(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return u * u + v * v < 1.0


def _lesion(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    size = cfg.size
    r_min, r_max = cfg.lesion_radius_range
    a, b = rng.uniform(r_min, r_max, size=2)
    theta = rng.uniform(0.0, math.pi)
    cy, cx = rng.uniform(r_max, size - 1 - r_max, size=2)
    support = _ellipse(size, cy, cx, a, b, theta)
    # lattice counts can exceed the continuous area; shrink until the bound holds
    while support.sum() > math.pi * r_max**2:
        a, b = 0.95 * a, 0.95 * b
        support = _ellipse(size, cy, cx, a, b, theta)
    return support


def _occluder(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = rng.choice([1.0, -1.0]) * rng.uniform(math.pi / 6, math.pi / 3)
    offset = rng.uniform(-size / 2, size / 2)
    half_width = rng.uniform(1.0, 2.5)
    dist = (xx - size / 2) * math.sin(angle) - (yy - size / 2) * math.cos(angle) - offset
    return np.abs(dist) <= half_width


def generate(cfg: SynthConfig) -> list[Sample]:
    """Dark speckled background, faint diagonal bands, bright elliptical lesions."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for i in range(cfg.count):
        size = cfg.size
        image = np.full((size, size), BACKGROUND)
        for _ in range(cfg.occluder_count):
            image = image + rng.uniform(*OCCLUDER_CONTRAST) * _occluder(rng, size)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))):
            support = _lesion(rng, cfg)
            image = np.where(support, BACKGROUND + rng.uniform(*LESION_CONTRAST), image)
            mask |= support
        if cfg.noise_sigma > 0:
            image = image + cfg.noise_sigma * rng.standard_normal((size, size))
        samples.append(Sample(np.clip(image, 0.0, 1.0), mask.astype(np.float64), f"sample_{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# PGM


def quantize(raster: np.ndarray) -> np.ndarray:
    """Map [0, 1] to bytes with round-half-up."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.size and (raster.min() < 0.0 or raster.max() > 1.0 or not np.isfinite(raster).all()):
        raise PGMError("raster values must lie in [0, 1]")
    return np.floor(raster * 255.0 + 0.5).astype(np.uint8)


def write_pgm(raster, path) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise PGMError(f"expected a 2D raster, got shape {raster.shape}")
    h, w = raster.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + quantize(raster).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm_bytes(path) -> np.ndarray:
    """Raw 8-bit payload of a binary PGM as ``uint8[h, w]``."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise PGMError(f"{path}: unsupported format {blob[:2]!r}, only binary P5 is supported")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise PGMError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise PGMError(f"{path}: malformed header {fields}") from None
    if w < 1 or h < 1:
        raise PGMError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise PGMError(f"{path}: maxval {maxval} unsupported, expected 255")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise PGMError(f"{path}: truncated header")
    payload = blob[pos + 1 :]
    if len(payload) < w * h:
        raise PGMError(f"{path}: truncated payload, {len(payload)} of {w * h} bytes")
    if len(payload) > w * h:
        raise PGMError(f"{path}: {len(payload) - w * h} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    return read_pgm_bytes(path) / 255.0


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(samples: list[Sample], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        for path, raster in ((out_dir / f"{s.id}.pgm", s.image), (out_dir / f"{s.id}_mask.pgm", s.mask)):
            write_pgm(raster, path)
            written.append(path)
    return written


def load_dataset(directory) -> list[Sample]:
    """Pair ``<id>.pgm`` with ``<id>_mask.pgm``; samples are sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    images, masks = {}, {}
    for path in directory.glob("*.pgm"):
        if path.stem.endswith("_mask"):
            masks[path.stem[: -len("_mask")]] = path
        else:
            images[path.stem] = path
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        which = [f"{images.get(o) or masks.get(o)}" for o in orphans]
        raise DataError(f"unpaired files in {directory}: {', '.join(which)}")
    if not images:
        raise DataError(f"no samples found in {directory}")
    samples = []
    for sid in sorted(images):
        raw = read_pgm_bytes(masks[sid])
        bad = np.setdiff1d(np.unique(raw), [0, 255])
        if bad.size:
            raise DataError(f"non-binary mask {masks[sid]}: contains byte values {bad.tolist()}")
        samples.append(Sample(read_pgm(images[sid]), (raw == 255).astype(np.float64), sid))
    return samples


def split(samples: list[Sample], train_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Seeded shuffle, then cut the first ``round(train_fraction * n)`` as training."""
    if not 0.0 <= train_fraction <= 1.0:
        raise DataError(f"train_fraction must be in [0, 1], got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]

"""Dataset ingestion, the flip x rotation x translation augmentation grid,
and synthetic corpora."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import parse_kv
from .network import ConfigError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")
FLIPS = ("identity", "horizontal", "vertical", "both")


class DataError(RuntimeError):
    """Missing or malformed dataset files."""


@dataclass
class Sample:
    image: np.ndarray  # H x W, float in [0, 1]
    mask: np.ndarray  # H x W, exactly 0 or 1
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"{self.id}: mask is not binary")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    flips: tuple = ("identity",)
    rotation: tuple = (0, 0, 1)  # min, max, step in degrees
    translate_x: tuple = (0,)
    translate_y: tuple = (0,)

    def __post_init__(self):
        bad = [f for f in self.flips if f not in FLIPS]
        if bad or not self.flips or len(set(self.flips)) != len(self.flips):
            raise ConfigError(f"flips must be distinct values from {FLIPS}, got {self.flips}")
        lo, hi, step = self.rotation
        if step <= 0:
            raise ConfigError(f"rotation step must be positive, got {step}")
        if lo != -hi:
            raise ConfigError(f"rotation range must be symmetric about 0, got [{lo}, {hi}]")
        if 0 not in self.rotations():
            raise ConfigError(f"rotation sequence {self.rotations()} does not include 0")
        if not self.translate_x or not self.translate_y:
            raise ConfigError("translation offsets must be non-empty")

    def rotations(self) -> list[float]:
        lo, hi, step = self.rotation
        n = int(round((hi - lo) / step))
        if not np.isclose(lo + n * step, hi):
            raise ConfigError(f"rotation step {step} does not divide [{lo}, {hi}]")
        return [lo + i * step for i in range(n + 1)]

    def translations(self) -> list[tuple[int, int]]:
        return list(itertools.product(self.translate_x, self.translate_y))

    def grid(self) -> list[tuple[str, float, int, int]]:
        return [(f, a, dx, dy) for f in self.flips for a in self.rotations() for dx, dy in self.translations()]

    def __len__(self) -> int:
        return len(self.flips) * len(self.rotations()) * len(self.translations())


PRESETS = {
    "identity": AugmentationSpec(),
    "ph2": AugmentationSpec(FLIPS, (-16, 16, 4), (-40, -20, 0, 20, 40), (-40, -20, 0, 20, 40)),
    "drive": AugmentationSpec(FLIPS, (-24, 24, 4), (-20, -10, 0, 10, 20), (-20, -10, 0, 10, 20)),
}


def load_augmentation_spec(name_or_path: Union[str, Path]) -> AugmentationSpec:
    """A preset name (identity, ph2, drive) or a key-value spec file with keys
    ``flips``, ``rotation`` (min,max,step), ``translate_x``, ``translate_y``."""
    if str(name_or_path).lower() in PRESETS:
        return PRESETS[str(name_or_path).lower()]
    path = Path(name_or_path)
    try:
        raw = parse_kv(path.read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read augmentation spec {path}: {exc}") from exc
    unknown = set(raw) - {"flips", "rotation", "translate_x", "translate_y"}
    if unknown:
        raise ConfigError(f"{path}: unknown key {sorted(unknown)[0]!r}")

    def nums(key, default, conv):
        return tuple(conv(v) for v in raw[key].split(",")) if key in raw else default

    try:
        flips = tuple(v.strip() for v in raw["flips"].split(",")) if "flips" in raw else ("identity",)
        rotation = nums("rotation", (0, 0, 1), float)
        if len(rotation) != 3:
            raise ConfigError(f"{path}: rotation needs min,max,step")
        return AugmentationSpec(flips, rotation, nums("translate_x", (0,), int), nums("translate_y", (0,), int))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def flip(arr: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return arr
    if kind == "horizontal":
        return arr[:, ::-1]
    if kind == "vertical":
        return arr[::-1, :]
    if kind == "both":
        return arr[::-1, ::-1]
    raise ValueError(f"unknown flip {kind!r}")


def translate(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content right by dx and down by dy; vacated pixels are 0."""
    h, w = arr.shape
    out = np.zeros_like(arr)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = arr[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
    out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    return out


def transform(image: np.ndarray, mask: np.ndarray, flip_kind: str, angle: float, dx: int, dy: int):
    """Flip, rotate about the centre, then translate; image bilinear, mask nearest."""
    img = flip(image, flip_kind)
    m = flip(mask, flip_kind)
    if angle:
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        m = ndimage.rotate(m.astype(np.float64), angle, reshape=False, order=0, mode="constant", cval=0.0)
    img = translate(np.ascontiguousarray(img), dx, dy)
    m = translate(np.ascontiguousarray(m), dx, dy)
    img = np.clip(img, 0.0, 1.0).astype(image.dtype, copy=False)
    m = (m >= 0.5).astype(mask.dtype)
    return img, m


def variant_id(base: str, flip_kind: str, angle: float, dx: int, dy: int) -> str:
    # the untransformed grid point keeps the original name
    if flip_kind == "identity" and angle == 0 and dx == 0 and dy == 0:
        return base
    return f"{base}__{flip_kind}_r{angle:+g}_x{dx:+d}_y{dy:+d}"


def augment(sample: Sample, spec: AugmentationSpec) -> list[Sample]:
    """One sample per grid point, in flip-major, rotation, translation order."""
    out = []
    for f, a, dx, dy in spec.grid():
        img, m = transform(sample.image, sample.mask, f, a, dx, dy)
        out.append(Sample(img, m, variant_id(sample.id, f, a, dx, dy)))
    return out


# ---------------------------------------------------------------------------
# image files and dataset layout


def read_gray(path: Union[str, Path], allow_color: bool = False) -> np.ndarray:
    """Read an 8-bit grayscale PNG/PGM as uint8. Colour input is rejected
    unless ``allow_color``, in which case it is converted to luma."""
    try:
        with Image.open(path) as im:
            if im.mode == "1":
                im = im.convert("L")
            if im.mode != "L":
                if not allow_color:
                    raise DataError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
                im = im.convert("L")
            return np.array(im)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _resize(arr: np.ndarray, resolution: Optional[tuple], resample) -> np.ndarray:
    if resolution is None or arr.shape == tuple(resolution):
        return arr
    h, w = resolution
    return np.array(Image.fromarray(arr).resize((w, h), resample=resample))


def read_split(root: Union[str, Path]) -> dict[str, str]:
    """Parse ``split.txt`` (``id,train|test`` per line); {} if absent."""
    path = Path(root) / "split.txt"
    if not path.exists():
        return {}
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: expected 'id,train|test', got {line!r}")
        out[parts[0]] = parts[1]
    return out


def load_dataset(
    root: Union[str, Path],
    resolution: Optional[tuple] = None,
    allow_color: bool = False,
    ids: Optional[Sequence[str]] = None,
) -> list[Sample]:
    """Load ``root/images`` and ``root/masks`` (matching stems) sorted by id.

    Images are resized bilinearly and scaled by 1/255; masks are resized
    nearest-neighbour and binarised at 128.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    files = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if img_dir.is_dir() else []
    if not files:
        logger.warning("no images found under %s", img_dir)
        return []
    if not mask_dir.is_dir():
        raise DataError(f"mask directory {mask_dir} is missing")
    masks = {p.stem: p for p in mask_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES}
    wanted = None if ids is None else set(ids)
    samples = []
    for path in files:
        if wanted is not None and path.stem not in wanted:
            continue
        if path.stem not in masks:
            raise DataError(f"no mask for image {path} (looked for {mask_dir / path.stem}.png|.pgm)")
        img = _resize(read_gray(path, allow_color), resolution, Image.BILINEAR)
        m = _resize(read_gray(masks[path.stem], allow_color), resolution, Image.NEAREST)
        samples.append(Sample(img.astype(np.float64) / 255.0, (m >= 128).astype(np.float64), path.stem))
    return samples


def write_mask_png(path: Union[str, Path], mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)).save(path)


def write_gray(path: Union[str, Path], image: np.ndarray) -> None:
    """Save a [0, 1] image as 8-bit PNG or PGM (by suffix)."""
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


def write_soft_pgm(path: Union[str, Path], values: np.ndarray) -> None:
    """Save a [0, 1] map as a 16-bit PGM."""
    Image.fromarray(np.round(np.clip(values, 0, 1) * 65535).astype(np.uint16)).save(path, format="PPM")


def write_dataset(root: Union[str, Path], samples: Sequence[Sample], split: Optional[dict] = None, suffix: str = ".png") -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_gray(root / "images" / f"{s.id}{suffix}", s.image)
        write_mask_png(root / "masks" / f"{s.id}{suffix}", s.mask)
    if split:
        (root / "split.txt").write_text("".join(f"{k},{v}\n" for k, v in split.items()))


def split_ids(ids: Sequence[str], n_train: int, seed: int = 0) -> dict[str, str]:
    """Seeded random train/test assignment with exactly ``n_train`` train ids."""
    ids = sorted(ids)
    if not 0 <= n_train <= len(ids):
        raise DataError(f"cannot take {n_train} training ids from {len(ids)}")
    chosen = set(np.random.default_rng(seed).permutation(len(ids))[:n_train].tolist())
    return {k: ("train" if i in chosen else "test") for i, k in enumerate(ids)}


# ---------------------------------------------------------------------------
# synthetic corpora


def disk_mask(shape: tuple, center: tuple, radius: float) -> np.ndarray:
    """1 where (x - cx)^2 + (y - cy)^2 <= r^2, with (cx, cy) in (col, row) pixels."""
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (((xx - center[0]) ** 2 + (yy - center[1]) ** 2) <= radius**2).astype(np.float64)


def _disk(shape, rng, contrast, noise):
    h, w = shape
    r = rng.uniform(0.15, 0.3) * min(h, w)
    c = (rng.uniform(r, w - r), rng.uniform(r, h - r))
    mask = disk_mask(shape, c, r)
    img = 0.2 + contrast * mask + noise * rng.standard_normal(shape)
    return img, mask, {"center": c, "radius": r}


def _ring(shape, rng, contrast, noise):
    h, w = shape
    r = rng.uniform(0.2, 0.35) * min(h, w)
    inner = r * rng.uniform(0.45, 0.7)
    c = (rng.uniform(r, w - r), rng.uniform(r, h - r))
    mask = disk_mask(shape, c, r) - disk_mask(shape, c, inner)
    img = 0.2 + contrast * mask + noise * rng.standard_normal(shape)
    return img, mask, {"center": c, "radius": r, "inner_radius": inner}


def _blob(shape, rng, contrast, noise):
    # union of overlapping ellipses with a blurred, low-contrast boundary over
    # a smoothly varying textured background
    h, w = shape
    yy, xx = np.mgrid[:h, :w]
    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    mask = np.zeros(shape, dtype=bool)
    for _ in range(rng.integers(2, 5)):
        ey = cy + rng.uniform(-0.15, 0.15) * h
        ex = cx + rng.uniform(-0.15, 0.15) * w
        ry, rx = rng.uniform(0.08, 0.22) * h, rng.uniform(0.08, 0.22) * w
        theta = rng.uniform(0, np.pi)
        u = (xx - ex) * np.cos(theta) + (yy - ey) * np.sin(theta)
        v = -(xx - ex) * np.sin(theta) + (yy - ey) * np.cos(theta)
        mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    mask = mask.astype(np.float64)
    soft = ndimage.gaussian_filter(mask, sigma=1.5)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=4.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    bg = rng.uniform(0.3, 0.5)
    img = bg + contrast * soft + 0.05 * texture + noise * rng.standard_normal(shape)
    return img, mask, {}


_FAMILIES = {"disk": (_disk, 0.6, 0.03), "ring": (_ring, 0.6, 0.03), "blob": (_blob, 0.2, 0.04)}


def synth_corpus(
    n: int,
    resolution: tuple = (64, 80),
    family: str = "disk",
    seed: int = 0,
    contrast: Optional[float] = None,
    noise: Optional[float] = None,
) -> list[Sample]:
    """Deterministic synthetic images with analytically known masks.

    ``contrast`` and ``noise`` default per family; blobs are low contrast.
    """
    if family not in _FAMILIES:
        raise ValueError(f"unknown shape family {family!r}")
    make, c_default, n_default = _FAMILIES[family]
    contrast = c_default if contrast is None else contrast
    noise = n_default if noise is None else noise
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, mask, meta = make(tuple(resolution), rng, contrast, noise)
        out.append(Sample(np.clip(img, 0.0, 1.0), mask, f"{family}{i:04d}", meta))
    return out

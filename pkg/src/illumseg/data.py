"""Netpbm I/O, dataset directories, splits and the synthetic scene generator.

Dataset layout::

    <root>/images/<id>.ppm    P6, maxval 255
    <root>/masks/<id>.pgm     P5, maxval 255, foreground > 127
    <root>/flat/<id>.ppm      generator only: the same scene under uniform light
    <root>/metadata.json      generator only: seed, size, illum_range, count
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

DEFAULT_SPLIT = (746 / 950, 82 / 950, 122 / 950)

BACKGROUND_RGB = (210.0, 170.0, 150.0)
LESION_RGB = (150.0, 40.0, 40.0)
COVERAGE = (0.02, 0.40)


class ImageFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 255]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise DatasetError(f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ")


# -------------------------------------------------------------------- netpbm


def _read_header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise ImageFormatError(f"expected {magic.decode()} magic, got {buf[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(buf):
            raise ImageFormatError("truncated header")
        c = buf[pos:pos + 1]
        if c == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            tok = buf[start:pos]
            if not tok.isdigit():
                raise ImageFormatError(f"malformed header field {tok!r}")
            fields.append(int(tok))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    return width, height, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, start = _read_header(buf, magic)
    need = width * height * channels
    payload = buf[start:start + need]
    if len(payload) < need:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)


def load_ppm(path) -> np.ndarray:
    """Read a P6 file into a (3, H, W) float32 array."""
    return _read(path, b"P6", 3).transpose(2, 0, 1).astype(np.float32)


def save_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {image.shape}")
    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def load_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)[:, :, 0].copy()


def save_pgm(gray: np.ndarray, path) -> None:
    gray = np.clip(np.rint(np.asarray(gray)), 0, 255).astype(np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def load_mask(path) -> np.ndarray:
    return (load_pgm(path) > 127).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    save_pgm(np.where(np.asarray(mask) > 0, 255, 0), path)


# ------------------------------------------------------------------- datasets


def load_dataset(root) -> List[Sample]:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    images = {p.stem: p for p in img_dir.glob("*.ppm")} if img_dir.is_dir() else {}
    masks = {p.stem: p for p in mask_dir.glob("*.pgm")} if mask_dir.is_dir() else {}
    for sid in sorted(images.keys() - masks.keys()):
        raise DatasetError(f"image without mask: {sid}")
    for sid in sorted(masks.keys() - images.keys()):
        raise DatasetError(f"mask without image: {sid}")
    return [Sample(load_ppm(images[sid]), load_mask(masks[sid]), sid) for sid in sorted(images)]


def write_dataset(root, samples: Sequence[Sample], flat: Sequence[Sample] = (), metadata: dict | None = None) -> None:
    root = Path(root)
    for sub in ("images", "masks") + (("flat",) if flat else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_ppm(s.image, root / "images" / f"{s.id}.ppm")
        save_mask(s.mask, root / "masks" / f"{s.id}.pgm")
    for s in flat:
        save_ppm(s.image, root / "flat" / f"{s.id}.ppm")
    if metadata is not None:
        (root / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def split(dataset: Sequence, ratios: Tuple[float, float, float] = DEFAULT_SPLIT, seed: int = 0):
    """Shuffle, then cut into (train, val, test).

    Sizes are floor(n*ratio) with the leftover items handed out by largest
    fractional remainder (earlier split wins ties).
    """
    n = len(dataset)
    if n < 3:
        raise DatasetError(f"need at least 3 samples to split, got {n}")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    exact = [n * r for r in ratios]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    items = [dataset[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return items[:a], items[a:b], items[b:]


# ------------------------------------------------------------------ generator


@dataclass
class SyntheticScene:
    sample: Sample  # image = clip(S * R)
    flat: Sample  # same reflectance under S == 1
    reflectance: np.ndarray
    illumination: np.ndarray  # (H, W)


def _upsample_grid(grid: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    from .tensor import bilinear_matrix

    rh = bilinear_matrix(grid.shape[0], size[0])
    rw = bilinear_matrix(grid.shape[1], size[1])
    return rh @ grid @ rw.T


def _lesion_mask(rng, size, max_tries=1000) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(max_tries):
        mask = np.zeros(size, dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
            ay, ax = rng.uniform(0.06, 0.25) * h, rng.uniform(0.06, 0.25) * w
            t = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = (dx * np.cos(t) + dy * np.sin(t)) / ax
            v = (-dx * np.sin(t) + dy * np.cos(t)) / ay
            mask |= u * u + v * v <= 1
        if COVERAGE[0] <= mask.mean() <= COVERAGE[1]:
            return mask
    raise RuntimeError("could not place lesions within the coverage bounds")


def synth_scene(rng: np.random.Generator, size: Tuple[int, int], illum_range: Tuple[float, float], sid: str) -> SyntheticScene:
    h, w = size
    mask = _lesion_mask(rng, size)

    bg = np.asarray(BACKGROUND_RGB) + rng.normal(0, 10, 3)
    fg = np.asarray(LESION_RGB) + rng.normal(0, 12, 3)
    refl = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    refl = refl + rng.normal(0, 3, (3, h, w))
    refl = np.clip(np.rint(refl), 0, 255)

    lo, hi = illum_range
    grid_n = int(rng.integers(2, 5))
    grid = rng.uniform(lo, hi, (grid_n, grid_n))
    illum = np.clip(_upsample_grid(grid, size), lo, hi)

    image = np.clip(np.rint(illum[None] * refl), 0, 255)
    m = mask.astype(np.uint8)
    return SyntheticScene(
        sample=Sample(image.astype(np.float32), m, sid),
        flat=Sample(refl.astype(np.float32), m.copy(), sid),
        reflectance=refl,
        illumination=illum,
    )


def synth_generate(count: int, seed: int, size: Tuple[int, int] = (96, 128),
                   illum_range: Tuple[float, float] = (0.5, 1.5)) -> List[SyntheticScene]:
    """Deterministic wound-like scenes: illumination field times reflectance."""
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = size
    if h < 8 or w < 8:
        raise ValueError(f"size {size} too small")
    lo, hi = illum_range
    if not 0 < lo <= hi:
        raise ValueError(f"need 0 < s_lo <= s_hi, got {illum_range}")
    children = np.random.SeedSequence(seed).spawn(count)
    width = max(4, len(str(count - 1)))
    return [synth_scene(np.random.default_rng(c), size, illum_range, f"s{i:0{width}d}")
            for i, c in enumerate(children)]


def synth_metadata(count, seed, size, illum_range) -> dict:
    return {"count": int(count), "seed": int(seed), "size": [int(size[0]), int(size[1])],
            "illum_range": [float(illum_range[0]), float(illum_range[1])]}


def write_synthetic(root, scenes: Sequence[SyntheticScene], metadata: dict) -> None:
    write_dataset(root, [s.sample for s in scenes], [s.flat for s in scenes], metadata)


def coefficient_of_variation(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    return float(values.std() / mean) if mean > 0 else 0.0

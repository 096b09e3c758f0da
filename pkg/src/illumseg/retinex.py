"""Reference multi-scale Retinex on the intensity channel (float64 numpy).

Pipeline: intensity -> multi-scale log-ratio against Gaussian blurs -> simplest
color balance -> chromatic rescale of the RGB pixels.  Large blurs avoid zero
padding by first stretching the map (bilinear, align-corners) by k-1 pixels so
a valid k x k convolution lands back on the original size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

FULL_SCALE_SIGMAS = (12.0, 80.0, 250.0)
DESK_SIGMAS = (3.0, 10.0, 30.0)


@dataclass(frozen=True)
class GaussianKernelSpec:
    sigma: float
    radius: int

    @property
    def size(self) -> int:
        return 2 * self.radius + 1


@dataclass(frozen=True)
class CorrectionParams:
    sigmas: Tuple[float, ...] = FULL_SCALE_SIGMAS
    s1: float = 0.01
    s2: float = 0.01
    log_offset: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if len(self.sigmas) != 3 or min(self.sigmas) <= 0:
            raise ValueError(f"need three positive sigmas, got {self.sigmas}")
        check_clip_fractions(self.s1, self.s2)
        if self.log_offset <= 0:
            raise ValueError("log_offset must be positive")


def check_clip_fractions(s1: float, s2: float) -> None:
    if not (0 <= s1 < 0.5 and 0 <= s2 < 0.5):
        raise ValueError(f"clip fractions must lie in [0, 0.5), got s1={s1}, s2={s2}")


def kernel_radius(sigma: float, shape: Sequence[int] | None = None) -> int:
    """ceil(3*sigma), capped at max(H, W) - 1 when the image shape is known."""
    r = int(math.ceil(3 * sigma))
    if shape is not None:
        r = min(r, max(shape) - 1)
    return max(r, 0)


def gaussian_kernel(spec: GaussianKernelSpec) -> np.ndarray:
    if spec.sigma <= 0:
        raise ValueError(f"sigma must be positive, got {spec.sigma}")
    if spec.radius < 0:
        raise ValueError(f"radius must be >= 0, got {spec.radius}")
    x = np.arange(-spec.radius, spec.radius + 1, dtype=np.float64)
    f = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * spec.sigma ** 2))
    return f / f.sum()


def gaussian_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def intensity(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    return (image[0] + image[1] + image[2]) / 3


def _stretch_axis(m: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = m.shape[axis]
    if n_out == n_in:
        return m.copy()
    if n_in == 1:
        return np.repeat(m, n_out, axis=axis)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    a = np.take(m, i0, axis=axis)
    b = np.take(m, i1, axis=axis)
    shape = [1, 1]
    shape[axis] = n_out
    # a + f*(b-a) keeps constants exact and hits the end samples exactly
    return a + f.reshape(shape) * (b - a)


def enlarge_for_valid(m: np.ndarray, k: int, max_k: int | None = None) -> np.ndarray:
    """Bilinear (align-corners) resize to (H+k-1, W+k-1)."""
    m = np.asarray(m, dtype=np.float64)
    if k % 2 == 0 or k < 1:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    h, w = m.shape
    if max_k is None:
        max_k = 2 * max(h, w) + 1
    if k > max_k:
        raise ValueError(f"kernel size {k} exceeds maximum {max_k}")
    out = _stretch_axis(m, h + k - 1, 0)
    return _stretch_axis(out, w + k - 1, 1)


def _correlate_axis_valid(m: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    k = g.size
    n = m.shape[axis] - k + 1
    # offsets from a reference value: a constant map blurs to itself exactly
    ref = m.flat[0]
    out = np.zeros(tuple(n if a == axis else s for a, s in enumerate(m.shape)))
    for j in range(k):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(j, j + n)
        out += g[j] * (m[tuple(sl)] - ref)
    return out + ref


def gaussian_blur_valid(enlarged: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """Separable valid Gaussian blur; output is (H'-2r, W'-2r)."""
    g = gaussian_1d(sigma, radius)
    return _correlate_axis_valid(_correlate_axis_valid(enlarged, g, 0), g, 1)


def blur_same(int_map: np.ndarray, sigma: float) -> np.ndarray:
    r = kernel_radius(sigma, int_map.shape)
    return gaussian_blur_valid(enlarge_for_valid(int_map, 2 * r + 1), sigma, r)


def msr(int_map: np.ndarray, params: CorrectionParams) -> np.ndarray:
    """Sum over scales of ln(off+Int) - ln(off+blur_sigma(Int))."""
    int_map = np.asarray(int_map, dtype=np.float64)
    if np.any(int_map < 0):
        raise ValueError("intensity map must be non-negative")
    off = params.log_offset
    log_int = np.log(off + int_map)
    out = np.zeros_like(int_map)
    for sigma in params.sigmas:
        out += log_int - np.log(off + blur_same(int_map, sigma))
    return out


def balance_bounds(values: np.ndarray, s1: float, s2: float) -> Tuple[float, float]:
    """(Vmin, Vmax) from the sorted values, 0-based floor indices clamped to N-1."""
    srt = np.sort(np.asarray(values).ravel(), kind="stable")
    n = srt.size
    lo = min(math.floor(n * s1), n - 1)
    hi = min(math.floor(n * (1 - s2)), n - 1)
    return float(srt[lo]), float(srt[hi])


def simplest_color_balance(m: np.ndarray, s1: float, s2: float) -> np.ndarray:
    check_clip_fractions(s1, s2)
    m = np.asarray(m, dtype=np.float64)
    vmin, vmax = balance_bounds(m, s1, s2)
    if vmax == vmin:
        return np.zeros_like(m)
    clipped = np.minimum(np.maximum(m, vmin), vmax)
    # divide before scaling: the top value is then exactly 255, never 255 + 1ulp
    return (clipped - vmin) / (vmax - vmin) * 255


def chromatic_scale(image: np.ndarray, int_map: np.ndarray, int1: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    b = image.max(axis=0)
    dead = (b == 0) | (int_map == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.minimum(255 / b, int1 / int_map)
    a = np.where(dead, 0.0, a)
    return np.clip(image * a, 0, 255)


def correct(image: np.ndarray, params: CorrectionParams = CorrectionParams()) -> np.ndarray:
    """Illumination-correct a (3, H, W) image with values in [0, 255]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    if image.min() < 0 or image.max() > 255:
        raise ValueError("image values must lie in [0, 255]")
    int_map = intensity(image)
    int1 = simplest_color_balance(msr(int_map, params), params.s1, params.s2)
    return chromatic_scale(image, int_map, int1)

"""Trainable illumination correction.

The same computation as :func:`illumseg.retinex.correct`, expressed in tensor
ops so the three blur kernels receive gradients from a downstream loss.
Gradient conventions:

* the color-balance bounds (Vmin, Vmax) are recomputed every forward pass and
  treated as constants in backward;
* clamps pass gradient inside their closed range and block it outside;
* ``min(255/B, Int1/Int)`` routes gradient through the selected branch only;
* ``B = max(R, G, B)`` routes gradient to the first argmax channel.

Blurred maps are rectified before the log so kernels that drift negative during
training cannot push the log argument below zero.  At Gaussian initialization
the blur of a non-negative map is already non-negative and the rectifier is the
identity.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .retinex import CorrectionParams, GaussianKernelSpec, gaussian_kernel, kernel_radius


class DynamicIllumModule:
    """Three learnable k x k blur kernels, initialized to normalized Gaussians."""

    def __init__(self, params: CorrectionParams = CorrectionParams(), image_size: Optional[Tuple[int, int]] = None):
        self.params = params
        self.image_size = tuple(image_size) if image_size is not None else None
        self.kernels: List[T.Parameter] = []
        for sigma in params.sigmas:
            spec = GaussianKernelSpec(sigma, kernel_radius(sigma, self.image_size))
            self.kernels.append(T.Parameter(gaussian_kernel(spec)[None, None]))
        self.last_bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def parameters(self) -> List[T.Parameter]:
        return list(self.kernels)

    def kernel_sums(self) -> List[float]:
        return [float(k.data.sum(dtype=np.float64)) for k in self.kernels]

    def bounds(self, msr: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-image (Vmin, Vmax), shaped (N, 1, 1, 1)."""
        n = msr.shape[0]
        flat = np.sort(msr.reshape(n, -1), axis=1, kind="stable")
        size = flat.shape[1]
        lo = min(int(np.floor(size * self.params.s1)), size - 1)
        hi = min(int(np.floor(size * (1 - self.params.s2))), size - 1)
        shape = (n, 1, 1, 1)
        return flat[:, lo].reshape(shape), flat[:, hi].reshape(shape)

    def multiscale_retinex(self, int_map: T.Tensor) -> T.Tensor:
        h, w = int_map.shape[-2:]
        inv = 1.0 / self.params.log_offset
        log_int = T.log1p_pos(T.scale(int_map, inv))
        out = None
        for kernel in self.kernels:
            k = kernel.shape[-1]
            big = T.resize_bilinear(int_map, (h + k - 1, w + k - 1))
            blur = T.relu(T.conv2d_valid(big, kernel))
            diff = T.sub(log_int, T.log1p_pos(T.scale(blur, inv)))
            out = diff if out is None else T.add(out, diff)
        return out

    def forward(self, image, bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> T.Tensor:
        """Correct (3,H,W) or (N,3,H,W) images; output has the input's shape.

        ``bounds`` overrides the color-balance (Vmin, Vmax) pair, which is how
        finite-difference checks hold it fixed.
        """
        x = T.as_tensor(image)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.Tensor(x.data[None], requires_grad=False) if not x.requires_grad else _unsqueeze(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected 3-channel images, got shape {x.shape}")

        stage = "intensity"
        try:
            int_map = T.channel_mean(x)
            stage = "multi-scale retinex"
            msr = self.multiscale_retinex(int_map)
            stage = "color balance"
            vmin, vmax = self.bounds(msr.data) if bounds is None else bounds
            self.last_bounds = (vmin, vmax)
            span = vmax - vmin
            with np.errstate(divide="ignore"):
                gain = np.where(span > 0, 255.0 / np.where(span > 0, span, 1), 0.0)
            int1 = T.mul(T.sub(T.clip(msr, vmin, vmax), vmin), gain)
            stage = "chromatic scale"
            b = T.channel_max(x)
            dead = ((b.data == 0) | (int_map.data == 0)).astype(x.data.dtype)
            ratio = T.div(int1, T.add(int_map, dead))
            cap = T.div(255.0, T.add(b, dead))
            a = T.mul(T.minimum(cap, ratio), 1 - dead)
            out = T.clip(T.mul(x, a), 0, 255)
        except T.NonFiniteError as exc:
            raise T.NonFiniteError(f"dynamic illumination correction, stage '{stage}': {exc}") from exc
        return _squeeze(out) if squeeze else out

    __call__ = forward


def _unsqueeze(x: T.Tensor) -> T.Tensor:
    return T._result(x.data[None], (x,), lambda g: (g[0],), "unsqueeze")


def _squeeze(x: T.Tensor) -> T.Tensor:
    return T._result(x.data[0], (x,), lambda g: (g[None],), "squeeze")


def _off_boundary(sorted_vals: np.ndarray, idx: int, direction: int) -> float:
    """A clip bound halfway between the quantile sample and its neighbour."""
    j = min(max(idx + direction, 0), sorted_vals.size - 1)
    if j == idx:
        return float(sorted_vals[idx]) + direction * 1e-3
    return 0.5 * (float(sorted_vals[idx]) + float(sorted_vals[j]))


def kernel_grad_check(seed: int, size: Tuple[int, int] = (10, 12), sigmas: Sequence[float] = (1.0, 1.5, 2.0),
                      eps: float = 1e-6) -> float:
    """Max relative error of d(proj . forward)/d(kernels) against central differences.

    Runs in float64 with the color-balance bounds frozen just off their sample
    values, so no pixel sits on a clamp edge.
    """
    from .gradcheck import numeric_grad, relative_error

    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        params = CorrectionParams(sigmas=tuple(sigmas), s1=0.05, s2=0.05)
        module = DynamicIllumModule(params, image_size=size)
        # jitter kernels away from the exact Gaussian so the check covers trained states
        for k in module.kernels:
            k.data *= rng.uniform(0.8, 1.2, k.shape)
        image = rng.uniform(5, 250, (1, 3) + tuple(size))

        msr = module.multiscale_retinex(T.channel_mean(T.Tensor(image))).data.ravel()
        order = np.sort(msr)
        n = msr.size
        lo = int(np.floor(n * params.s1))
        hi = min(int(np.floor(n * (1 - params.s2))), n - 1)
        frozen = (np.full((1, 1, 1, 1), _off_boundary(order, lo, +1)),
                  np.full((1, 1, 1, 1), _off_boundary(order, hi, -1)))
        proj = rng.standard_normal(image.shape)

        def scalar():
            return T.sum_all(T.mul(module.forward(image, bounds=frozen), proj))

        for k in module.kernels:
            k.zero_grad()
        T.backward(scalar())
        worst = 0.0
        for k in module.kernels:
            num = numeric_grad(lambda: scalar().item(), k.data, eps)
            worst = max(worst, relative_error(k.grad, num))
    return worst

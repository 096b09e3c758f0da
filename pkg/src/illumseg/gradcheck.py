"""Finite-difference verification of the autodiff ops.

All checks run in float64.  The error reported for one comparison is

    max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max_j |n_j|, 1e-12)

so entries three orders of magnitude below the largest gradient are judged
on an absolute scale rather than blowing up the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import tensor as T

OP_TOL = 1e-3
COMPOSITE_TOL = 1e-2
SEEDS = 20


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(1e-3 * np.abs(n).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` maps tensors to a tensor; it is reduced to a scalar by a fixed random
    projection so every output entry contributes.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        proj = None

        def scalar(tensors) -> T.Tensor:
            nonlocal proj
            out = fn(*tensors)
            if proj is None:
                proj = rng.standard_normal(out.shape)
            return T.sum_all(T.mul(out, proj))

        leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
        T.backward(scalar(leaves))
        worst = 0.0
        for leaf, arr in zip(leaves, arrays):
            def f():
                return scalar([T.Tensor(a) for a in arrays]).item()
            num = numeric_grad(f, arr, eps)
            ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
            worst = max(worst, relative_error(ana, num))
    return worst


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seeds: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _op_cases() -> Dict[str, Callable[[np.random.Generator], tuple]]:
    """name -> factory(rng) returning (fn, inputs)."""

    def conv(rng):
        cin, cout, k = rng.integers(1, 3), rng.integers(1, 3), int(rng.choice([1, 3]))
        h, w = rng.integers(k, k + 3), rng.integers(k, k + 3)
        return (T.conv2d_valid,
                [rng.standard_normal((2, cin, h, w)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)])

    def conv_fft(rng):
        k = T.FFT_KERNEL_MIN
        return (lambda x, w: T.conv2d_valid(x, w),
                [rng.standard_normal((1, 1, k + 2, k + 3)), rng.standard_normal((1, 1, k, k))])

    def binary(op):
        def make(rng):
            shape = (2, 3, 3)
            return op, [rng.standard_normal(shape), rng.standard_normal(shape)]
        return make

    def div(rng):
        shape = (2, 3, 3)
        den = rng.uniform(0.5, 2.0, shape) * rng.choice([-1, 1], shape)
        return T.div, [rng.standard_normal(shape), den]

    def relu(rng):
        return T.relu, [_away_from_zero(rng, (2, 4, 4))]

    def log1p(rng):
        return T.log1p_pos, [rng.uniform(0.0, 3.0, (2, 4, 4))]

    def scale(rng):
        c = float(rng.uniform(-3, 3))
        return (lambda x: T.scale(x, c)), [rng.standard_normal((2, 3, 3))]

    def clip(rng):
        x = rng.uniform(-2, 2, (2, 4, 4))
        x = np.where(np.abs(np.abs(x) - 1) < 1e-2, x * 1.05, x)
        return (lambda t: T.clip(t, -1.0, 1.0)), [x]

    def minimum(rng):
        a = rng.standard_normal((2, 3, 3))
        b = a + _away_from_zero(rng, a.shape, 0.05)
        return T.minimum, [a, b]

    def channel_max(rng):
        x = rng.permutation(48).reshape(1, 3, 4, 4) * 0.1 + rng.uniform(0, 0.01, (1, 3, 4, 4))
        return T.channel_max, [x]

    def channel_mean(rng):
        return T.channel_mean, [rng.standard_normal((2, 3, 4, 4))]

    def maxpool(rng):
        # distinct values so no block has a tie
        x = rng.permutation(64).reshape(1, 4, 4, 4) * 0.1 + rng.uniform(0, 0.01, (1, 4, 4, 4))
        return T.maxpool2, [x]

    def upsample(rng):
        return T.upsample2, [rng.standard_normal((2, 3, 3))]

    def concat(rng):
        return T.concat_channels, [rng.standard_normal((2, 3, 3)), rng.standard_normal((1, 3, 3))]

    def pad(rng):
        return (lambda x: T.pad_edge(x, 1)), [rng.standard_normal((2, 3, 4))]

    def resize(rng):
        h, w = rng.integers(2, 5), rng.integers(2, 5)
        size = (h + rng.integers(0, 4), w + rng.integers(0, 4))
        return (lambda x: T.resize_bilinear(x, size)), [rng.standard_normal((1, h, w))]

    def bce(rng):
        t = rng.integers(0, 2, (1, 4, 4)).astype(float)
        return (lambda z: T.bce_with_logits(z, t)), [rng.standard_normal((1, 4, 4)) * 3]

    def mean(rng):
        return T.mean_all, [rng.standard_normal((2, 3, 3))]

    return {
        "conv2d_valid": conv,
        "conv2d_valid[fft]": conv_fft,
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": div,
        "scale": scale,
        "relu": relu,
        "log1p_pos": log1p,
        "clip": clip,
        "minimum": minimum,
        "channel_max": channel_max,
        "channel_mean": channel_mean,
        "maxpool2": maxpool,
        "upsample2": upsample,
        "concat_channels": concat,
        "pad_edge": pad,
        "resize_bilinear": resize,
        "bce_with_logits": bce,
        "mean": mean,
    }


def check_ops(seeds: int = SEEDS, names=None) -> List[CheckResult]:
    results = []
    for name, make in _op_cases().items():
        if names is not None and name not in names:
            continue
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            fn, inputs = make(rng)
            worst = max(worst, grad_check(fn, inputs, seed=seed))
        results.append(CheckResult(name, worst, OP_TOL, seeds))
    return results


def check_composite(seeds: int = SEEDS) -> CheckResult:
    """conv -> relu -> pool -> bce, and the dynamic illumination forward."""
    worst_net = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        t = rng.integers(0, 2, (1, 1, 2, 2)).astype(float)

        def net(x, w, b):
            return T.bce_with_logits(T.maxpool2(T.relu(T.conv2d_valid(x, w, b))), t)

        worst_net = max(worst_net, grad_check(
            net, [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((1, 2, 3, 3)), np.array([0.3])], seed=seed))
    return CheckResult("composite conv/relu/pool/bce", worst_net, OP_TOL, seeds)


def check_dynamic_illum(seeds: int = SEEDS) -> CheckResult:
    from .dynamic import kernel_grad_check

    worst = max(kernel_grad_check(seed) for seed in range(seeds))
    return CheckResult("dynamic illumination forward (kernels)", worst, COMPOSITE_TOL, seeds)


def run_all(seeds: int = SEEDS) -> List[CheckResult]:
    return check_ops(seeds) + [check_composite(seeds), check_dynamic_illum(seeds)]


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'tol':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.tol:7.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

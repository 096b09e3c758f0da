"""U-Net and its illumination-aware variants.

Variants:

``unet``   single encoder on the original image
``dicu``   dynamic illumination module feeding a single encoder
``dvsfn``  two encoders, original + externally (statically) corrected image
``dunet``  dynamic illumination module + two encoders

Dual variants fuse the two bottlenecks by channel concatenation, and every
decoder skip concatenates both encoders' maps at that scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .dynamic import DynamicIllumModule
from .retinex import DESK_SIGMAS, CorrectionParams

VARIANTS = ("unet", "dicu", "dvsfn", "dunet")
DUAL = ("dvsfn", "dunet")
DYNAMIC = ("dicu", "dunet")
MAX_CHANNELS = 4096


@dataclass(frozen=True)
class DUNetConfig:
    variant: str = "dunet"
    base_channels: int = 8
    depth: int = 3
    input_size: Tuple[int, int] = (96, 128)
    illum: CorrectionParams = field(default_factory=lambda: CorrectionParams(sigmas=DESK_SIGMAS))
    max_channels: int = MAX_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.base_channels < 1 or self.depth < 1:
            raise ValueError("base_channels and depth must be positive")
        step = 2 ** self.depth
        h, w = self.input_size
        if h % step or w % step:
            raise ValueError(f"input size {self.input_size} not divisible by 2**depth = {step}")
        if self.base_channels * step > self.max_channels:
            raise ValueError(f"bottleneck of {self.base_channels * step} channels exceeds cap {self.max_channels}")

    @property
    def dual(self) -> bool:
        return self.variant in DUAL

    @property
    def dynamic(self) -> bool:
        return self.variant in DYNAMIC

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["illum"]["sigmas"] = list(self.illum.sigmas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DUNetConfig":
        d = dict(d)
        d["illum"] = CorrectionParams(**{**d["illum"], "sigmas": tuple(d["illum"]["sigmas"])})
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Conv:
    """k x k convolution with edge-replicated 'same' padding."""

    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / (cin * k * k))
        self.name = name
        self.k = k
        self.weight = T.Parameter(rng.uniform(-bound, bound, (cout, cin, k, k)))
        self.bias = T.Parameter(np.zeros(cout))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d_valid(T.pad_edge(x, self.k // 2), self.weight, self.bias)

    def parameters(self) -> List[T.Parameter]:
        return [self.weight, self.bias]


class Block:
    """Two 3x3 conv + ReLU layers."""

    def __init__(self, name: str, cin: int, cout: int, rng):
        self.convs = [Conv(f"{name}.0", cin, cout, 3, rng), Conv(f"{name}.1", cout, cout, 3, rng)]

    def __call__(self, x):
        for conv in self.convs:
            x = T.relu(conv(x))
        return x

    def parameters(self):
        return [p for c in self.convs for p in c.parameters()]


class Encoder:
    def __init__(self, name: str, cfg: DUNetConfig, rng):
        self.blocks = []
        cin = 3
        for level in range(cfg.depth + 1):
            self.blocks.append(Block(f"{name}.{level}", cin, cfg.channels(level), rng))
            cin = cfg.channels(level)

    def __call__(self, x) -> Tuple[T.Tensor, List[T.Tensor]]:
        skips = []
        for block in self.blocks[:-1]:
            x = block(x)
            skips.append(x)
            x = T.maxpool2(x)
        return self.blocks[-1](x), skips

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]


class Model:
    """Parameter bank plus forward graph for one :class:`DUNetConfig`.

    Bank order: encoder A, encoder B (dual only), decoder, head, illumination
    kernels (dynamic only).
    """

    def __init__(self, config: DUNetConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        with T.precision(np.float32):
            self.encoders = [Encoder("enc_a", config, rng)]
            if config.dual:
                self.encoders.append(Encoder("enc_b", config, rng))
            branches = len(self.encoders)
            self.up = []
            self.dec = []
            below = branches * config.channels(config.depth)
            for level in reversed(range(config.depth)):
                c = config.channels(level)
                self.up.append(Conv(f"up.{level}", below, c, 3, rng))
                self.dec.append(Block(f"dec.{level}", c + branches * c, c, rng))
                below = c
            self.head = Conv("head", config.channels(0), 1, 1, rng)
            self.illum = DynamicIllumModule(config.illum, config.input_size) if config.dynamic else None

    def parameters(self) -> List[T.Parameter]:
        params = [p for e in self.encoders for p in e.parameters()]
        for up, dec in zip(self.up, self.dec):
            params += up.parameters() + dec.parameters()
        params += self.head.parameters()
        if self.illum is not None:
            params += self.illum.parameters()
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def forward(self, original, corrected=None) -> T.Tensor:
        """Logits shaped (1,H,W) or (N,1,H,W), matching the input's batching."""
        cfg = self.config
        x = T.as_tensor(original)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.Tensor(x.data[None])
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected 3-channel images, got shape {x.shape}")
        if tuple(x.shape[2:]) != cfg.input_size:
            raise ValueError(f"input spatial size {x.shape[2:]} != configured {cfg.input_size}")

        if cfg.variant == "unet":
            if corrected is not None:
                raise ValueError("unet takes the original image only")
            views = [x]
        elif cfg.variant == "dvsfn":
            if corrected is None:
                raise ValueError("dvsfn needs both the original and the corrected image")
            c = T.as_tensor(corrected)
            c = T.Tensor(c.data[None]) if c.ndim == 3 else c
            if c.shape != x.shape:
                raise ValueError(f"corrected image shape {c.shape} != original {x.shape}")
            views = [x, c]
        else:
            c = self.illum.forward(x)
            views = [c] if cfg.variant == "dicu" else [x, c]

        feats, skips = [], []
        for enc, view in zip(self.encoders, views):
            f, s = enc(T.scale(view, 1.0 / 255.0))
            feats.append(f)
            skips.append(s)
        y = feats[0] if len(feats) == 1 else T.concat_channels(feats[0], feats[1])
        for up, dec, level in zip(self.up, self.dec, reversed(range(cfg.depth))):
            y = T.relu(up(T.upsample2(y)))
            skip = skips[0][level]
            for other in skips[1:]:
                skip = T.concat_channels(skip, other[level])
            y = dec(T.concat_channels(y, skip))
        logits = self.head(y)
        if squeeze:
            return T._result(logits.data[0], (logits,), lambda g: (g[None],), "squeeze")
        return logits

    __call__ = forward

    def state(self) -> List[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: List[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} tensors, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.data.shape != tuple(a.shape):
                raise ValueError(f"shape mismatch {p.data.shape} vs {a.shape}")
            p.data[...] = a
            p.grad = np.zeros_like(p.data)
            p.rms_state = np.zeros_like(p.data)


def build(config: DUNetConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def parameter_count(model: Model) -> int:
    return model.parameter_count()

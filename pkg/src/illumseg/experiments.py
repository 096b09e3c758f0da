"""Desk-scale experiment protocols shared by the acceptance suite and README."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .data import coefficient_of_variation, synth_generate
from .net import DUNetConfig, build
from .retinex import CorrectionParams, correct, intensity
from .train import EvalReport, TrainConfig, evaluate, exceed_rate, train

DESK = dict(base_channels=8, depth=3, input_size=(96, 128))
DESK_LR = 1e-3


def flattening_ratios(count: int = 32, seed: int = 0, illum_range=(0.5, 1.5),
                      params: CorrectionParams = CorrectionParams()) -> List[float]:
    """Background intensity CV after correction divided by CV before, per scene."""
    ratios = []
    for scene in synth_generate(count, seed, DESK["input_size"], illum_range):
        image = scene.sample.image.astype(np.float64)
        bg = scene.sample.mask == 0
        before = coefficient_of_variation(intensity(image)[bg])
        after = coefficient_of_variation(intensity(correct(image, params))[bg])
        ratios.append(after / before)
    return ratios


@dataclass
class AblationRun:
    seed: int
    reports: Dict[str, EvalReport]

    def miou(self, variant: str) -> float:
        return self.reports[variant].miou

    def exceed(self, variant: str, baseline: str = "unet") -> float:
        return exceed_rate(self.reports[variant], self.reports[baseline])


def ablation(seed: int, variants: Sequence[str] = ("unet", "dunet"), n_train: int = 256, n_test: int = 32,
             illum_range=(0.4, 1.8), epochs: int = 6, lr: float = DESK_LR, batch_size: int = 10) -> AblationRun:
    """Train each variant with identical data, seed and schedule; report on a held-out test set."""
    scenes = synth_generate(n_train + n_test, seed, DESK["input_size"], illum_range)
    samples = [s.sample for s in scenes]
    train_set, test_set = samples[:n_train], samples[n_train:]
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed, eval_every=epochs)
    reports = {}
    for variant in variants:
        model = build(DUNetConfig(variant=variant, **DESK), seed)
        result = train(model, train_set, [], cfg)
        reports[variant] = evaluate(model, test_set, model_id=variant, max_iou=result.max_val_miou)
    return AblationRun(seed, reports)

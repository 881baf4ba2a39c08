"""Session-wide fixtures: the desk-scale overfit runs are trained once and shared."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from hyperrestormer.config import ModelConfig, SlsstConfig
from hyperrestormer.degradations import DegradationSpec, degrade
from hyperrestormer.metrics import mpsnr
from hyperrestormer.model import build_model
from hyperrestormer.synthetic import SyntheticSceneSpec, synth_scene
from hyperrestormer.training import PairDataset, TrainConfig, restore, train

TASK_OF = {"noise": "denoise", "stripes": "inpaint", "downsample": "superres"}
STEP_BUDGET = {"noise": 2000, "stripes": 3000, "downsample": 3000}
CHECK_EVERY = 50


@dataclass
class OverfitRun:
    kind: str
    model: object
    clean: np.ndarray
    degraded: np.ndarray
    network_input: np.ndarray
    mask: np.ndarray | None
    baseline_mpsnr: float
    restored: np.ndarray
    steps: int
    seconds: float
    step_losses: list = field(default_factory=list)

    @property
    def mpsnr(self) -> float:
        return mpsnr(self.clean, self.restored)

    @property
    def masked_l1(self) -> float:
        return float(np.abs(self.restored - self.clean)[self.mask == 0].mean())

    @property
    def loss_drop(self) -> float:
        return self.step_losses[0] / float(np.mean(self.step_losses[-CHECK_EVERY:]))


def tiny_config(kind: str) -> ModelConfig:
    return ModelConfig(
        channels=8,
        embed_dim=16,
        n_stages=2,
        slsst=SlsstConfig(n_basis=4, window_size=4),
        task=TASK_OF[kind],
    )


def _target_met(kind: str, baseline: float, result, clean, x, mask) -> bool:
    out = restore(result.model, x)
    if kind == "noise":
        drop = result.step_losses[0] / float(np.mean(result.step_losses[-CHECK_EVERY:]))
        return mpsnr(clean, out) >= baseline + 10 and drop >= 10
    if kind == "stripes":
        return float(np.abs(out - clean)[mask == 0].mean()) <= 0.05
    return mpsnr(clean, out) >= baseline + 2


def run_overfit(kind: str) -> OverfitRun:
    clean = synth_scene(SyntheticSceneSpec(seed=0, height=32, width=32, bands=8, order=3))
    spec = DegradationSpec(kind=kind, sigma_8bit=30, seed=1, scale=4)
    dataset = PairDataset([clean], spec)
    x, _, mask = dataset.pair(0)
    degraded = degrade(clean, spec)[0]
    baseline = mpsnr(clean, x)
    model = build_model(tiny_config(kind), seed=0)
    cfg = TrainConfig(
        epochs=STEP_BUDGET[kind],
        batch_size=1,
        lr_max=3e-4,
        lr_min=1e-6,
        weight_decay=0.0,
        degradation=spec,
        val_fraction=0.0,
        eval_every=CHECK_EVERY,
    )
    start = time.perf_counter()
    result = train(model, dataset, cfg, stop=lambda r: _target_met(kind, baseline, r, clean, x, mask))
    seconds = time.perf_counter() - start
    return OverfitRun(
        kind=kind,
        model=model,
        clean=clean,
        degraded=degraded,
        network_input=x,
        mask=mask,
        baseline_mpsnr=baseline,
        restored=restore(model, x),
        steps=model.step,
        seconds=seconds,
        step_losses=result.step_losses,
    )


@pytest.fixture(scope="session")
def overfit():
    cache: dict[str, OverfitRun] = {}

    def get(kind: str) -> OverfitRun:
        if kind not in cache:
            cache[kind] = run_overfit(kind)
        return cache[kind]

    return get

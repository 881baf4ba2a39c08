"""L1 training loop with AdamW, per-step cosine annealing and checkpointing."""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .degradations import DegradationSpec, bicubic_upsample, degrade, rng_for
from .errors import ConfigurationError, NumericError
from .metrics import MetricsReport, evaluate
from .model import HyperRestormer
from .optim import AdamWParams, OptimizerState, cosine_lr, optimizer_step

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "PairDataset", "TrainResult", "l1_loss", "train", "model_input", "restore"]

METRICS_HEADER = ("epoch", "lr", "train_l1", "val_mpsnr", "val_mssim", "val_sam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    resample: bool = False
    val_fraction: float = 0.05
    eval_every: int = 1
    checkpoint_every: int = 0
    grad_clip: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max and not (self.lr_max == 0 and self.lr_min == 0):
            raise ConfigurationError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in [0, 1)")

    @property
    def adamw(self) -> AdamWParams:
        return AdamWParams(self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["degradation"] = self.degradation.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        deg = data.pop("degradation", None)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {', '.join(unknown)}")
        if deg is not None:
            data["degradation"] = DegradationSpec.from_dict(deg)
        return cls(**data)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def model_input(degraded: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """What the network sees for a degraded cube (super-resolution is pre-upsampled)."""
    if spec.kind == "downsample":
        return bicubic_upsample(degraded, spec.scale)
    return degraded


class PairDataset:
    """(network input, clean target, mask) triples derived from clean cubes.

    Sample ``i`` is degraded with stream ``i`` of the spec's seed; with
    ``resample`` every epoch draws a fresh realization instead.
    """

    def __init__(self, clean: Sequence[np.ndarray], spec: DegradationSpec, resample: bool = False):
        if not clean:
            raise ConfigurationError("dataset needs at least one clean cube")
        shapes = {np.shape(c) for c in clean}
        if len(shapes) != 1:
            raise ConfigurationError(f"all cubes must share one shape, got {sorted(shapes)}")
        self.clean = [np.asarray(c, dtype=np.float32) for c in clean]
        self.spec = spec
        self.resample = resample
        self._cache: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def __len__(self) -> int:
        return len(self.clean)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.clean[0].shape

    def pair(self, i: int, epoch: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        key = epoch * len(self) + i if self.resample else i
        if key not in self._cache:
            degraded, mask = degrade(self.clean[i], self.spec, index=key)
            self._cache[key] = (model_input(degraded, self.spec).astype(np.float32), mask)
            if self.resample and len(self._cache) > 4 * len(self):
                self._cache.pop(next(iter(self._cache)))
        x, mask = self._cache[key]
        return x, self.clean[i], mask


@dataclass
class TrainResult:
    model: HyperRestormer
    opt_state: OptimizerState
    step_losses: list[float] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)


def restore(model: HyperRestormer, x: np.ndarray) -> np.ndarray:
    """Run ``model`` on one ``C x H x W`` network input."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(np.asarray(x), dtype=dtype))
    return out.cpu().numpy()


def _split(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    n_val = int(math.floor(n * fraction))
    order = rng_for(seed, 2**32 - 1).permutation(n).tolist()
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return train, (val or train)


def _write_metrics_row(path: Path, row: dict[str, Any]) -> None:
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write("\t".join(METRICS_HEADER) + "\n")
        cells = []
        for key in METRICS_HEADER:
            v = row.get(key)
            cells.append("-" if v is None else (str(v) if key == "epoch" else f"{v:.8g}"))
        fh.write("\t".join(cells) + "\n")


def train(
    model: HyperRestormer,
    dataset: PairDataset,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    opt_state: OptimizerState | None = None,
    history: TrainResult | None = None,
    stop: Callable[[TrainResult], bool] | None = None,
) -> TrainResult:
    """Train ``model`` in place; resumes from ``model.step`` when it is non-zero.

    ``stop`` is consulted after every evaluated epoch and ends training early
    when it returns true.
    """
    c = model.config.channels
    if dataset.shape[0] != c:
        raise ConfigurationError(f"dataset cubes have {dataset.shape[0]} bands, model expects {c}")
    dtype = next(model.parameters()).dtype
    train_idx, val_idx = _split(len(dataset), cfg.val_fraction, cfg.seed)
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    opt_state = opt_state or OptimizerState()
    result = history or TrainResult(model, opt_state)
    result.model, result.opt_state = model, opt_state
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "checkpoints").mkdir(exist_ok=True)
        (run / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
        (run / "model_config.json").write_text(json.dumps(model.config.to_dict(), indent=2) + "\n")

    def checkpoint(tag: str) -> None:
        if run is None:
            return
        extra = {"step_losses": result.step_losses, "epochs": result.epochs, "train_config": cfg.to_dict()}
        save_checkpoint(run / "checkpoints" / f"{tag}.npz", model, opt_state, extra)

    model.train()
    epoch_losses: list[float] = []
    while model.step < total:
        step = model.step
        epoch, pos = divmod(step, steps_per_epoch)
        order = rng_for(cfg.seed, epoch).permutation(train_idx).tolist()
        batch = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        pairs = [dataset.pair(i, epoch) for i in batch]
        x = torch.as_tensor(np.stack([p[0] for p in pairs]), dtype=dtype)
        y = torch.as_tensor(np.stack([p[1] for p in pairs]), dtype=dtype)
        lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)

        for p in model.parameters():
            p.grad = None
        loss = l1_loss(model(x), y)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}; last good checkpoint kept")
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer_step(model, opt_state, lr, cfg.adamw)
        model.step += 1
        loss_value = float(loss.detach())
        result.step_losses.append(loss_value)
        epoch_losses.append(loss_value)

        if pos == steps_per_epoch - 1 or model.step == total:
            row: dict[str, Any] = {"epoch": epoch + 1, "lr": lr, "train_l1": float(np.mean(epoch_losses))}
            epoch_losses = []
            if (epoch + 1) % cfg.eval_every == 0 or model.step == total:
                report = validate(model, dataset, val_idx, epoch)
                row.update(val_mpsnr=report.mpsnr, val_mssim=report.mssim, val_sam=report.sam)
                model.train()
            result.epochs.append(row)
            if run is not None:
                _write_metrics_row(run / "metrics.tsv", row)
            log.info("epoch %d lr %.3g train_l1 %.5f", row["epoch"], lr, row["train_l1"])
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint(f"epoch_{epoch + 1:05d}")
            if stop is not None and "val_mpsnr" in row and stop(result):
                break
    checkpoint("final")
    return result


def validate(model: HyperRestormer, dataset: PairDataset, indices: Sequence[int], epoch: int = 0) -> MetricsReport:
    """Mean metrics of the model's restorations over ``indices``."""
    model.eval()
    reports = []
    for i in indices:
        x, clean, _ = dataset.pair(i, epoch)
        reports.append(evaluate(clean, restore(model, x)))
    n = len(reports)
    return MetricsReport(
        mpsnr=sum(r.mpsnr for r in reports) / n,
        mssim=sum(r.mssim for r in reports) / n,
        sam=sum(r.sam for r in reports) / n,
        per_band_psnr=tuple(np.mean([r.per_band_psnr for r in reports], axis=0).tolist()),
        per_band_ssim=tuple(np.mean([r.per_band_ssim for r in reports], axis=0).tolist()),
    )


def resume(checkpoint_path: str | Path) -> tuple[HyperRestormer, OptimizerState, TrainResult, TrainConfig | None]:
    """Reload model, optimizer and history from a checkpoint written by :func:`train`."""
    ckpt = load_checkpoint(checkpoint_path)
    opt = ckpt.opt_state or OptimizerState()
    result = TrainResult(
        ckpt.model, opt, list(ckpt.meta.get("step_losses", [])), list(ckpt.meta.get("epochs", []))
    )
    tc = ckpt.meta.get("train_config")
    return ckpt.model, opt, result, (TrainConfig.from_dict(tc) if tc else None)

"""Small shared helpers for building seeded float64 modules in tests."""
from __future__ import annotations

import numpy as np
import torch


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.5) -> torch.nn.Module:
    """Overwrite every parameter with seeded normal draws (biases, gains and scalars included)."""
    gen = np.random.default_rng(seed)
    module.double()
    with torch.no_grad():
        for _, p in sorted(module.named_parameters()):
            fan = max(1, p[0].numel()) if p.dim() > 1 else 1
            p.copy_(torch.from_numpy(np.asarray(gen.standard_normal(tuple(p.shape)) * scale / np.sqrt(fan))))
    return module


def rand(*shape, seed=0, dtype=torch.float64):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape)).to(dtype)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)

"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass
class GradCheckResult:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-6)


def gradient_check(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor], seed: int = 0,
                   samples_per_param: int = 3, eps: float = 1e-6) -> list[GradCheckResult]:
    """Compare backprop with central differences at randomly chosen entries.

    ``loss_fn`` must be deterministic and recompute the loss from the current
    parameter values. Entries are drawn with ``seed``.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() for n, p in params.items()}
    results = []
    with torch.no_grad():
        for name, p in params.items():
            for _ in range(samples_per_param):
                idx = tuple(int(rng.integers(0, s)) for s in p.shape)
                orig = p[idx].item()
                p[idx] = orig + eps
                up = loss_fn().item()
                p[idx] = orig - eps
                down = loss_fn().item()
                p[idx] = orig
                results.append(GradCheckResult(name, idx, analytic[name][idx].item(), (up - down) / (2 * eps)))
    return results

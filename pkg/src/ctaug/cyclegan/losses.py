"""LSGAN adversarial, cycle-consistency and identity losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class CycleGanLossWeights:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_identity < 0:
            raise ValueError("loss weights must be non-negative")


def adversarial_loss(d_out: torch.Tensor, target_real: bool) -> torch.Tensor:
    target = 1.0 if target_real else 0.0
    return torch.mean((d_out - target) ** 2)


def _l1(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return torch.mean(torch.abs(x - y))


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    return _l1(x, x_reconstructed)


def identity_loss(x: torch.Tensor, g_same_domain_out: torch.Tensor) -> torch.Tensor:
    return _l1(x, g_same_domain_out)

"""Small MLP building blocks shared by priors, posteriors and heads."""
from __future__ import annotations

import torch
from torch import nn

from .core import DiagGaussian


class MLP(nn.Module):
    """Fully connected net with leaky-rectifier hidden activations."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 128, depth: int = 2,
                 slope: float = 0.01, zero_init_out: bool = False):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for _ in range(depth):
            layers.append(nn.Linear(prev, hidden))
            layers.append(nn.LeakyReLU(slope))
            prev = hidden
        out = nn.Linear(prev, out_dim)
        if zero_init_out:
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)
        layers.append(out)
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class GaussianNet(nn.Module):
    """MLP trunk with mean and log-scale heads producing a DiagGaussian."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 128, depth: int = 2,
                 slope: float = 0.01):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for _ in range(depth):
            layers.append(nn.Linear(prev, hidden))
            layers.append(nn.LeakyReLU(slope))
            prev = hidden
        self.trunk = nn.Sequential(*layers)
        self.mean_head = nn.Linear(prev, out_dim)
        self.log_scale_head = nn.Linear(prev, out_dim)

    def forward(self, x: torch.Tensor) -> DiagGaussian:
        h = self.trunk(x)
        # Bounded log-scale keeps exp() finite under extreme inputs.
        log_scale = self.log_scale_head(h).clamp(-10.0, 10.0)
        return DiagGaussian.from_log_scale(self.mean_head(h), log_scale)

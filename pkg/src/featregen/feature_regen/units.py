from __future__ import annotations

import torch
from torch import nn


class RegenerationUnit(nn.Module):
    """Residual block over the regenerated channels of one layer.

    1x1 -> ReLU -> 3x3 -> ReLU -> 3x3 -> ReLU -> 1x1, added to the unit
    input through a single skip connection. All stages keep the channel
    count. With ``init="identity"`` the last stage starts at zero so the
    unit is exactly the identity until trained.
    """

    def __init__(self, channels: int, init: str = "identity", affine: bool = False,
                 generator: torch.Generator | None = None):
        super().__init__()
        if channels < 1:
            raise ValueError("a unit needs at least one channel")
        if init not in ("identity", "random"):
            raise ValueError(f"unknown init {init!r}")
        self.channels = channels
        self.stage1 = nn.Conv2d(channels, channels, 1)
        self.stage2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.stage3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.stage4 = nn.Conv2d(channels, channels, 1)
        self.affine = affine
        if affine:
            self.scale = nn.Parameter(torch.ones(1, channels, 1, 1))
            self.shift = nn.Parameter(torch.zeros(1, channels, 1, 1))
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            w = torch.empty_like(stage.weight)
            fan_in = w[0].numel()
            w.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
            with torch.no_grad():
                stage.weight.copy_(w)
                stage.bias.zero_()
        if init == "identity":
            with torch.no_grad():
                self.stage4.weight.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x * self.scale + self.shift if self.affine else x
        h = torch.relu(self.stage1(h))
        h = torch.relu(self.stage2(h))
        h = torch.relu(self.stage3(h))
        return x + self.stage4(h)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

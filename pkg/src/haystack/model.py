"""Full classification pipeline: encoder -> global pooling -> linear logit."""
from __future__ import annotations

import torch.nn as nn

from .backbone import ArchitectureSpec, Encoder, count_parameters
from .pooling import GlobalPool


class NeedleNet(nn.Module):
    def __init__(self, arch: ArchitectureSpec, pooling: str = "max", in_channels: int = 1):
        super().__init__()
        self.encoder = Encoder(arch, in_channels)
        self.pool = GlobalPool(pooling, self.encoder.out_channels)
        self.classifier = nn.Linear(self.encoder.out_channels, 1)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, x):
        """Returns the positive-class logit, shape [B]."""
        return self.classifier(self.pool(self.encoder(x))).squeeze(1)


def parameter_count(arch: ArchitectureSpec, pooling: str = "max", in_channels: int = 1) -> int:
    return count_parameters(NeedleNet(arch, pooling, in_channels))

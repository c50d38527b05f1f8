"""Global pooling of a spatial embedding [B, C, H, W] down to [B, C]."""
from __future__ import annotations

import torch
import torch.nn as nn

POOLINGS = ("max", "logsumexp", "mean", "attention")


def pool_max(e: torch.Tensor) -> torch.Tensor:
    # argmax returns the first maximum in row-major order, so ties send the
    # whole gradient to a single position
    flat = e.flatten(2)
    idx = flat.argmax(dim=2, keepdim=True)
    return flat.gather(2, idx).squeeze(2)


def pool_logsumexp(e: torch.Tensor) -> torch.Tensor:
    flat = e.flatten(2)
    shift = flat.max(dim=2, keepdim=True).values.detach()
    return (flat - shift).exp().sum(dim=2).log() + shift.squeeze(2)


def pool_mean(e: torch.Tensor) -> torch.Tensor:
    return e.flatten(2).mean(dim=2)


class AttentionHead(nn.Module):
    """Per-position scalar score: Linear(C, 128) -> tanh -> Linear(128, 1)."""

    def __init__(self, channels: int, hidden: int = 128):
        super().__init__()
        self.channels = channels
        self.score = nn.Sequential(nn.Linear(channels, hidden), nn.Tanh(), nn.Linear(hidden, 1))

    def weights(self, e: torch.Tensor) -> torch.Tensor:
        """Softmax attention over positions, shape [B, H*W]."""
        if e.shape[1] != self.channels:
            raise ValueError(f"attention head expects {self.channels} channels, got {e.shape[1]}")
        positions = e.flatten(2).transpose(1, 2)  # B, N, C
        return torch.softmax(self.score(positions).squeeze(-1), dim=1)


def pool_attention(e: torch.Tensor, head: AttentionHead) -> torch.Tensor:
    a = head.weights(e)
    return torch.einsum("bn,bcn->bc", a, e.flatten(2))


class GlobalPool(nn.Module):
    def __init__(self, kind: str, channels: int | None = None):
        super().__init__()
        if kind not in POOLINGS:
            raise ValueError(f"unknown pooling {kind!r}; expected one of {POOLINGS}")
        self.kind = kind
        self.head = AttentionHead(channels) if kind == "attention" else None

    def forward(self, e):
        if self.kind == "max":
            return pool_max(e)
        if self.kind == "logsumexp":
            return pool_logsumexp(e)
        if self.kind == "mean":
            return pool_mean(e)
        return pool_attention(e, self.head)

"""Output layer: layer pooling, per-stream convolutional heads, and the
residual-driven per-step blend of the two future predictions."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn


def layer_pool(layers: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of per-layer representations scaled by ``1/sqrt(L)``."""
    if not layers:
        raise ValueError("layer_pool needs at least one layer")
    return torch.stack(list(layers)).sum(0) / math.sqrt(len(layers))


class ConvHead(nn.Module):
    """Two 1x1 convolutions ``d -> d -> 1`` applied per position."""

    def __init__(self, d: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 1))

    def forward(self, h: torch.Tensor, history: int):
        out = self.net(h).squeeze(-1)
        return out[..., :history], out[..., history:]


def predict_heads(s_avg, u_avg, series_head: ConvHead, ts_head: ConvHead, history: int):
    x_s, y_s = series_head(s_avg, history)
    x_u, y_u = ts_head(u_avg, history)
    return x_s, y_s, x_u, y_u


class FusionWeights(nn.Module):
    """MLP from the timestamp head's history residual to per-step blend weights.

    Output is ``(..., F, 2)``; with ``normalize`` each row is softmax-normalised.
    """

    def __init__(self, history: int, horizon: int, normalize: bool = True):
        super().__init__()
        self.horizon, self.normalize = horizon, normalize
        self.net = nn.Sequential(nn.Linear(history, 2 * history), nn.SiLU(),
                                 nn.Linear(2 * history, 2 * horizon))

    def forward(self, x_hat_u: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if x_hat_u.shape != x.shape:
            raise ValueError(f"residual inputs differ: {tuple(x_hat_u.shape)} vs {tuple(x.shape)}")
        logits = self.net(x_hat_u - x).unflatten(-1, (self.horizon, 2))
        return torch.softmax(logits, dim=-1) if self.normalize else logits


def fuse_predictions(y_s: torch.Tensor, y_u: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    if y_s.shape != y_u.shape or W.shape != (*y_s.shape, 2):
        raise ValueError(f"shape mismatch: y_s {tuple(y_s.shape)}, y_u {tuple(y_u.shape)}, W {tuple(W.shape)}")
    return (W * torch.stack([y_s, y_u], dim=-1)).sum(-1)

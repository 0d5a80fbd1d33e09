"""Deterministic feature encoders and the series embedding layer.

Calendar features follow a fixed index convention: weekday counts from
Monday = 0, day-of-month and day-of-year from 1, ISO week-of-year from 1,
month from 0.
"""

from __future__ import annotations

import calendar
import datetime as dt
import enum
import math
from typing import Iterable

import numpy as np
import torch
from torch import nn


class Frequency(str, enum.Enum):
    DAILY = "daily"
    WEEKLY = "weekly"
    MONTHLY = "monthly"

    @property
    def feature_dim(self) -> int:
        return {"daily": 3, "weekly": 2, "monthly": 1}[self.value]

    @property
    def period_word(self) -> str:
        return {"daily": "day", "weekly": "week", "monthly": "month"}[self.value]

    @classmethod
    def parse(cls, value) -> "Frequency":
        if isinstance(value, Frequency):
            return value
        v = str(value).strip().lower()
        aliases = {"d": "daily", "day": "daily", "w": "weekly", "week": "weekly",
                   "m": "monthly", "month": "monthly"}
        try:
            return cls(aliases.get(v, v))
        except ValueError:
            raise ValueError(f"unknown frequency {value!r}") from None

    def step(self, date: dt.date, n: int = 1) -> dt.date:
        """Date ``n`` sampling intervals after ``date``."""
        if self is Frequency.DAILY:
            return date + dt.timedelta(days=n)
        if self is Frequency.WEEKLY:
            return date + dt.timedelta(weeks=n)
        year, month = divmod(date.year * 12 + date.month - 1 + n, 12)
        day = min(date.day, calendar.monthrange(year, month + 1)[1])
        return dt.date(year, month + 1, day)

    def index(self, date: dt.date) -> int:
        """Integer position of ``date`` on this frequency's grid."""
        if self is Frequency.MONTHLY:
            return date.year * 12 + date.month - 1
        days = date.toordinal()
        return days if self is Frequency.DAILY else days // 7


def parse_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value).strip())
    except ValueError:
        raise ValueError(f"invalid ISO date {value!r}") from None


def encode_timestamp(date, freq) -> np.ndarray:
    date = parse_date(date)
    freq = Frequency.parse(freq)
    if freq is Frequency.DAILY:
        feats = [date.weekday() / 6 - 0.5,
                 (date.day - 1) / 30 - 0.5,
                 (date.timetuple().tm_yday - 1) / 365 - 0.5]
    elif freq is Frequency.WEEKLY:
        feats = [(date.day - 1) / 30 - 0.5,
                 (date.isocalendar()[1] - 1) / 52 - 0.5]
    else:
        feats = [(date.month - 1) / 11 - 0.5]
    # day 366 of a leap year lands just above 0.5
    return np.clip(np.array(feats, dtype=np.float64), -0.5, 0.5)


def encode_timestamps(dates: Iterable, freq) -> np.ndarray:
    """Stack per-date features into a ``(len(dates), feature_dim)`` matrix."""
    freq = Frequency.parse(freq)
    rows = [encode_timestamp(d, freq) for d in dates]
    if not rows:
        return np.zeros((0, freq.feature_dim))
    return np.stack(rows)


def temporal_embedding(m, dim: int = 128, tau: float = 10000.0):
    """Sinusoidal embedding: ``dim/2`` sines followed by ``dim/2`` cosines.

    ``m`` may be a scalar (returns a numpy vector) or a tensor of positions
    (returns a tensor with a trailing ``dim`` axis).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    if isinstance(m, torch.Tensor):
        freqs = tau ** (-torch.arange(half, dtype=torch.float64) / half)
        ang = m.to(torch.float64).unsqueeze(-1) * freqs
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    freqs = tau ** (-np.arange(half, dtype=np.float64) / half)
    ang = float(m) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class SeriesEmbedding(nn.Module):
    """Per-position map of ``[value, observed_mask]`` to ``d`` channels plus
    projected position and diffusion-step embeddings."""

    def __init__(self, d: int, step_dim: int = 128, pos_dim: int = 128):
        super().__init__()
        self.step_dim, self.pos_dim = step_dim, pos_dim
        self.value_proj = nn.Linear(2, d)
        self.pos_proj = nn.Linear(pos_dim, d)
        self.step_proj = nn.Sequential(nn.Linear(step_dim, d), nn.SiLU(), nn.Linear(d, d))

    def position(self, n: int) -> torch.Tensor:
        """Projected position embeddings of indices ``0..n-1``, ``(n, d)``."""
        pos = temporal_embedding(torch.arange(n), self.pos_dim).to(self.pos_proj.weight.dtype)
        return self.pos_proj(pos)

    def forward(self, values: torch.Tensor, mask: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        # values, mask: (B, N); k: (B,) -> (B, N, d)
        if values.shape != mask.shape:
            raise ValueError(f"values {tuple(values.shape)} vs mask {tuple(mask.shape)}")
        dtype = self.value_proj.weight.dtype
        n = values.shape[-1]
        h = self.value_proj(torch.stack([values, mask], dim=-1).to(dtype))
        step = temporal_embedding(k, self.step_dim).to(dtype)
        return h + self.position(n) + self.step_proj(step).unsqueeze(-2)


class TimestampEmbedding(nn.Module):
    """1x1 convolution of calendar features to ``d`` channels."""

    def __init__(self, feature_dim: int, d: int):
        super().__init__()
        self.proj = nn.Linear(feature_dim, d)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.proj(feats.to(self.proj.weight.dtype))

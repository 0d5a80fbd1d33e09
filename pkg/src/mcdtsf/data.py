"""Series ingestion, z-score normalisation, chronological splitting, and
frequency-dependent windowing into multimodal samples."""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .featenc import Frequency, encode_timestamps, parse_date
from .textcond import TextDocument, attach_text, load_documents

# history length and (short, medium, long) horizons per frequency
WINDOW_TABLE = {
    Frequency.MONTHLY: (36, (6, 12, 18)),
    Frequency.WEEKLY: (96, (12, 24, 48)),
    Frequency.DAILY: (336, (48, 96, 192)),
}


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    dates: list
    values: np.ndarray  # (N, C)
    frequency: Frequency
    columns: list = field(default_factory=lambda: ["value"])

    def __len__(self) -> int:
        return len(self.dates)


def check_uniform(dates: Sequence[dt.date], freq: Frequency) -> None:
    idx = [freq.index(d) for d in dates]
    for a, b, d0, d1 in zip(idx, idx[1:], dates, dates[1:]):
        if b == a:
            raise DataError(f"duplicate {freq.value} period: {d0} and {d1}")
        if b != a + 1:
            raise DataError(f"gap after {d0}: missing {freq.step(d0, 1).isoformat()}")


def load_series(path, frequency) -> RawSeries:
    freq = Frequency.parse(frequency)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip().lower() != "date" or len(header) < 2:
            raise DataError(f"{path}: header must be 'date,value[,...]', got {header}")
        for lineno, rec in enumerate(reader, 2):
            if not rec or not any(x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                rows.append((parse_date(rec[0]), [float(x) for x in rec[1:]]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    rows.sort(key=lambda r: r[0])
    dates = [r[0] for r in rows]
    seen = set()
    for d in dates:
        if d in seen:
            raise DataError(f"{path}: duplicate date {d.isoformat()}")
        seen.add(d)
    check_uniform(dates, freq)
    values = np.array([r[1] for r in rows], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite values")
    return RawSeries(dates, values, freq, [h.strip() for h in header[1:]])


def save_series(series: RawSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *series.columns])
        for d, row in zip(series.dates, series.values):
            w.writerow([d.isoformat(), *(repr(float(v)) for v in row)])


def chronological_split(n: int) -> tuple[range, range, range]:
    """Contiguous 7:1:2 train/validation/test index ranges."""
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    n_train, n_val = 7 * n // 10, n // 10
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (values - self.mean) / self.std

    def invert(self, values):
        return values * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_json(cls, obj) -> "NormStats":
        return cls(np.array(obj["mean"]), np.array(obj["std"]))


def fit_normalizer(train_values) -> NormStats:
    """Per-channel mean and population standard deviation."""
    v = np.asarray(train_values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] == 0:
        raise DataError("cannot fit normaliser on an empty split")
    mean, std = v.mean(0), v.std(0)
    if np.any(std <= 0):
        raise DataError(f"zero-variance channel(s): {np.flatnonzero(std <= 0).tolist()}")
    return NormStats(mean, std)


@dataclass
class WindowSample:
    x: np.ndarray  # (H, C) history
    y: np.ndarray  # (F, C) future gold standard
    u: np.ndarray  # (H + F, feature_dim) calendar features
    prompt: str
    window_id: str  # ISO date of the last history step
    start: int
    split: str


def window_lengths(freq, horizon: int | None = None) -> tuple[int, int]:
    history, horizons = WINDOW_TABLE[Frequency.parse(freq)]
    if horizon is None:
        horizon = horizons[0]
    return history, horizon


def split_of(last_index: int, splits: tuple[range, range, range]) -> str:
    for name, rng in zip(("train", "val", "test"), splits):
        if last_index in rng:
            return name
    raise IndexError(last_index)


def make_windows(series: RawSeries, horizon: int | None = None, history: int | None = None,
                 docs: Sequence[TextDocument] = (), target_variable: str = "value",
                 sampling_period: str | None = None, values: np.ndarray | None = None,
                 text: bool = True) -> list[WindowSample]:
    """Stride-1 windows; each is tagged with the split holding its last future step.

    ``values`` overrides ``series.values`` (e.g. normalised data).
    """
    freq = series.frequency
    H_default, F_default = window_lengths(freq, horizon)
    H = history or H_default
    Fh = horizon or F_default
    vals = series.values if values is None else np.asarray(values)
    if vals.ndim == 1:
        vals = vals[:, None]
    n = len(series)
    if n < H + Fh:
        raise DataError(f"series of length {n} shorter than history + horizon = {H + Fh}")
    splits = chronological_split(n) if n >= 10 else (range(n), range(0), range(0))
    feats = encode_timestamps(series.dates, freq)
    out = []
    for i in range(n - H - Fh + 1):
        end = series.dates[i + H - 1]
        prompt = attach_text(end, freq, docs, H, Fh, target_variable, sampling_period) if text else ""
        out.append(WindowSample(
            x=vals[i:i + H], y=vals[i + H:i + H + Fh], u=feats[i:i + H + Fh],
            prompt=prompt, window_id=end.isoformat(), start=i,
            split=split_of(i + H + Fh - 1, splits)))
    return out


@dataclass
class WindowBatch:
    x: torch.Tensor  # (B, C, H)
    y: torch.Tensor  # (B, C, F)
    u: torch.Tensor  # (B, H + F, feature_dim)
    prompts: list
    window_ids: list

    def __len__(self) -> int:
        return self.x.shape[0]

    def text_keys(self, field_name: str) -> list:
        if field_name == "prompt":
            return list(self.prompts)
        # windows without text stay unconditional whatever the key field
        return [w if p else "" for p, w in zip(self.prompts, self.window_ids)]

    def subset(self, idx) -> "WindowBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        il = idx.tolist()
        return WindowBatch(self.x[idx], self.y[idx], self.u[idx],
                           [self.prompts[i] for i in il], [self.window_ids[i] for i in il])

    def with_prompts(self, prompts) -> "WindowBatch":
        return WindowBatch(self.x, self.y, self.u, list(prompts), self.window_ids)


def stack_windows(windows: Sequence[WindowSample], dtype=torch.float32) -> WindowBatch:
    if not windows:
        raise DataError("no windows to stack")
    x = torch.as_tensor(np.stack([w.x.T for w in windows]), dtype=dtype)
    y = torch.as_tensor(np.stack([w.y.T for w in windows]), dtype=dtype)
    u = torch.as_tensor(np.stack([w.u for w in windows]), dtype=dtype)
    return WindowBatch(x, y, u, [w.prompt for w in windows], [w.window_id for w in windows])


@dataclass
class Manifest:
    series: Path
    frequency: Frequency
    target_variable: str = "value"
    sampling_period: str | None = None
    text: Path | None = None
    text_embeddings: Path | None = None
    name: str = "dataset"

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        obj = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent

        def resolve(key):
            return (base / obj[key]) if obj.get(key) else None

        try:
            return cls(series=resolve("series"), frequency=Frequency.parse(obj["frequency"]),
                       target_variable=obj.get("target_variable", "value"),
                       sampling_period=obj.get("sampling_period"), text=resolve("text"),
                       text_embeddings=resolve("text_embeddings"),
                       name=obj.get("name", path.stem))
        except KeyError as exc:
            raise DataError(f"{path}: missing manifest key {exc}") from None

    def to_json(self, relative_to=None) -> dict:
        def rel(p):
            if p is None:
                return None
            return str(Path(p).relative_to(relative_to)) if relative_to else str(p)
        return {"name": self.name, "series": rel(self.series), "frequency": self.frequency.value,
                "target_variable": self.target_variable, "sampling_period": self.sampling_period,
                "text": rel(self.text), "text_embeddings": rel(self.text_embeddings)}


@dataclass
class PreparedData:
    train: WindowBatch
    val: WindowBatch | None
    test: WindowBatch | None
    stats: NormStats
    history: int
    horizon: int
    frequency: Frequency
    series: RawSeries
    windows: list


def prepare(manifest: Manifest, horizon: int | None = None, history: int | None = None,
            use_text: bool = True, stats: NormStats | None = None) -> PreparedData:
    """Load, normalise with train-split statistics, window, and stack per split."""
    series = load_series(manifest.series, manifest.frequency)
    use_text = use_text and (manifest.text is not None or manifest.text_embeddings is not None)
    docs = load_documents(manifest.text) if (use_text and manifest.text) else []
    H, Fh = window_lengths(series.frequency, horizon)
    H = history or H
    tr, _, _ = chronological_split(len(series))
    if stats is None:
        stats = fit_normalizer(series.values[tr.start:tr.stop])
    windows = make_windows(series, Fh, H, docs, manifest.target_variable, manifest.sampling_period,
                           values=stats.apply(series.values), text=use_text)

    def stack(tag):
        ws = [w for w in windows if w.split == tag]
        return stack_windows(ws) if ws else None

    train = stack("train")
    if train is None:
        raise DataError("no training windows; series too short for the window lengths")
    return PreparedData(train, stack("val"), stack("test"), stats, H, Fh, series.frequency,
                        series, windows)

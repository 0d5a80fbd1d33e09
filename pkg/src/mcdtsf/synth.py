"""Synthetic multimodal series with a known conditional mean.

``value_t = a_s * season(calendar_t) + shift_t + noise_t``. The shift level
flips sign at random events; every event is announced by one short report
per interval during the ``lead`` intervals before it takes effect, counting
down the remaining time. With ``status_reports`` every other interval
carries a short "hold steady" report, so the newest line of a prompt always
describes the window's last interval. For horizons up to ``lead`` the oracle below is the
exact conditional mean given timestamps and the reports seen so far.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import WINDOW_TABLE, Manifest, RawSeries, save_series
from .featenc import Frequency, encode_timestamps, parse_date
from .textcond import TextDocument, save_documents

_ONES = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
         "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
         "eighteen", "nineteen"]
_TENS = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"]


def number_words(n: int) -> str:
    if n < 20:
        return _ONES[n]
    if n < 100:
        return _TENS[n // 10] + ("" if n % 10 == 0 else " " + _ONES[n % 10])
    if n < 1000:
        rest = n % 100
        return _ONES[n // 100] + " hundred" + ("" if rest == 0 else " " + number_words(rest))
    raise ValueError(n)


@dataclass
class SynthConfig:
    length: int = 2000
    frequency: str = "monthly"
    seasonal_amplitude: float = 1.0
    text_shift: float = 1.0
    noise_std: float = 0.3
    event_rate: float = 0.05
    seed: int = 0
    lead: int | None = None
    start: str = "1850-01-01"
    target_variable: str = "demand"
    status_reports: bool = True

    def __post_init__(self):
        self.frequency = Frequency.parse(self.frequency).value
        if self.seasonal_amplitude < 0 or self.text_shift < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if not 0.0 <= self.event_rate <= 1.0:
            raise ValueError("event_rate must lie in [0, 1]")
        if self.lead is None:
            self.lead = WINDOW_TABLE[Frequency.parse(self.frequency)][1][0]


def season(features: np.ndarray) -> np.ndarray:
    """Deterministic seasonal profile from ``(N, feature_dim)`` calendar features."""
    phase = 2 * np.pi * (features + 0.5)
    comp = np.sin(phase) + 0.5 * np.cos(2 * phase + 1.0)
    return comp.mean(axis=1)


@dataclass
class Oracle:
    """Exact conditional mean of the generative law."""

    mean: np.ndarray  # (N,) a_s * season + shift
    lead: int

    def predict(self, end_index: int, horizon: int) -> np.ndarray:
        """Forecast for the ``horizon`` steps after history position ``end_index``."""
        if horizon > self.lead:
            raise ValueError(f"oracle is exact only for horizons <= lead ({self.lead})")
        return self.mean[end_index + 1:end_index + 1 + horizon]

    def predictor(self, series: RawSeries, stats=None):
        """Evaluation predictor ``(batch, seed) -> (B, 1, F)`` keyed by window id
        (the history's last date), normalised with ``stats`` when given."""
        where = {d.isoformat(): i for i, d in enumerate(series.dates)}

        def predict(batch, seed):
            F = batch.y.shape[-1]
            out = np.stack([self.predict(where[w], F) for w in batch.window_ids])[:, None, :]
            if stats is not None:
                out = (out - stats.mean[0]) / stats.std[0]
            return out
        return predict


def generate(cfg: SynthConfig):
    """Returns ``(RawSeries, documents, Oracle)``."""
    rng = np.random.default_rng(cfg.seed)
    freq = Frequency.parse(cfg.frequency)
    start = parse_date(cfg.start)
    dates = [freq.step(start, i) for i in range(cfg.length)]
    seasonal = cfg.seasonal_amplitude * season(encode_timestamps(dates, freq))

    lead = cfg.lead
    events = []
    last = -np.inf
    for t in range(lead, cfg.length):
        if t - last >= 2 * lead and rng.random() < cfg.event_rate:
            events.append(t)
            last = t
    sign = 1.0 if rng.random() < 0.5 else -1.0
    level = np.empty(cfg.length)
    docs = []
    ev = iter(events + [cfg.length])
    nxt = next(ev)
    for t in range(cfg.length):
        if t == nxt:
            sign = -sign
            nxt = next(ev)
        level[t] = sign
    if cfg.text_shift > 0:
        word = freq.period_word
        report = {}
        for e in events:
            direction = "up" if level[e] > 0 else "down"
            for j in range(lead, 0, -1):
                unit = word if j == 1 else word + "s"
                report[e - j] = f"{cfg.target_variable} will shift {direction} in {number_words(j)} {unit}"
        for t, d in enumerate(dates):
            if t in report:
                docs.append(TextDocument(d, d, report[t]))
            elif cfg.status_reports:
                docs.append(TextDocument(d, d, f"{cfg.target_variable} will hold steady"))
    mean = seasonal + cfg.text_shift * level
    values = mean + cfg.noise_std * rng.standard_normal(cfg.length)
    series = RawSeries(dates, values[:, None], freq, [cfg.target_variable])
    return series, docs, Oracle(mean, lead)


def write_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Writes series CSV, report JSONL, oracle CSV and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, docs, oracle = generate(cfg)
    save_series(series, out / "series.csv")
    save_documents(docs, out / "text.jsonl")
    with open(out / "oracle.csv", "w", encoding="utf-8") as fh:
        fh.write("date,mean\n")
        for d, m in zip(series.dates, oracle.mean):
            fh.write(f"{d.isoformat()},{m!r}\n")
    manifest = Manifest(out / "series.csv", Frequency.parse(cfg.frequency), cfg.target_variable,
                        None, out / "text.jsonl", None, "synth")
    body = manifest.to_json(relative_to=out)
    body["synth"] = asdict(cfg)
    (out / "manifest.json").write_text(json.dumps(body, indent=2))
    return out / "manifest.json"

"""Metrics, the evaluation harness, and the ablation / sweep runner.

Metrics are computed on the normalised scale by default. MSE is the mean of
squared errors; the published metric definition that takes a square root of
a mean absolute error is treated as a misprint (see ``MSE_NOTE``).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .data import Manifest, NormStats, PreparedData, WindowBatch, prepare
from .denoiser import (MCDTSF, VARIANTS, ModelConfig, TrainConfig, build_model, load_checkpoint,
                       point_forecast, sample_forecast, save_checkpoint, text_provider_for, train,
                       variant_config)

log = logging.getLogger(__name__)

MSE_NOTE = ("mse = mean((pred - gold)^2), mae = mean(|pred - gold|). The printed MSE definition "
            "that takes a square root of the mean absolute error is inconsistent with its name "
            "and is not used.")

SWEEP_GRIDS = {
    "lambda": (0.2, 0.4, 0.6, 0.8, 1.0),
    "w": (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5, 2.0, 2.5),
    "p_uncond": (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
    "fusion_order": ("taa-ttf", "ttf-taa"),
}
# sweep axis -> ModelConfig field
SWEEP_FIELDS = {"lambda": "lam", "w": "w", "p_uncond": "p_uncond", "fusion_order": "fusion_order"}
# axes that only change inference, so trained models are reused
INFERENCE_ONLY = {"w"}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["meta", "rows", "records", "sweeps"],
    "properties": {
        "meta": {"type": "object", "required": ["scale", "metric_note", "mode"]},
        "rows": {"type": "array", "items": {"$ref": "#/$defs/row"}},
        "records": {"type": "array", "items": {"$ref": "#/$defs/record"}},
        "sweeps": {"type": "array", "items": {"$ref": "#/$defs/row"}},
    },
    "$defs": {
        "row": {
            "type": "object",
            "required": ["dataset", "variant", "horizon", "mse", "mae", "n_windows", "runtime", "seeds"],
            "properties": {
                "dataset": {"type": "string"},
                "variant": {"type": "string"},
                "horizon": {"type": ["integer", "string"]},
                "mse": {"type": "number", "minimum": 0},
                "mae": {"type": "number", "minimum": 0},
                "n_windows": {"type": "integer", "minimum": 0},
                "runtime": {"type": "number", "minimum": 0},
                "seeds": {"type": "array", "items": {"type": "integer"}},
                "param": {"type": ["string", "null"]},
                "value": {},
            },
        },
        "record": {
            "type": "object",
            "required": ["dataset", "variant", "horizon", "seed", "mse", "mae", "n_windows", "runtime"],
        },
    },
}


class ConfigMismatch(ValueError):
    pass


def _pair(pred, gold):
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape:
        raise ValueError(f"length mismatch: prediction {pred.shape} vs gold {gold.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, gold


def mse(pred, gold) -> float:
    pred, gold = _pair(pred, gold)
    return float(np.mean((pred - gold) ** 2))


def mae(pred, gold) -> float:
    pred, gold = _pair(pred, gold)
    return float(np.mean(np.abs(pred - gold)))


@dataclass
class EvalMode:
    """How point forecasts are produced and scored."""

    steps: int | None = None  # None: the model's sample_steps
    eta: float = 0.0
    w: float | None = None  # None: the model's guidance strength
    n_samples: int = 1  # >1: median of that many samples
    scale: str = "normalized"

    def __post_init__(self):
        if self.scale not in ("normalized", "original"):
            raise ValueError(f"unknown metric scale {self.scale!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")

    def to_json(self) -> dict:
        return asdict(self)


# (batch, seed) -> (B, C, F) forecasts on the normalised scale
Predictor = Callable[[WindowBatch, int], np.ndarray]


def model_predictor(model: MCDTSF, mode: EvalMode) -> Predictor:
    def predict(batch: WindowBatch, seed: int) -> np.ndarray:
        gen = torch.Generator().manual_seed(seed)
        samples = sample_forecast(model, batch, generator=gen, steps=mode.steps, eta=mode.eta,
                                  w=mode.w, n_samples=mode.n_samples)
        return point_forecast(samples).double().numpy()
    return predict


def score(pred, batch: WindowBatch, stats: NormStats | None = None, scale: str = "normalized"):
    """``(mse, mae)`` of ``(B, C, F)`` forecasts against the batch futures."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = batch.y.double().numpy()
    if scale == "original":
        if stats is None:
            raise ValueError("original-scale metrics need normalisation statistics")
        # NormStats works on a trailing channel axis
        pred = stats.invert(np.swapaxes(pred, 1, 2))
        gold = stats.invert(np.swapaxes(gold, 1, 2))
    return mse(pred, gold), mae(pred, gold)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # seed-averaged, per horizon plus "avg"
    records: list = field(default_factory=list)  # raw per-seed cells
    sweeps: list = field(default_factory=list)  # seed-averaged sweep cells
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"meta": self.meta, "rows": self.rows, "records": self.records, "sweeps": self.sweeps}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(obj.get("rows", []), obj.get("records", []), obj.get("sweeps", []), obj.get("meta", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_csv(self, path) -> Path:
        """Flattens rows and sweep cells into one table."""
        cols = ["kind", "dataset", "variant", "param", "value", "horizon", "mse", "mae",
                "n_windows", "runtime", "seeds"]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            wr.writeheader()
            for kind, rows in (("row", self.rows), ("sweep", self.sweeps)):
                for r in rows:
                    wr.writerow({**r, "kind": kind, "seeds": " ".join(map(str, r["seeds"]))})
        return path

    def matrix(self, metric: str = "mse") -> dict:
        """``{variant: {horizon: value}}`` laid out like an ablation table."""
        out: dict = {}
        for r in self.rows:
            out.setdefault(r["variant"], {})[r["horizon"]] = r[metric]
        return out

    def value(self, variant: str, horizon="avg", metric: str = "mse", dataset: str | None = None,
              param: str | None = None, value=None) -> float:
        """One seed-averaged number; ``param``/``value`` select a sweep cell."""
        for r in (self.rows if param is None else self.sweeps):
            if (r["variant"] == variant and r["horizon"] == horizon and dataset in (None, r["dataset"])
                    and r["param"] == param and r["value"] == _hashable(value)):
                return r[metric]
        raise KeyError((variant, horizon, param, value))

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.records += other.records
        self.meta = self.meta or other.meta
        self.rows, self.sweeps = aggregate(self.records)
        return self


def aggregate(records: list) -> tuple[list, list]:
    """Seed-average raw records into per-horizon rows plus an ``avg`` row per
    (dataset, variant[, sweep cell]). Returns ``(rows, sweeps)``."""
    groups: dict = {}
    for r in records:
        key = (r["dataset"], r["variant"], r.get("param"), _hashable(r.get("value")))
        groups.setdefault(key, {}).setdefault(r["horizon"], []).append(r)
    rows, sweeps = [], []
    for (dataset, variant, param, value), by_h in groups.items():
        out = []
        for h in sorted(by_h):
            cell = sorted(by_h[h], key=lambda r: r["seed"])
            out.append({"dataset": dataset, "variant": variant, "param": param, "value": value,
                        "horizon": h,
                        "mse": float(np.mean([c["mse"] for c in cell])),
                        "mae": float(np.mean([c["mae"] for c in cell])),
                        "n_windows": int(cell[0]["n_windows"]),
                        "runtime": float(sum(c["runtime"] for c in cell)),
                        "seeds": [c["seed"] for c in cell]})
        out.append({"dataset": dataset, "variant": variant, "param": param, "value": value,
                    "horizon": "avg",
                    "mse": float(np.mean([o["mse"] for o in out])),
                    "mae": float(np.mean([o["mae"] for o in out])),
                    "n_windows": int(sum(o["n_windows"] for o in out)),
                    "runtime": float(sum(o["runtime"] for o in out)),
                    "seeds": out[0]["seeds"]})
        (rows if param is None else sweeps).extend(out)
    return rows, sweeps


def _hashable(v):
    return tuple(v) if isinstance(v, list) else v


def _report(records: list, mode: EvalMode, **meta) -> EvalReport:
    rows, sweeps = aggregate(records)
    return EvalReport(rows, records, sweeps,
                      {"scale": mode.scale, "metric_note": MSE_NOTE, "mode": mode.to_json(), **meta})


def _resolve(model, manifest: Manifest | None):
    """Model, its normalisation statistics (or None), from a model or checkpoint path."""
    if isinstance(model, MCDTSF):
        return model, None
    path = Path(model)
    with np.load(path, allow_pickle=False) as z:
        cfg = ModelConfig.from_json(json.loads(str(z["__meta__"]))["config"])
    provider = text_provider_for(cfg, manifest.text_embeddings if manifest else None)
    model, stats, _ = load_checkpoint(path, provider)
    return model, stats


def evaluate(models: dict, data, mode: EvalMode | None = None, seeds: Iterable[int] = (0, 1, 2),
             dataset: str | None = None, variant: str | None = None, split: str = "test") -> EvalReport:
    """Scores forecasts on every window of ``split`` for each horizon.

    ``models`` maps horizon -> model, checkpoint path, or a ``Predictor``.
    ``data`` is a Manifest (windows are built per horizon with the model's
    history and statistics) or a mapping horizon -> PreparedData. Each
    horizon is repeated over ``seeds`` (sampling seeds) and averaged.
    """
    mode = mode or EvalMode()
    seeds = list(seeds)
    records = []
    manifest = data if isinstance(data, Manifest) else None
    for h in sorted(models):
        entry = models[h]
        stats = None
        if callable(entry) and not isinstance(entry, MCDTSF):
            predict, model = entry, None
        else:
            model, stats = _resolve(entry, manifest)
            if model.cfg.horizon != h:
                raise ConfigMismatch(f"model horizon {model.cfg.horizon} registered under horizon {h}")
            predict = model_predictor(model, mode)
        if manifest is not None:
            if model is not None and model.cfg.frequency != manifest.frequency.value:
                raise ConfigMismatch(f"model trained on {model.cfg.frequency} data, "
                                     f"dataset is {manifest.frequency.value}")
            prepared = prepare(manifest, h, model.cfg.history if model else None, stats=stats)
        else:
            prepared = data[h]
            if model is not None and (prepared.history, prepared.horizon) != (model.cfg.history, h):
                raise ConfigMismatch(f"windows ({prepared.history}, {prepared.horizon}) do not match "
                                     f"model ({model.cfg.history}, {h})")
        batch = getattr(prepared, split)
        if batch is None:
            raise ValueError(f"no {split} windows for horizon {h}")
        name = dataset or (manifest.name if manifest else "dataset")
        vname = variant or (model.cfg.variant if model is not None else "predictor")
        for seed in seeds:
            t0 = time.perf_counter()
            pred = predict(batch, seed)
            m, a = score(pred, batch, prepared.stats, mode.scale)
            records.append({"dataset": name, "variant": vname, "horizon": h, "seed": seed,
                            "mse": m, "mae": a, "n_windows": len(batch),
                            "runtime": time.perf_counter() - t0, "param": None, "value": None})
    return _report(records, mode, split=split)


# ---------------------------------------------------------------- ablation

@dataclass
class Cell:
    variant: str
    horizon: int
    seed: int
    param: str | None = None
    value: object = None

    @property
    def tag(self) -> str:
        sweep = f"_{self.param}={self.value}" if self.param else ""
        return f"{self.variant}_h{self.horizon}_s{self.seed}{sweep}"


def cell_config(base: ModelConfig, cell: Cell, history: int, frequency: str) -> ModelConfig:
    cfg = variant_config(base.replace(horizon=cell.horizon, history=history, frequency=frequency),
                         cell.variant)
    if cell.param is not None:
        cfg = cfg.replace(**{SWEEP_FIELDS[cell.param]: cell.value})
    return cfg


def fit(data: PreparedData, cfg: ModelConfig, tcfg: TrainConfig, seed: int,
        provider=None, callback=None) -> tuple[MCDTSF, object]:
    """Builds and trains one model; the single training path shared by the CLI and ``ablate``."""
    model = build_model(cfg, seed, provider)
    result = train(model, data.train, data.val, replace(tcfg, seed=seed), callback=callback)
    return model, result


def _run_cells(job: dict) -> list:
    """Trains one model and scores it under one or more inference settings."""
    torch.set_num_threads(job.get("threads", 1))
    manifest = Manifest.load(job["manifest"]) if isinstance(job["manifest"], (str, Path)) \
        else job["manifest"]
    base = ModelConfig.from_json(job["base"])
    tcfg = TrainConfig(**job["train"])
    mode = EvalMode(**job["mode"])
    cell = Cell(**job["cell"])
    history = job["history"]
    data = prepare(manifest, cell.horizon, history)
    cfg = cell_config(base, cell, data.history, manifest.frequency.value)
    t0 = time.perf_counter()
    model, result = fit(data, cfg, tcfg, cell.seed, text_provider_for(cfg, manifest.text_embeddings))
    train_time = time.perf_counter() - t0
    if job.get("out_dir"):
        save_checkpoint(Path(job["out_dir"]) / f"{cell.tag}.npz", model, data.stats,
                        {"train_curve": result.curve})
    out = []
    for inf in job.get("inference", [None]):
        c = Cell(**inf) if inf else cell
        m_mode = mode if c.param not in INFERENCE_ONLY else EvalMode(**{**asdict(mode), "w": c.value})
        t1 = time.perf_counter()
        pred = model_predictor(model, m_mode)(data.test, cell.seed)
        m, a = score(pred, data.test, data.stats, mode.scale)
        out.append({"dataset": manifest.name, "variant": c.variant, "horizon": c.horizon,
                    "seed": c.seed, "mse": m, "mae": a, "n_windows": len(data.test),
                    "runtime": train_time + time.perf_counter() - t1, "train_time": train_time,
                    "param": c.param, "value": c.value, "best_epoch": result.best_epoch})
    return out


def ablate(manifest, variants: Iterable[str] = tuple(VARIANTS), horizons: Iterable[int] | None = None,
           base: ModelConfig | None = None, tcfg: TrainConfig | None = None,
           seeds: Iterable[int] = (0, 1, 2), sweeps: dict | None = None,
           mode: EvalMode | None = None, history: int | None = None, jobs: int = 1,
           out_dir=None, sweep_variant: str = "MCD-TSF", progress=None) -> EvalReport:
    """Trains and scores every (variant, horizon, seed) cell plus sweep cells.

    ``sweeps`` maps an axis in ``SWEEP_GRIDS`` to the values to try on
    ``sweep_variant``. Inference-only axes (w) reuse one trained model per
    (horizon, seed). ``progress`` is called with each finished record.
    """
    manifest = Manifest.load(manifest) if isinstance(manifest, (str, Path)) else manifest
    variants = list(variants)
    unknown = [v for v in variants + [sweep_variant] if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
    sweeps = sweeps or {}
    for axis in sweeps:
        if axis not in SWEEP_FIELDS:
            raise ValueError(f"unknown sweep axis {axis!r}; choose from {list(SWEEP_FIELDS)}")
    base = base or ModelConfig()
    tcfg = tcfg or TrainConfig()
    mode = mode or EvalMode()
    seeds = list(seeds)
    if horizons is None:
        from .data import window_lengths
        horizons = [window_lengths(manifest.frequency)[1]]
    horizons = list(horizons)

    jobs_list = []
    common = {"manifest": manifest, "base": base.to_json(), "train": asdict(tcfg),
              "mode": mode.to_json(), "history": history,
              "out_dir": str(out_dir) if out_dir else None}
    for h in horizons:
        for s in seeds:
            for v in variants:
                jobs_list.append({**common, "cell": asdict(Cell(v, h, s))})
            for axis, values in sweeps.items():
                if axis in INFERENCE_ONLY:
                    cells = [asdict(Cell(sweep_variant, h, s, axis, val)) for val in values]
                    jobs_list.append({**common, "cell": asdict(Cell(sweep_variant, h, s)),
                                      "inference": cells})
                else:
                    for val in values:
                        jobs_list.append({**common, "cell": asdict(Cell(sweep_variant, h, s, axis, val))})

    records = []
    if jobs <= 1:
        for job in jobs_list:
            for rec in _run_cells(job):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            # results are consumed in submission order so the report is deterministic
            for recs in pool.map(_run_cells, jobs_list):
                for rec in recs:
                    records.append(rec)
                    if progress:
                        progress(rec)
    return _report(records, mode, train=asdict(tcfg), base=base.to_json(),
                   variants=variants, sweeps={k: list(v) for k, v in sweeps.items()})


def sweep_svg(report: EvalReport, param: str, metric: str = "mse", path=None) -> str:
    """Line plot of a sweep axis (seed-averaged ``avg`` rows); returns SVG text."""
    import io

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [(r["value"], r[metric]) for r in report.sweeps if r["param"] == param and r["horizon"] == "avg"]
    if not pts:
        raise ValueError(f"report has no sweep over {param!r}")
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = [p[0] for p in pts]
    numeric = all(isinstance(x, (int, float)) for x in xs)
    ax.plot(xs if numeric else range(len(xs)), [p[1] for p in pts], marker="o")
    if not numeric:
        ax.set_xticks(range(len(xs)), [str(x) for x in xs])
    ax.set_xlabel(param)
    ax.set_ylabel(metric.upper())
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    text = buf.getvalue()
    if path:
        Path(path).write_text(text, encoding="utf-8")
    return text

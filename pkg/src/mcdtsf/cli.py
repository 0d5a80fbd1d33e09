"""Command-line entry point: ``mcdtsf <command> [options]``.

Configuration precedence is flags > ``--config`` file > built-in defaults.
Every command writes its resolved configuration next to its outputs, and
that file can be passed back through ``--config`` to repeat the run.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import DataError, Manifest, prepare
from .featenc import parse_date
from .denoiser import (VARIANTS, ModelConfig, NonFiniteState, TrainConfig, TrainingDiverged,
                       load_checkpoint, point_forecast, sample_forecast, save_checkpoint,
                       text_provider_for, variant_config)
from .evaluate import (SWEEP_GRIDS, ConfigMismatch, EvalMode, ablate, evaluate, fit, sweep_svg)
from .schedule import ScheduleError, build_quadratic_schedule
from .synth import SynthConfig, write_dataset

log = logging.getLogger("mcdtsf")

OUT_ENV = "MCDTSF_OUT"
RUN_CONFIG = "run_config.json"


class UsageError(Exception):
    pass


# argparse dest -> config field
MODEL_FLAGS = {
    "depth": "depth", "d": "d", "heads": "heads", "K": "K", "beta_min": "beta_min",
    "beta_max": "beta_max", "lam": "lam", "w": "w", "p_uncond": "p_uncond", "eta": "eta",
    "sample_steps": "sample_steps", "fusion_order": "fusion_order", "text_provider": "text_provider",
    "d_text": "d_text", "vocab": "vocab", "max_tokens": "max_tokens", "history": "history",
    "fixed_variance": "fixed_variance", "precondition": "precondition",
    "timestamp_position": "timestamp_position", "head_loss_weight": "head_loss_weight",
    "aux_history_weight": "aux_history_weight",
}
TRAIN_FLAGS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "patience": "patience",
    "val_every": "val_every", "grad_clip": "grad_clip", "ema_decay": "ema_decay",
    "lr_schedule": "lr_schedule",
}


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _load_config(path) -> dict:
    if not path:
        return {}
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    return obj


def resolve_configs(args, file_cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    model = dict(file_cfg.get("model", {}))
    trn = dict(file_cfg.get("train", {}))
    for flag, name in MODEL_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            model[name] = v
    for flag, name in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            trn[name] = v
    variant = getattr(args, "variant", None) or file_cfg.get("variant")
    try:
        cfg = ModelConfig.from_json(model)
        if variant:
            cfg = variant_config(cfg, variant)
        tcfg = TrainConfig(**{**trn, "seed": 0})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg, tcfg


def _seed(args, file_cfg) -> int:
    return args.seed if args.seed is not None else int(file_cfg.get("seed", 0))


def _write_run_config(out: Path, command: str, **body) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / RUN_CONFIG
    path.write_text(json.dumps({"command": command, "version": __version__, **body}, indent=2,
                               default=str), encoding="utf-8")
    return path


def _manifest(args, file_cfg) -> Manifest:
    path = args.manifest or file_cfg.get("manifest")
    if not path:
        raise UsageError("--manifest is required")
    return Manifest.load(path)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    file_cfg = _load_config(args.config)
    fields = {f.name for f in dataclasses.fields(SynthConfig)}
    body = {k: v for k, v in file_cfg.get("synth", {}).items() if k in fields}
    for f in fields:
        v = getattr(args, f, None)
        if v is not None:
            body[f] = v
    try:
        cfg = SynthConfig(**body)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args, "synth")
    path = write_dataset(cfg, out)
    _write_run_config(out, "generate", synth=dataclasses.asdict(cfg), manifest=str(path))
    print(path)
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    manifest = _manifest(args, file_cfg)
    cfg, tcfg = resolve_configs(args, file_cfg)
    horizon = args.horizon or file_cfg.get("horizon")
    seed = _seed(args, file_cfg)
    data = prepare(manifest, horizon, args.history or file_cfg.get("model", {}).get("history"))
    cfg = cfg.replace(horizon=data.horizon, history=data.history, frequency=manifest.frequency.value)
    out = _out_dir(args, f"train_{cfg.variant}_h{data.horizon}_s{seed}")
    out.mkdir(parents=True, exist_ok=True)
    provider = text_provider_for(cfg, manifest.text_embeddings)
    t0 = time.perf_counter()

    def progress(row):
        log.info("epoch %d %s", row["epoch"],
                 " ".join(f"{k}={v:.5f}" for k, v in row.items() if k != "epoch"))

    model, result = fit(data, cfg, tcfg, seed, provider, progress)
    ckpt = out / "model.npz"
    save_checkpoint(ckpt, model, data.stats, {"best_epoch": result.best_epoch, "seed": seed})
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "train_loss", "val_mse"])
        for row in result.curve:
            wr.writerow([row["epoch"], row["train_loss"], row.get("val_mse", "")])
    _write_run_config(out, "train", manifest=str(args.manifest or file_cfg.get("manifest")),
                      horizon=data.horizon, seed=seed, variant=cfg.variant,
                      model=cfg.to_json(), train={**dataclasses.asdict(tcfg), "seed": seed},
                      checkpoint=str(ckpt), runtime=time.perf_counter() - t0)
    print(ckpt)
    return 0


def _load_model(path, manifest: Manifest):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        cfg = ModelConfig.from_json(json.loads(str(z["__meta__"]))["config"])
    if cfg.frequency != manifest.frequency.value:
        raise ConfigMismatch(f"checkpoint expects {cfg.frequency} data, manifest is "
                             f"{manifest.frequency.value}")
    return load_checkpoint(path, text_provider_for(cfg, manifest.text_embeddings))


def cmd_forecast(args) -> int:
    file_cfg = _load_config(args.config)
    manifest = _manifest(args, file_cfg)
    model, stats, _ = _load_model(args.checkpoint, manifest)
    cfg = model.cfg
    if args.horizon and args.horizon != cfg.horizon:
        raise ConfigMismatch(f"checkpoint forecasts {cfg.horizon} steps, --horizon {args.horizon}")
    data = prepare(manifest, cfg.horizon, cfg.history, stats=stats)
    batch = getattr(data, args.split)
    if batch is None:
        raise UsageError(f"no {args.split} windows")
    seed = _seed(args, file_cfg)
    out = _out_dir(args, "forecast")
    out.mkdir(parents=True, exist_ok=True)
    sink = [] if args.dump_attention else None
    samples = sample_forecast(model, batch, generator=torch.Generator().manual_seed(seed),
                              steps=args.steps, eta=args.eta, w=args.w, n_samples=args.samples,
                              attention_sink=sink)
    point = point_forecast(samples).double().numpy()
    samples = samples.double().numpy()
    if args.scale == "original":
        point = stats.invert(np.swapaxes(point, 1, 2)).swapaxes(1, 2)
        samples = np.stack([stats.invert(np.swapaxes(samples[:, i], 1, 2)).swapaxes(1, 2)
                            for i in range(samples.shape[1])], 1)
    n = samples.shape[1]
    freq = manifest.frequency
    columns = data.series.columns
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["window_id", "channel", "step", "date", "forecast", "actual"]
                    + ([f"sample_{i}" for i in range(n)] if n > 1 else []))
        gold = batch.y.double().numpy()
        if args.scale == "original":
            gold = stats.invert(np.swapaxes(gold, 1, 2)).swapaxes(1, 2)
        for b, wid in enumerate(batch.window_ids):
            end = parse_date(wid)
            for c, name in enumerate(columns):
                for f in range(cfg.horizon):
                    row = [wid, name, f + 1, freq.step(end, f + 1).isoformat(),
                           repr(float(point[b, c, f])), repr(float(gold[b, c, f]))]
                    if n > 1:
                        row += [repr(float(samples[b, i, c, f])) for i in range(n)]
                    wr.writerow(row)
    if sink is not None:
        arrays = {}
        for chunk, layers in enumerate(sink):
            for li, maps in enumerate(layers):
                for kind, a in maps.items():
                    arrays[f"chunk{chunk}/layer{li}/{kind}"] = a.float().numpy()
        np.savez_compressed(out / "attention.npz", **arrays)
    _write_run_config(out, "forecast", manifest=str(args.manifest or file_cfg.get("manifest")),
                      checkpoint=str(args.checkpoint), split=args.split, seed=seed,
                      w=args.w if args.w is not None else cfg.w,
                      eta=args.eta if args.eta is not None else cfg.eta,
                      steps=args.steps or cfg.sample_steps, samples=n, scale=args.scale)
    print(out / "predictions.csv")
    return 0


def _mode(args) -> EvalMode:
    return EvalMode(steps=args.steps, eta=args.eta if args.eta is not None else 0.0, w=args.w,
                    n_samples=args.samples, scale=args.scale)


def _seed_list(args, file_cfg) -> list:
    base = _seed(args, file_cfg)
    return [base + i for i in range(args.n_seeds)]


def _write_report(report, out: Path, svg_axes=()) -> None:
    report.save(out / "report.json")
    report.to_csv(out / "report.csv")
    for axis in svg_axes:
        sweep_svg(report, axis, path=out / f"sweep_{axis}.svg")


def cmd_evaluate(args) -> int:
    file_cfg = _load_config(args.config)
    manifest = _manifest(args, file_cfg)
    models = {}
    for path in args.checkpoint:
        model, stats, _ = _load_model(path, manifest)
        if model.cfg.horizon in models:
            raise UsageError(f"two checkpoints for horizon {model.cfg.horizon}")
        models[model.cfg.horizon] = path
    mode = _mode(args)
    seeds = _seed_list(args, file_cfg)
    report = evaluate(models, manifest, mode, seeds, split=args.split)
    out = _out_dir(args, "evaluate")
    _write_report(report, out)
    _write_run_config(out, "evaluate", manifest=str(args.manifest or file_cfg.get("manifest")),
                      checkpoints=[str(p) for p in args.checkpoint], mode=mode.to_json(),
                      seeds=seeds, split=args.split)
    for row in report.rows:
        print(f"{row['variant']}\th={row['horizon']}\tmse={row['mse']:.4f}\tmae={row['mae']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _load_config(args.config)
    manifest = _manifest(args, file_cfg)
    lam_values = args.lam
    if lam_values is not None:
        if not lam_values:
            raise UsageError("--lambda needs at least one value")
        args.lam = lam_values[0] if len(lam_values) == 1 else None
    cfg, tcfg = resolve_configs(args, file_cfg)
    variants = args.variants.split(",") if args.variants else file_cfg.get("variants", list(VARIANTS))
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
    sweeps = dict(file_cfg.get("sweeps", {}))
    if lam_values is not None and len(lam_values) > 1:
        sweeps["lambda"] = lam_values
    for axis, flag in (("lambda", "sweep_lambda"), ("w", "sweep_w"), ("p_uncond", "sweep_p_uncond")):
        text = getattr(args, flag)
        if text is not None:
            sweeps[axis] = list(SWEEP_GRIDS[axis]) if text == "grid" else _floats(text)
    if args.sweep_fusion_order is not None:
        sweeps["fusion_order"] = (list(SWEEP_GRIDS["fusion_order"]) if args.sweep_fusion_order == "grid"
                                  else args.sweep_fusion_order.split(","))
    horizons = _ints(args.horizons) if args.horizons else file_cfg.get("horizons")
    seeds = _seed_list(args, file_cfg)
    mode = _mode(args)
    out = _out_dir(args, "ablate")
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        sweep = f" {rec['param']}={rec['value']}" if rec["param"] else ""
        log.info("%s h=%s seed=%d%s mse=%.4f mae=%.4f (%.0fs)", rec["variant"], rec["horizon"],
                 rec["seed"], sweep, rec["mse"], rec["mae"], rec["runtime"])

    report = ablate(manifest, variants, horizons, cfg, tcfg, seeds, sweeps, mode,
                    history=args.history, jobs=args.jobs,
                    out_dir=out / "checkpoints" if args.keep_checkpoints else None, progress=progress)
    _write_report(report, out, svg_axes=list(sweeps))
    _write_run_config(out, "ablate", manifest=str(args.manifest or file_cfg.get("manifest")),
                      variants=variants, horizons=horizons, sweeps=sweeps, seeds=seeds,
                      model=cfg.to_json(), train=dataclasses.asdict(tcfg), mode=mode.to_json())
    for variant, cells in report.matrix().items():
        print(variant + "\t" + "\t".join(f"{h}:{v:.4f}" for h, v in cells.items()))
    return 0


def cmd_dump_schedule(args) -> int:
    sched = build_quadratic_schedule(args.K, args.beta_min, args.beta_max, args.fixed_variance)
    out = Path(args.out) if args.out else None
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        wr = csv.writer(fh)
        wr.writerow(["k", "beta", "alpha", "alpha_bar", "posterior_variance"])
        for row in sched.table():
            wr.writerow([row["k"]] + [repr(row[c]) for c in ("beta", "alpha", "alpha_bar", "sigma2")])
    finally:
        if out:
            fh.close()
    return 0


def cmd_export_prompts(args) -> int:
    manifest = Manifest.load(args.manifest)
    data = prepare(manifest, args.horizon, args.history)
    out = Path(args.out) if args.out else None
    fh = open(out, "w", encoding="utf-8") if out else sys.stdout
    try:
        for w in data.windows:
            if args.split == "all" or w.split == args.split:
                fh.write(json.dumps({"window_id": w.window_id, "split": w.split, "prompt": w.prompt}) + "\n")
    finally:
        if out:
            fh.close()
    return 0


# ---------------------------------------------------------------- parser

def _add_model_flags(p, lam_sweep: bool = False):
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=list(VARIANTS))
    g.add_argument("--depth", type=int)
    g.add_argument("--d", type=int, help="hidden width")
    g.add_argument("--heads", type=int)
    g.add_argument("--K", type=int, help="diffusion steps")
    g.add_argument("--beta-min", type=float)
    g.add_argument("--beta-max", type=float)
    g.add_argument("--fixed-variance", action="store_const", const=True)
    g.add_argument("--no-precondition", dest="precondition", action="store_const", const=False)
    g.add_argument("--no-timestamp-position", dest="timestamp_position", action="store_const",
                   const=False)
    g.add_argument("--head-loss-weight", type=float, help="per-head future loss weight")
    g.add_argument("--aux-history-weight", type=float)
    if lam_sweep:
        g.add_argument("--lambda", dest="lam", type=_floats,
                       help="timestamp weight; a comma list sweeps it")
    else:
        g.add_argument("--lambda", dest="lam", type=float, help="timestamp weight")
    g.add_argument("--p-uncond", type=float)
    g.add_argument("--sample-steps", type=int)
    g.add_argument("--fusion-order", choices=["taa-ttf", "ttf-taa"])
    g.add_argument("--text-provider", choices=["hash", "precomputed"])
    g.add_argument("--d-text", type=int)
    g.add_argument("--vocab", type=int)
    g.add_argument("--max-tokens", type=int)
    g.add_argument("--history", type=int)
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-every", type=int, help="validation interval in epochs (0: none)")
    t.add_argument("--lr-schedule", choices=["constant", "cosine"])
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--ema-decay", type=float)


def _add_inference_flags(p, multi_seed: bool):
    p.add_argument("--w", type=float, help="guidance strength")
    p.add_argument("--eta", type=float, help="DDIM stochasticity")
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--samples", type=int, default=1, help="samples per window (median point forecast)")
    p.add_argument("--scale", choices=["normalized", "original"], default="normalized")
    if multi_seed:
        p.add_argument("--n-seeds", type=int, default=3, help="seeds expand to seed+0..n-1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcdtsf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output path (default under ${OUT_ENV} or ./runs)")
        if manifest:
            p.add_argument("--manifest", help="dataset manifest JSON")

    p = sub.add_parser("generate", aliases=["synth"], help="write a synthetic multimodal dataset")
    common(p, manifest=False)
    p.add_argument("--length", type=int)
    p.add_argument("--frequency", choices=["daily", "weekly", "monthly"])
    p.add_argument("--seasonal-amplitude", type=float)
    p.add_argument("--text-shift", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--event-rate", type=float)
    p.add_argument("--lead", type=int)
    p.add_argument("--start")
    p.add_argument("--target-variable")
    p.add_argument("--no-status-reports", dest="status_reports", action="store_const", const=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--horizon", type=int)
    _add_model_flags(p)
    p.add_argument("--w", type=float, help="guidance strength stored with the model")
    p.add_argument("--eta", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="forecast every window of a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--dump-attention", action="store_true", help="write attention.npz")
    _add_inference_flags(p, multi_seed=False)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score checkpoints (one per horizon)")
    common(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--split", choices=["val", "test"], default="test")
    _add_inference_flags(p, multi_seed=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score variants and sweeps")
    common(p)
    p.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    p.add_argument("--horizons", help="comma list")
    p.add_argument("--sweep-lambda", help="comma list or 'grid'")
    p.add_argument("--sweep-w", help="comma list or 'grid'")
    p.add_argument("--sweep-p-uncond", help="comma list or 'grid'")
    p.add_argument("--sweep-fusion-order", help="comma list or 'grid'")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--keep-checkpoints", action="store_true")
    _add_model_flags(p, lam_sweep=True)
    _add_inference_flags(p, multi_seed=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-schedule", help="print the noise schedule as CSV")
    p.add_argument("--K", type=int, default=50)
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.5)
    p.add_argument("--fixed-variance", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_schedule)

    p = sub.add_parser("export-prompts", help="write the assembled prompt of every window as JSONL")
    p.add_argument("--manifest", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--history", type=int)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_prompts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, DataError, ConfigMismatch, ScheduleError) as exc:
        print(f"mcdtsf: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, NonFiniteState) as exc:
        print(f"mcdtsf: failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"mcdtsf: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.debug("unhandled", exc_info=True)
        print(f"mcdtsf: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""The conditional denoiser, its training objective and loop, the guided
reverse samplers, and checkpoint I/O.

The network predicts the clean future (x0 parameterisation), by default
through a skip connection on the noisy input so that low-noise steps start
from an exact copy. Only the
future positions are noised; history enters clean alongside an observed
mask channel.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .data import NormStats, WindowBatch
from .featenc import Frequency, SeriesEmbedding, TimestampEmbedding
from .fusion import FusionStack
from .head import ConvHead, FusionWeights, fuse_predictions, layer_pool
from .schedule import NoiseSchedule, build_quadratic_schedule, ddim_sigma, ddim_step, quadratic_subsequence
from .textcond import HashTokenProvider, PrecomputedProvider, TextConditioner

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mcdtsf-checkpoint"
CHECKPOINT_VERSION = 1

# variant name -> (timestamp attention, text fusion)
VARIANTS = {
    "DIFF": (False, False),
    "DIFF+TAA": (True, False),
    "DIFF+TTF": (False, True),
    "MCD-TSF": (True, True),
}


@dataclass
class ModelConfig:
    history: int = 36
    horizon: int = 6
    frequency: str = "monthly"
    depth: int = 6
    d: int = 64
    heads: int = 8
    step_dim: int = 128
    K: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.5
    fixed_variance: bool = False
    lam: float = 1.0
    w: float = 0.8
    p_uncond: float = 0.1
    eta: float = 0.0
    sample_steps: int = 50
    n_samples: int = 1
    fusion_order: str = "taa-ttf"
    use_taa: bool = True
    use_ttf: bool = True
    text_provider: str = "hash"
    d_text: int = 32
    vocab: int = 4096
    max_tokens: int = 512
    normalize_weights: bool = True
    aux_history_weight: float = 0.0
    head_loss_weight: float = 0.0
    precondition: bool = True
    timestamp_position: bool = True

    def __post_init__(self):
        self.frequency = Frequency.parse(self.frequency).value
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if not 1 <= self.sample_steps <= self.K:
            raise ValueError(f"sample_steps must lie in [1, K={self.K}]")
        if self.fusion_order not in ("taa-ttf", "ttf-taa"):
            raise ValueError(f"unknown fusion order {self.fusion_order!r}")

    @property
    def feature_dim(self) -> int:
        return Frequency.parse(self.frequency).feature_dim

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.use_taa, self.use_ttf):
                return name
        raise AssertionError

    def schedule(self) -> NoiseSchedule:
        return build_quadratic_schedule(self.K, self.beta_min, self.beta_max, self.fixed_variance)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


def variant_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    try:
        use_taa, use_ttf = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}") from None
    return cfg.replace(use_taa=use_taa, use_ttf=use_ttf)


@dataclass
class DenoiseOutput:
    y0: torch.Tensor  # (B, C, F) x0-estimate of the future
    x_hist_s: torch.Tensor  # (B, C, H) series-head history reconstruction
    x_hist_u: torch.Tensor | None  # (B, C, H) timestamp-head history reconstruction
    attention: list = field(default_factory=list)
    heads: tuple = ()  # per-head x0-estimates (series, timestamp) before blending


class MCDTSF(nn.Module):
    def __init__(self, cfg: ModelConfig, provider: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.series_embed = SeriesEmbedding(d, cfg.step_dim)
        self.ts_embed = TimestampEmbedding(cfg.feature_dim, d) if cfg.use_taa else None
        self.text = None
        d_text = cfg.d_text
        if cfg.use_ttf:
            if provider is None:
                if cfg.text_provider != "hash":
                    raise ValueError("a precomputed-embedding provider must be supplied")
                provider = HashTokenProvider(cfg.d_text, cfg.vocab, cfg.max_tokens)
            self.text = TextConditioner(provider)
            d_text = self.text.d_text
        self.fusion = FusionStack(cfg.depth, d, cfg.heads, d_text, cfg.use_taa, cfg.use_ttf,
                                  cfg.fusion_order)
        self.series_head = ConvHead(d)
        if cfg.use_taa:
            self.ts_head = ConvHead(d)
            self.blend = FusionWeights(cfg.history, cfg.horizon, cfg.normalize_weights)
        else:
            self.ts_head = self.blend = None
        self.register_buffer("trained_steps", torch.zeros((), dtype=torch.long))
        ab = torch.tensor(np.array(cfg.schedule().alpha_bars), dtype=torch.float32)
        self.register_buffer("_alpha_bars", ab, persistent=False)

    @property
    def text_key_field(self) -> str:
        if self.text is None:
            return "prompt"
        return "window_id" if isinstance(self.text.provider, PrecomputedProvider) else "prompt"

    def encode_text(self, keys, uncond=None):
        if self.text is None:
            return None
        return self.text(keys, uncond)

    def conditioning(self, keys):
        """``(cond, null)`` context pairs for guided sampling; ``cond is null``
        when every key is empty, both are None without a text branch."""
        if self.text is None:
            return None, None
        null = self.text([""] * len(keys))
        if all(not k for k in keys):
            return null, null
        return self.text(keys), null

    def forward(self, y_k, x, u, text_ctx, k, keep_attention: bool = False) -> DenoiseOutput:
        B, C, H = x.shape
        Fh = y_k.shape[-1]
        if H != self.cfg.history or Fh != self.cfg.horizon or y_k.shape[:2] != (B, C):
            raise ValueError(f"expected history {self.cfg.history} / horizon {self.cfg.horizon}, "
                             f"got x {tuple(x.shape)}, y_k {tuple(y_k.shape)}")
        if u.shape != (B, H + Fh, self.cfg.feature_dim):
            raise ValueError(f"timestamp features {tuple(u.shape)} do not match {(B, H + Fh, self.cfg.feature_dim)}")
        dtype = self.series_head.net[0].weight.dtype
        x, y_k = x.to(dtype), y_k.to(dtype)
        k = torch.as_tensor(k).reshape(-1).expand(B)

        # channels are independent sequences sharing timestamps and text
        values = torch.cat([x, y_k], dim=-1).reshape(B * C, H + Fh)
        mask = torch.cat([torch.ones(H, dtype=dtype), torch.zeros(Fh, dtype=dtype)]).expand(B * C, -1)
        s0 = self.series_embed(values, mask, k.repeat_interleave(C))
        u0 = None
        if self.ts_embed is not None:
            u0 = self.ts_embed(u.repeat_interleave(C, dim=0))
            if self.cfg.timestamp_position:
                # shared position code lets each series token find its own timestamp token
                u0 = u0 + self.series_embed.position(H + Fh)
        ctx = pad = None
        if text_ctx is not None and self.text is not None:
            ctx, pad = text_ctx
            ctx, pad = ctx.to(dtype).repeat_interleave(C, dim=0), pad.repeat_interleave(C, dim=0)
        state = self.fusion(s0, u0, ctx, pad, self.cfg.lam, keep_attention)

        x_s, y_s = self.series_head(layer_pool(state.series), H)
        x_u = None
        heads = [y_s]
        if self.ts_head is not None:
            x_u, y_u = self.ts_head(layer_pool(state.timestamps), H)
            W = self.blend(x_u, x.reshape(B * C, H))
            y0 = fuse_predictions(y_s, y_u, W)
            x_u = x_u.reshape(B, C, H)
            heads.append(y_u)
        else:
            y0 = y_s
        out = [y0] + heads
        if self.cfg.precondition:
            # skip connection: x0 = sqrt(ab) y_k + sqrt(1 - ab) net, exact copy as ab -> 1
            ab = self._alpha_bars.to(dtype)[k - 1].reshape(B, 1, 1)
            out = [ab.sqrt() * y_k + (1 - ab).sqrt() * o.reshape(B, C, Fh) for o in out]
        out = [o.reshape(B, C, Fh) for o in out]
        return DenoiseOutput(out[0], x_s.reshape(B, C, H), x_u, state.attention, tuple(out[1:]))


def text_provider_for(cfg: ModelConfig, embeddings=None) -> nn.Module | None:
    """The precomputed-embedding provider a config needs, or None when the
    model builds its own hash-token provider (or has no text branch)."""
    if not cfg.use_ttf or cfg.text_provider == "hash":
        return None
    if cfg.text_provider != "precomputed":
        raise ValueError(f"unknown text provider {cfg.text_provider!r}")
    if embeddings is None:
        raise ValueError("text_provider='precomputed' needs a text_embeddings file in the manifest")
    return PrecomputedProvider.from_file(embeddings, cfg.max_tokens)


def build_model(cfg: ModelConfig, seed: int = 0, provider: nn.Module | None = None) -> MCDTSF:
    torch.manual_seed(seed)
    return MCDTSF(cfg, provider)


def denoise_x0(model: MCDTSF, y_k, x, u, keys, k):
    """Single unguided pass; returns the future x0-estimate and the timestamp
    head's history reconstruction."""
    out = model(y_k, x, u, model.encode_text(keys), k)
    return out.y0, out.x_hist_u


def _cat_ctx(a, b):
    (ca, pa), (cb, pb) = a, b
    T = max(ca.shape[1], cb.shape[1])

    def pad_to(c, p):
        extra = T - c.shape[1]
        if extra:
            c = torch.cat([c, c.new_zeros(c.shape[0], extra, c.shape[2])], 1)
            p = torch.cat([p, torch.ones(p.shape[0], extra, dtype=torch.bool)], 1)
        return c, p

    ca, pa = pad_to(ca, pa)
    cb, pb = pad_to(cb, pb)
    return torch.cat([ca, cb]), torch.cat([pa, pb])


def guided(model: MCDTSF, y_k, x, u, k, w: float, cond, null):
    """Guided x0-estimate from precomputed ``cond`` / ``null`` contexts."""
    if cond is None:
        return model(y_k, x, u, None, k).y0
    if w == 0 or cond is null:
        return model(y_k, x, u, null, k).y0
    if w == 1:
        return model(y_k, x, u, cond, k).y0
    n = x.shape[0]
    k = torch.as_tensor(k).reshape(-1).expand(n)
    both = model(torch.cat([y_k, y_k]), torch.cat([x, x]), torch.cat([u, u]),
                 _cat_ctx(null, cond), torch.cat([k, k])).y0
    f_null, f_cond = both[:n], both[n:]
    return f_null + w * (f_cond - f_null)


def cfg_denoise(model: MCDTSF, y_k, x, u, keys, k, w: float):
    cond, null = model.conditioning(list(keys))
    return guided(model, y_k, x, u, k, w, cond, null)


def noisy_targets(schedule: NoiseSchedule, y, k, eps):
    """Vectorised forward corruption with per-row steps ``k``."""
    ab = torch.tensor(np.array(schedule.alpha_bars))[k - 1]
    ab = ab.reshape(-1, *([1] * (y.dim() - 1)))
    return (ab.sqrt().to(y.dtype) * y + (1 - ab).sqrt().to(y.dtype) * eps)


def training_loss(model: MCDTSF, batch: WindowBatch, schedule: NoiseSchedule,
                  generator: torch.Generator, p_uncond: float | None = None,
                  record: dict | None = None):
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    p = model.cfg.p_uncond if p_uncond is None else p_uncond
    dtype = model.series_head.net[0].weight.dtype
    y, x, u = batch.y.to(dtype), batch.x.to(dtype), batch.u.to(dtype)
    k = torch.randint(1, schedule.K + 1, (B,), generator=generator)
    eps = torch.randn(y.shape, generator=generator, dtype=torch.float64).to(dtype)
    uncond = torch.rand(B, generator=generator, dtype=torch.float64) < p
    y_k = noisy_targets(schedule, y, k, eps)
    ctx = model.encode_text(batch.text_keys(model.text_key_field), uncond)
    out = model(y_k, x, u, ctx, k)
    loss = ((out.y0 - y) ** 2).mean()
    if model.cfg.aux_history_weight:
        hist = [out.x_hist_s] + ([out.x_hist_u] if out.x_hist_u is not None else [])
        loss = loss + model.cfg.aux_history_weight * sum(((h - x) ** 2).mean() for h in hist)
    if model.cfg.head_loss_weight and len(out.heads) > 1:
        # keeps each head a forecaster on its own, not just their blend
        loss = loss + model.cfg.head_loss_weight * sum(((h - y) ** 2).mean() for h in out.heads)
    if record is not None:
        record.update(k=k, uncond=uncond, y_k=y_k)
    return loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 10
    val_every: int = 5
    grad_clip: float | None = 1.0
    seed: int = 0
    ema_decay: float = 0.0  # 0 disables weight averaging
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over the epoch budget

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    curve: list
    best_epoch: int
    best_val: float


def train(model: MCDTSF, train_set: WindowBatch, val_set: WindowBatch | None,
          tcfg: TrainConfig, schedule: NoiseSchedule | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the denoising loss with early stopping on validation forecast MSE.

    With ``ema_decay > 0`` validation and the returned weights use an
    exponential moving average of the parameters.
    """
    cfg = model.cfg
    schedule = schedule or cfg.schedule()
    gen = torch.Generator().manual_seed(tcfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, foreach=True)
    sched = None
    if tcfg.lr_schedule == "cosine":
        steps = tcfg.epochs * math.ceil(len(train_set) / tcfg.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    ema = None
    if tcfg.ema_decay > 0:
        ema = torch.optim.swa_utils.AveragedModel(
            model, multi_avg_fn=torch.optim.swa_utils.get_ema_multi_avg_fn(tcfg.ema_decay))
    n = len(train_set)
    curve, best, best_epoch, bad = [], math.inf, 0, 0
    best_state = None
    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            batch = train_set.subset(perm[start:start + tcfg.batch_size])
            loss = training_loss(model, batch, schedule, gen)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if tcfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            if ema is not None:
                ema.update_parameters(model)
            model.trained_steps += 1
            total += loss.item() * len(batch)
            seen += len(batch)
        row = {"epoch": epoch, "train_loss": total / seen}
        if tcfg.val_every > 0 and (epoch % tcfg.val_every == 0 or epoch == tcfg.epochs):
            raw = None
            if ema is not None:
                raw = copy.deepcopy(model.state_dict())
                with torch.no_grad():
                    for p, q in zip(model.parameters(), ema.module.parameters()):
                        p.copy_(q)
            if val_set is not None:
                score = validation_mse(model, val_set, schedule, seed=tcfg.seed)
                row["val_mse"] = score
            else:
                # nothing to select on: keep the latest weights
                score = -epoch
            if score < best:
                best, best_epoch, bad = score, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                bad += 1
            if raw is not None:
                model.load_state_dict(raw)
        curve.append(row)
        if callback:
            callback(row)
        log.debug("epoch %d %s", epoch, row)
        if bad >= tcfg.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(curve)
    if best_state is None and ema is not None:
        with torch.no_grad():
            for p, q in zip(model.parameters(), ema.module.parameters()):
                p.copy_(q)
    return TrainResult(curve, best_epoch, best if val_set is not None else math.nan)


def validation_mse(model: MCDTSF, val_set: WindowBatch, schedule: NoiseSchedule, seed: int = 0) -> float:
    cfg = model.cfg
    gen = torch.Generator().manual_seed(seed + 7919)
    samples = sample_forecast(model, val_set, schedule, generator=gen, steps=cfg.sample_steps,
                              eta=0.0, n_samples=1, w=cfg.w)
    return float(((samples[:, 0] - val_set.y.to(samples.dtype)) ** 2).mean())


class NonFiniteState(RuntimeError):
    pass


def sample_forecast(model: MCDTSF, batch: WindowBatch, schedule: NoiseSchedule | None = None, *,
                    generator: torch.Generator, steps: int | None = None, eta: float | None = None,
                    w: float | None = None, n_samples: int | None = None, chunk: int = 256,
                    denoiser: Callable | None = None, attention_sink: list | None = None):
    """Guided reverse diffusion over the quadratic step subsequence.

    Returns a ``(B, n_samples, C, F)`` tensor. ``denoiser`` replaces the
    guided network call (signature ``(y_k, k, rows) -> x0``) for testing.
    ``attention_sink`` collects the conditional branch's attention maps at
    the final step.
    """
    cfg = model.cfg
    schedule = schedule or cfg.schedule()
    steps = cfg.sample_steps if steps is None else steps
    eta = cfg.eta if eta is None else eta
    w = cfg.w if w is None else w
    n = cfg.n_samples if n_samples is None else n_samples
    if model.trained_steps.item() == 0 and denoiser is None:
        warnings.warn("sampling from an untrained model", RuntimeWarning, stacklevel=2)
    seq = quadratic_subsequence(schedule.K, steps)
    B, C = batch.x.shape[:2]
    dtype = model.series_head.net[0].weight.dtype
    # initial noise is drawn for every window up front so results do not depend on chunking
    y_all = torch.randn((B, n, C, cfg.horizon), generator=generator, dtype=torch.float64).to(dtype)
    outs = []
    model.eval()
    with torch.no_grad():
        for start in range(0, B, chunk):
            rows = torch.arange(start, min(B, start + chunk))
            sub = batch.subset(rows)
            x = sub.x.to(dtype).repeat_interleave(n, 0)
            u = sub.u.to(dtype).repeat_interleave(n, 0)
            keys = [key for key in sub.text_keys(model.text_key_field) for _ in range(n)]
            cond, null = (None, None) if denoiser else model.conditioning(keys)
            y = y_all[rows].reshape(-1, C, cfg.horizon)
            for i in range(len(seq) - 1, -1, -1):
                k, k_prev = seq[i], (seq[i - 1] if i else 0)
                kk = torch.full((y.shape[0],), k, dtype=torch.long)
                if denoiser is not None:
                    y0 = denoiser(y, k, rows.repeat_interleave(n))
                else:
                    y0 = guided(model, y, x, u, kk, w, cond, null)
                    if attention_sink is not None and k_prev == 0:
                        attention_sink.append(model(y, x, u, cond, kk, keep_attention=True).attention)
                if not torch.isfinite(y0).all():
                    raise NonFiniteState(f"non-finite denoiser output at step {k}")
                eps = None
                if ddim_sigma(schedule, k, k_prev, eta) > 0:
                    eps = torch.randn(y.shape, generator=generator, dtype=torch.float64).to(dtype)
                y = ddim_step(schedule, y, y0, k, k_prev, eta, eps)
            outs.append(y.reshape(len(rows), n, C, cfg.horizon))
    return torch.cat(outs)


def point_forecast(samples: torch.Tensor) -> torch.Tensor:
    """Median across the sample axis of a ``(B, n, C, F)`` tensor."""
    if samples.shape[1] == 1:
        return samples[:, 0]
    return samples.quantile(0.5, dim=1)


def save_checkpoint(path, model: MCDTSF, stats: NormStats | None = None, extra: dict | None = None) -> None:
    params = {}
    shapes = {}
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        params[f"param/{name}"] = arr
        shapes[name] = {"shape": list(arr.shape), "dtype": arr.dtype.str}
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": model.cfg.to_json(), "norm": stats.to_json() if stats else None,
            "params": shapes, "extra": extra or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **params)


def load_checkpoint(path, provider: nn.Module | None = None):
    """Returns ``(model, stats, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a model checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {name: torch.from_numpy(z[f"param/{name}"].copy()) for name in meta["params"]}
    cfg = ModelConfig.from_json(meta["config"])
    model = MCDTSF(cfg, provider)
    model.load_state_dict(state)
    stats = NormStats.from_json(meta["norm"]) if meta.get("norm") else None
    return model, stats, meta

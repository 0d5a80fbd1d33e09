import math

import numpy as np
import pytest
import torch

from conftest import tiny_batch
from mcdtsf.data import Manifest, prepare
from mcdtsf.denoiser import (VARIANTS, DenoiseOutput, ModelConfig, NonFiniteState, TrainConfig,
                             TrainingDiverged, build_model, cfg_denoise, denoise_x0,
                             load_checkpoint, point_forecast, sample_forecast, save_checkpoint,
                             train, training_loss, variant_config)
from mcdtsf.featenc import temporal_embedding
from mcdtsf.synth import SynthConfig, write_dataset

TINY = ModelConfig(history=4, horizon=2, d=4, heads=2, depth=1, K=4, sample_steps=4,
                   d_text=4, vocab=64, max_tokens=32)


def tiny_model(cfg=TINY, seed=0, dtype=torch.float64):
    return build_model(cfg, seed).to(dtype)


# ------------------------------------------------------------ forward pass

def _layer_norm(x, p, name):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * p[name + ".weight"] + p[name + ".bias"]


def _linear(x, p, name):
    return x @ p[name + ".weight"].T + p[name + ".bias"]


def _silu(x):
    return x / (1 + np.exp(-x))


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _attention(q_in, kv_in, p, name, heads, pad=None):
    q, k, v = (_linear(a, p, f"{name}.{n}") for a, n in ((q_in, "q"), (kv_in, "k"), (kv_in, "v")))
    dh = q.shape[-1] // heads
    out = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        if pad is not None:
            logits = np.where(pad[None, :], -np.inf, logits)
        out.append(_softmax(logits) @ v[:, sl])
    return _linear(np.concatenate(out, -1), p, f"{name}.o")


def reference_forward(p, cfg, y_k, x, u, ctx, pad, k):
    """Straight-line numpy recomputation of one window, one channel."""
    H, F = cfg.history, cfg.horizon
    n = H + F
    values = np.r_[x, y_k]
    mask = np.r_[np.ones(H), np.zeros(F)]
    pos = _linear(np.stack([temporal_embedding(i) for i in range(n)]), p, "series_embed.pos_proj")
    step = temporal_embedding(k, cfg.step_dim)
    step = _linear(_silu(_linear(step, p, "series_embed.step_proj.0")), p, "series_embed.step_proj.2")
    s = _linear(np.stack([values, mask], -1), p, "series_embed.value_proj") + pos + step
    t = _linear(u, p, "ts_embed.proj") + pos
    pre = "fusion.layers.0"
    joint = np.concatenate([_layer_norm(s, p, f"{pre}.taa.norm_s"),
                            cfg.lam * _layer_norm(t, p, f"{pre}.taa.norm_u")])
    out = _attention(joint, joint, p, f"{pre}.taa.attn", cfg.heads)
    s, t = s + out[:n], t + out[n:]
    s = s + _attention(_layer_norm(s, p, f"{pre}.ttf.norm"), ctx, p, f"{pre}.ttf.attn", cfg.heads, pad)

    def ffn(z):
        h = _gelu(_linear(_layer_norm(z, p, f"{pre}.ffn_norm"), p, f"{pre}.ffn.net.0"))
        return z + _linear(h, p, f"{pre}.ffn.net.2")

    s, t = ffn(s), ffn(t)

    def head(z, name):
        return _linear(_silu(_linear(z, p, f"{name}.net.0")), p, f"{name}.net.2")[:, 0]

    out_s, out_u = head(s, "series_head"), head(t, "ts_head")
    logits = _linear(out_u[:H] - x, p, "blend.net.0")
    W = _softmax(_linear(_silu(logits), p, "blend.net.2").reshape(F, 2))
    y0 = W[:, 0] * out_s[H:] + W[:, 1] * out_u[H:]
    ab = np.prod(1 - np.asarray(cfg.schedule().betas)[:k])
    return math.sqrt(ab) * y_k + math.sqrt(1 - ab) * y0, out_u[:H]


def test_forward_matches_straight_line_reference():
    model = tiny_model()
    with torch.no_grad():
        gen = torch.Generator().manual_seed(11)
        for prm in model.parameters():  # hand-set, well away from the default init
            prm.copy_(torch.randn(prm.shape, generator=gen, dtype=torch.float64) * 0.7)
    p = {k: v.numpy() for k, v in model.state_dict().items()}
    batch = tiny_batch(n_windows=3)
    y_k = torch.randn(3, 1, 2, dtype=torch.float64, generator=gen)
    k = torch.tensor([1, 3, 4])
    with torch.no_grad():
        ctx, pad = model.encode_text(batch.prompts)
        out = model(y_k, batch.x.double(), batch.u.double(), (ctx, pad), k)
    for b in range(3):
        y0, x_u = reference_forward(p, TINY, y_k[b, 0].numpy(), batch.x[b, 0].double().numpy(),
                                    batch.u[b].double().numpy(), ctx[b].numpy(), pad[b].numpy(),
                                    int(k[b]))
        np.testing.assert_allclose(out.y0[b, 0].numpy(), y0, atol=1e-5)
        np.testing.assert_allclose(out.x_hist_u[b, 0].numpy(), x_u, atol=1e-5)


def test_output_shapes_and_determinism():
    model = tiny_model()
    batch = tiny_batch()
    y_k = torch.randn(len(batch), 1, 2, dtype=torch.float64)
    for k in range(1, TINY.K + 1):
        a = denoise_x0(model, y_k, batch.x, batch.u, batch.prompts, k)
        b = denoise_x0(model, y_k, batch.x, batch.u, batch.prompts, k)
        assert a[0].shape == (len(batch), 1, 2) and a[1].shape == (len(batch), 1, 4)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_shape_mismatch_is_rejected():
    model = tiny_model()
    batch = tiny_batch()
    with pytest.raises(ValueError):
        model(torch.zeros(len(batch), 1, 3), batch.x, batch.u, None, 1)
    with pytest.raises(ValueError):
        model(torch.zeros(len(batch), 1, 2), batch.x, batch.u[:, :-1], None, 1)


# ------------------------------------------------------------ guidance

def test_guidance_algebra():
    model = tiny_model().eval()
    batch = tiny_batch()
    y_k = torch.randn(len(batch), 1, 2, dtype=torch.float64)
    x, u, keys = batch.x.double(), batch.u.double(), batch.prompts
    with torch.no_grad():
        cond, null = model.conditioning(keys)
        f_c, f_n = model(y_k, x, u, cond, 2).y0, model(y_k, x, u, null, 2).y0
        assert torch.equal(cfg_denoise(model, y_k, x, u, keys, 2, 1.0), f_c)
        assert torch.equal(cfg_denoise(model, y_k, x, u, keys, 2, 0.0), f_n)
        for w in (0.3, 0.8, 2.0):
            got = cfg_denoise(model, y_k, x, u, keys, 2, w)
            torch.testing.assert_close(got - f_n, w * (f_c - f_n), atol=1e-6, rtol=0)
        # no text at all: both branches coincide
        blank = [""] * len(batch)
        torch.testing.assert_close(cfg_denoise(model, y_k, x, u, blank, 2, 2.0),
                                   cfg_denoise(model, y_k, x, u, blank, 2, 0.0), atol=0, rtol=0)


# ------------------------------------------------------------ training objective

def _stub(model, fn):
    model.forward = lambda y_k, x, u, ctx, k, keep_attention=False: DenoiseOutput(fn(y_k), x, None)


def test_loss_with_oracle_and_zero_stubs():
    batch = tiny_batch()
    schedule = TINY.schedule()
    model = tiny_model(dtype=torch.float32)
    _stub(model, lambda y_k: batch.y)
    assert training_loss(model, batch, schedule, torch.Generator().manual_seed(0)).item() == 0.0
    _stub(model, torch.zeros_like)
    loss = training_loss(model, batch, schedule, torch.Generator().manual_seed(0))
    assert loss.item() == pytest.approx(float((batch.y ** 2).mean()), rel=1e-6)


def test_empty_batch_is_rejected():
    model = tiny_model()
    with pytest.raises(ValueError):
        training_loss(model, tiny_batch().subset([]), TINY.schedule(), torch.Generator())


def test_masking_rate_and_independence():
    batch = tiny_batch(n_windows=50)
    model = tiny_model()
    calls = []
    original = model.text.provider.batch
    model.text.provider.batch = lambda keys: calls.append(len(keys)) or original(keys)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        rec = {}
        training_loss(model, batch, TINY.schedule(), gen, p_uncond=1.0, record=rec)
        assert rec["uncond"].all() and calls == []
        training_loss(model, batch, TINY.schedule(), gen, p_uncond=0.0, record=rec)
        assert not rec["uncond"].any() and calls == [len(batch)]
        masked = 0
        for _ in range(200):
            training_loss(model, batch, TINY.schedule(), gen, record=rec)
            masked += int(rec["uncond"].sum())
    assert masked / 10_000 == pytest.approx(0.1, abs=0.01)


def test_step_draws_cover_the_schedule():
    batch = tiny_batch(n_windows=50)
    model = tiny_model()
    rec, seen = {}, set()
    with torch.no_grad():
        for i in range(5):
            training_loss(model, batch, TINY.schedule(), torch.Generator().manual_seed(i), record=rec)
            seen |= set(rec["k"].tolist())
    assert seen == {1, 2, 3, 4}


def test_gradient_matches_finite_differences():
    batch = tiny_batch()
    cfg = TINY.replace(p_uncond=0.5)
    model = tiny_model(cfg)
    schedule = cfg.schedule()

    def loss():
        return training_loss(model, batch, schedule, torch.Generator().manual_seed(5))

    loss().backward()
    rng = np.random.default_rng(1)
    params = [p for p in model.parameters() if p.grad is not None and p.grad.abs().max() > 0]
    with torch.no_grad():
        for _ in range(20):
            p = params[rng.integers(len(params))]
            j = int(rng.integers(p.numel()))
            orig = float(p.view(-1)[j])
            p.view(-1)[j] = orig + 1e-6
            up = float(loss())
            p.view(-1)[j] = orig - 1e-6
            down = float(loss())
            p.view(-1)[j] = orig
            fd, an = (up - down) / 2e-6, float(p.grad.view(-1)[j])
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)


# ------------------------------------------------------------ training loop

FAST = TrainConfig(epochs=3, batch_size=4, val_every=1, patience=10)


def test_training_is_deterministic():
    batch = tiny_batch(n_windows=12)
    a, b = tiny_model(dtype=torch.float32), tiny_model(dtype=torch.float32)
    ra = train(a, batch, batch, FAST)
    rb = train(b, batch, batch, FAST)
    assert ra.curve == rb.curve
    for (n, p), q in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(p, q), n


def test_zero_learning_rate_leaves_parameters():
    batch = tiny_batch(n_windows=12)
    model = tiny_model(dtype=torch.float32)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, batch, None, TrainConfig(epochs=2, batch_size=4, lr=0.0, val_every=0))
    for k, v in model.state_dict().items():
        if k != "trained_steps":
            assert torch.equal(v, before[k]), k


def test_divergence_guard():
    batch = tiny_batch(n_windows=8)
    batch.y[0, 0, 0] = float("inf")
    with pytest.raises(TrainingDiverged):
        train(tiny_model(dtype=torch.float32), batch, None, FAST)


def test_early_stopping_restores_best():
    batch = tiny_batch(n_windows=12)
    model = tiny_model(dtype=torch.float32)
    res = train(model, batch, batch, TrainConfig(epochs=30, batch_size=4, val_every=1, patience=2))
    assert len(res.curve) <= 30
    vals = [r["val_mse"] for r in res.curve]
    assert res.best_val == min(vals) and vals[res.best_epoch - 1] == res.best_val


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d=6, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(K=10, sample_steps=20)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(ValueError):
        variant_config(TINY, "DIFF+XYZ")


@pytest.fixture(scope="module")
def synth_data(tmp_path_factory):
    path = write_dataset(SynthConfig(length=400, seed=0), tmp_path_factory.mktemp("synth"))
    return prepare(Manifest.load(path), horizon=6)


@pytest.fixture(scope="module")
def trained(synth_data):
    cfg = ModelConfig(depth=1, d=16, heads=2, K=50, sample_steps=25, max_tokens=64)
    model = build_model(cfg, 0)
    res = train(model, synth_data.train, None, TrainConfig(epochs=15, batch_size=16, val_every=0))
    return model, res


def test_training_loss_halves_on_synth(trained):
    _, res = trained
    losses = [r["train_loss"] for r in res.curve]
    assert losses[-1] <= 0.5 * losses[0]


# ------------------------------------------------------------ sampling

def test_perfect_oracle_stub_recovers_target():
    batch = tiny_batch()
    model = tiny_model(dtype=torch.float32)
    for seed in (0, 1):
        for eta in (0.0, 1.0):
            out = sample_forecast(model, batch, generator=torch.Generator().manual_seed(seed),
                                  eta=eta, n_samples=3, denoiser=lambda y, k, rows: batch.y[rows])
            assert out.shape == (len(batch), 3, 1, 2)
            assert torch.equal(out, batch.y[:, None].expand_as(out))


def test_nonfinite_state_aborts():
    batch = tiny_batch()
    model = tiny_model(dtype=torch.float32)
    with pytest.raises(NonFiniteState):
        sample_forecast(model, batch, generator=torch.Generator(),
                        denoiser=lambda y, k, rows: torch.full_like(y, float("nan")))


def test_untrained_model_warns():
    with pytest.warns(RuntimeWarning, match="untrained"):
        sample_forecast(tiny_model(dtype=torch.float32), tiny_batch(), generator=torch.Generator())


def test_deterministic_sampling_and_chunking(trained, synth_data):
    model, _ = trained
    batch = synth_data.test
    run = lambda chunk: sample_forecast(model, batch, generator=torch.Generator().manual_seed(3),
                                        eta=0.0, n_samples=2, chunk=chunk)
    a, b, c = run(256), run(256), run(7)
    assert torch.equal(a, b)
    torch.testing.assert_close(a, c, atol=1e-5, rtol=0)
    assert torch.isfinite(a).all()
    assert point_forecast(a).shape == (len(batch), 1, 6)


def _spread(model, batch, S, eta=0.0):
    samples = sample_forecast(model, batch, generator=torch.Generator().manual_seed(0), steps=S,
                              eta=eta, n_samples=8)
    assert torch.isfinite(samples).all()
    return float(samples.std(1).mean())


@pytest.mark.xfail(strict=True, reason="measured: coarse step grids pull samples toward the "
                                       "conditional mean, so spread grows with S")
def test_spread_shrinks_with_more_steps(trained, synth_data):
    model, _ = trained
    assert _spread(model, synth_data.test, 50) < _spread(model, synth_data.test, 5)


def test_coarse_grids_collapse_toward_the_mean(trained, synth_data):
    model, _ = trained
    spreads = [_spread(model, synth_data.test, S) for S in (5, 10, 50)]
    assert spreads == sorted(spreads) and spreads[0] > 0


# ------------------------------------------------------------ checkpoints and variants

def test_checkpoint_round_trip(tmp_path, trained, synth_data):
    model, _ = trained
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, synth_data.stats, {"note": 1})
    loaded, stats, meta = load_checkpoint(path)
    assert meta["version"] == 1 and meta["extra"] == {"note": 1}
    assert loaded.cfg == model.cfg
    np.testing.assert_array_equal(stats.mean, synth_data.stats.mean)
    for (n, p), q in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(p, q), n
    gen = lambda: torch.Generator().manual_seed(0)
    batch = synth_data.test.subset(range(20))
    assert torch.equal(sample_forecast(model, batch, generator=gen()),
                       sample_forecast(loaded, batch, generator=gen()))


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, __meta__=np.array('{"format": "something-else"}'))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_variant_parameter_containment():
    names = {}
    for v in VARIANTS:
        m = build_model(variant_config(TINY, v), 0)
        names[v] = {n: tuple(p.shape) for n, p in m.named_parameters()}
    full = names["MCD-TSF"]
    for v in ("DIFF", "DIFF+TAA", "DIFF+TTF"):
        assert names[v].items() < full.items(), v
    assert names["DIFF"].items() < names["DIFF+TAA"].items()
    assert names["DIFF"].items() < names["DIFF+TTF"].items()


def test_parameter_count_is_a_function_of_config():
    counts = {sum(p.numel() for p in build_model(TINY, s).parameters()) for s in range(3)}
    assert len(counts) == 1

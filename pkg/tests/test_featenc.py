import datetime as dt
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcdtsf.featenc import (
    Frequency,
    SeriesEmbedding,
    encode_timestamp,
    encode_timestamps,
    temporal_embedding,
)


def test_feature_dims():
    assert Frequency.MONTHLY.feature_dim == 1
    assert Frequency.WEEKLY.feature_dim == 2
    assert Frequency.DAILY.feature_dim == 3


def test_monthly_bounds():
    assert encode_timestamp("2020-01-15", "monthly").tolist() == [-0.5]
    assert encode_timestamp("2020-12-01", "monthly").tolist() == [0.5]


def test_weekly_first_day_of_first_week():
    # 2018-01-01 is a Monday in ISO week 1
    assert dt.date(2018, 1, 1).isocalendar()[1] == 1
    assert encode_timestamp("2018-01-01", "weekly").tolist() == [-0.5, -0.5]


def _find_dates(weekday, day_of_month, day_of_year, years=range(1970, 2101)):
    hits = []
    for y in years:
        d = dt.date(y, 1, 1) + dt.timedelta(days=day_of_year - 1)
        if d.year == y and d.weekday() == weekday and d.day == day_of_month:
            hits.append(d)
    return hits


def test_reference_daily_vector():
    # brute-force calendar search for weekday 4 (Mon = 0), day 25, day-of-year 176
    dates = _find_dates(4, 25, 176)
    assert dates, "no calendar date with the reference indices"
    for d in dates:
        np.testing.assert_allclose(encode_timestamp(d, "daily"), [0.166, 0.3, -0.02], atol=5e-3)


def test_leap_day_clamped():
    v = encode_timestamp("2020-12-31", "daily")
    assert v[2] == 0.5


@settings(max_examples=300, deadline=None)
@given(st.dates(dt.date(1970, 1, 1), dt.date(2100, 12, 31)), st.sampled_from(list(Frequency)))
def test_features_in_range(d, freq):
    v = encode_timestamp(d, freq)
    assert v.shape == (freq.feature_dim,)
    assert np.all(v >= -0.5) and np.all(v <= 0.5)
    np.testing.assert_array_equal(v, encode_timestamp(d.isoformat(), freq))


def test_features_in_range_bulk():
    rng = np.random.default_rng(0)
    start = dt.date(1970, 1, 1).toordinal()
    span = dt.date(2100, 12, 31).toordinal() - start
    days = [dt.date.fromordinal(start + int(o)) for o in rng.integers(0, span + 1, 10_000)]
    for freq in Frequency:
        m = encode_timestamps(days, freq)
        assert m.shape == (10_000, freq.feature_dim)
        assert m.min() >= -0.5 and m.max() <= 0.5


def test_invalid_date():
    with pytest.raises(ValueError):
        encode_timestamp("2021-02-30", "daily")


def test_frequency_step_and_index():
    f = Frequency.MONTHLY
    assert f.step(dt.date(2020, 1, 31), 1) == dt.date(2020, 2, 29)
    assert f.index(dt.date(2020, 3, 1)) - f.index(dt.date(2019, 12, 1)) == 3
    assert Frequency.WEEKLY.step(dt.date(2020, 1, 6), 2) == dt.date(2020, 1, 20)
    assert Frequency.parse("M") is Frequency.MONTHLY
    with pytest.raises(ValueError):
        Frequency.parse("hourly")


def test_embedding_zero():
    e = temporal_embedding(0)
    assert e.shape == (128,)
    np.testing.assert_array_equal(e[:64], np.zeros(64))
    np.testing.assert_array_equal(e[64:], np.ones(64))


def test_embedding_one():
    e = temporal_embedding(1)
    assert e[0] == pytest.approx(0.841471, abs=1e-6)
    assert e[64] == pytest.approx(0.540302, abs=1e-6)
    # direct evaluation of an interior entry
    assert e[10] == pytest.approx(math.sin(1 / 10000 ** (10 / 64)), rel=1e-12)


def test_embedding_tensor_matches_scalar():
    t = temporal_embedding(torch.arange(5))
    for m in range(5):
        np.testing.assert_allclose(t[m].numpy(), temporal_embedding(m), rtol=1e-12)


def test_embedding_range_and_injective():
    table = np.stack([temporal_embedding(m) for m in range(1024)])
    assert np.abs(table).max() <= 1.0
    assert len({row.tobytes() for row in table}) == 1024


def test_embedding_odd_dim():
    with pytest.raises(ValueError):
        temporal_embedding(3, dim=7)


def test_series_embedding_shape():
    emb = SeriesEmbedding(d=8)
    out = emb(torch.randn(3, 10), torch.ones(3, 10), torch.tensor([1, 2, 3]))
    assert out.shape == (3, 10, 8)
    with pytest.raises(ValueError):
        emb(torch.randn(3, 10), torch.ones(3, 9), torch.tensor([1, 2, 3]))


def test_series_embedding_zero_value_weights():
    emb = SeriesEmbedding(d=4)
    with torch.no_grad():
        emb.value_proj.weight.zero_()
        emb.value_proj.bias.zero_()
    k = torch.tensor([7])
    out = emb(torch.randn(1, 5), torch.ones(1, 5), k)
    pos = emb.pos_proj(temporal_embedding(torch.arange(5)).float())
    step = emb.step_proj(temporal_embedding(k).float())
    torch.testing.assert_close(out[0], pos + step)


def test_series_embedding_by_hand():
    # one position, d = 2, projections of position and step zeroed
    emb = SeriesEmbedding(d=2)
    with torch.no_grad():
        emb.value_proj.weight.copy_(torch.tensor([[1.0, 2.0], [-1.0, 0.5]]))
        emb.value_proj.bias.copy_(torch.tensor([0.1, -0.2]))
        for p in list(emb.pos_proj.parameters()) + list(emb.step_proj.parameters()):
            p.zero_()
    out = emb(torch.tensor([[3.0]]), torch.tensor([[1.0]]), torch.tensor([4]))
    # [3*1 + 1*2 + 0.1, 3*-1 + 1*0.5 - 0.2]
    torch.testing.assert_close(out[0, 0], torch.tensor([5.1, -2.7]))

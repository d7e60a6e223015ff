import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import flat_day
from diffcarl.profiles import (
    CSV_COLUMNS,
    ProfileParseError,
    ProfileSchemaError,
    ProfileValidationError,
    TimeSeriesProfile,
    from_frame,
    load_csv,
    nominal_profile,
    preprocess,
    split_train_test,
    synthesize,
    write_csv,
)


def _write(path, rows, header=CSV_COLUMNS):
    lines = [",".join(header)]
    lines += [",".join(str(c) for c in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _rows(n=24, load=100.0):
    t0 = np.datetime64("2024-03-01T00", "h")
    return [[str(t0 + i), 1.0, 2.0, load, 0.1] for i in range(n)]


def test_load_minimal_file(tmp_path):
    f = tmp_path / "p.csv"
    _write(f, _rows())
    p = load_csv(f)
    assert len(p) == 24
    assert p.load_kw[0] == 100.0 and p.price[5] == 0.1


def test_missing_lmp_column_is_named(tmp_path):
    f = tmp_path / "p.csv"
    _write(f, [r[:4] for r in _rows()], header=CSV_COLUMNS[:4])
    with pytest.raises(ProfileSchemaError, match="lmp"):
        load_csv(f)


def test_negative_load_cites_row(tmp_path):
    rows = _rows()
    rows[7][3] = -5.0
    f = tmp_path / "p.csv"
    _write(f, rows)
    with pytest.raises(ProfileValidationError, match="row 7"):
        load_csv(f)


def test_non_numeric_cell_cites_row(tmp_path):
    rows = _rows()
    rows[3][1] = "abc"
    f = tmp_path / "p.csv"
    _write(f, rows)
    with pytest.raises(ProfileParseError, match="row 3"):
        load_csv(f)


def test_broken_spacing_rejected(tmp_path):
    rows = _rows(25)
    del rows[10]
    f = tmp_path / "p.csv"
    _write(f, rows)
    with pytest.raises(ProfileValidationError, match="hourly"):
        load_csv(f)


def test_short_profile_rejected():
    with pytest.raises(ProfileValidationError):
        flat_day(hours=23)


def test_csv_round_trip(tmp_path):
    p = synthesize(nominal_profile(n_days=2), 0.2, seed=3)
    write_csv(p, tmp_path / "a.csv")
    q = load_csv(tmp_path / "a.csv")
    assert q == p
    write_csv(q, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_from_frame_matches_to_frame():
    p = nominal_profile(n_days=1)
    assert from_frame(p.to_frame()) == p
    assert from_frame(p.to_frame().set_index("timestamp")) == p
    with pytest.raises(ProfileSchemaError, match="lmp"):
        from_frame(p.to_frame().drop(columns="lmp"))


def _with_load(values):
    n = len(values)
    ts = np.datetime64("2024-01-01", "h") + np.arange(max(n, 24))
    pad = np.full(max(n, 24) - n, values[-1])
    load = np.concatenate([values, pad])
    z = np.zeros_like(load)
    return TimeSeriesProfile(ts, z, z, load, z)


def test_constant_series_unchanged():
    p = flat_day(load=50.0, price=0.1, pv=10.0)
    assert preprocess(p) == p
    assert preprocess(p, z_threshold=0.5, window=3) == p


def test_spike_replaced_by_median():
    p = _with_load(np.array([50.0, 50.0, 500.0, 50.0, 50.0]))
    out = preprocess(p, z_threshold=3.0, window=3)
    np.testing.assert_allclose(out.load_kw, 50.0)


def test_bad_window_and_threshold():
    p = flat_day(load=1.0)
    with pytest.raises(ValueError):
        preprocess(p, window=2)
    with pytest.raises(ValueError):
        preprocess(p, window=4)
    with pytest.raises(ValueError):
        preprocess(p, z_threshold=0.0)


def test_preprocess_keeps_shape_and_sign():
    p = synthesize(nominal_profile(n_days=3), 0.5, seed=1)
    out = preprocess(p)
    assert len(out) == len(p)
    assert np.array_equal(out.timestamps, p.timestamps)
    assert min(out.pv_kw.min(), out.wt_kw.min(), out.load_kw.min()) >= 0


def test_preprocess_identity_on_clean_ramp():
    # Partial windows shift the two end points; the interior of a ramp is a fixed point.
    ts = np.datetime64("2024-01-01", "h") + np.arange(24)
    ramp = 100.0 + 10.0 * np.arange(24)
    p = TimeSeriesProfile(ts, ramp, ramp, ramp, ramp / 1000)
    once = preprocess(p)
    np.testing.assert_allclose(once.load_kw[1:-1], ramp[1:-1], rtol=1e-12)
    twice = preprocess(once)
    np.testing.assert_allclose(twice.load_kw[2:-2], once.load_kw[2:-2], rtol=1e-12)


def test_split_31_day_month():
    train, test = split_train_test(nominal_profile("2024-01-01", 31))
    assert len(train) == 21 * 24 and len(test) == 7 * 24
    assert str(train.timestamps[0]) == "2024-01-01T00"
    assert str(test.timestamps[0]) == "2024-01-22T00"
    assert str(test.timestamps[-1]) == "2024-01-28T23"
    assert not set(train.timestamps.tolist()) & set(test.timestamps.tolist())


def test_split_28_day_month():
    train, test = split_train_test(nominal_profile("2023-02-01", 28))
    assert (len(train), len(test)) == (504, 168)


def test_split_two_months():
    train, test = split_train_test(nominal_profile("2024-01-01", 60))
    assert len(train) == 42 * 24 and len(test) == 14 * 24


def test_split_too_short():
    with pytest.raises(ValueError):
        split_train_test(nominal_profile("2024-01-01", 20))


def test_synthesize_zero_noise_identity():
    p = nominal_profile(n_days=2)
    assert synthesize(p, 0.0, seed=9) == p


def test_synthesize_deterministic():
    p = nominal_profile(n_days=2)
    assert synthesize(p, 0.2, seed=4) == synthesize(p, 0.2, seed=4)
    assert not synthesize(p, 0.2, seed=4) == synthesize(p, 0.2, seed=5)


def test_synthesize_noise_level():
    n = 100_000
    ts = np.datetime64("2000-01-01", "h") + np.arange(n)
    c = np.full(n, 100.0)
    out = synthesize(TimeSeriesProfile(ts, c, c, c, c), 0.2, seed=0)
    for series in (out.pv_kw, out.load_kw):
        assert abs(series.std() - 20.0) <= 0.02 * 20.0


def test_synthesize_bad_noise():
    with pytest.raises(ValueError):
        synthesize(nominal_profile(n_days=1), 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), noise=st.floats(0.0, 0.99))
def test_synthesize_non_negative(seed, noise):
    out = synthesize(nominal_profile(n_days=1), noise, seed)
    for name in ("pv_kw", "wt_kw", "load_kw", "price"):
        assert getattr(out, name).min() >= 0

import httpx
import numpy as np
import pytest

from grid import FieldSeries, GridSpec
from trend import (
    ForcingTrajectory,
    TrendParams,
    detrend,
    eval_mean_trend,
    fit_trend,
    harmonic_design,
    lag_table,
    load_forcing,
    load_trend,
    mean_trend_field,
    mean_trend_stack,
    retrend,
    save_trend,
    year_index,
)

SPEC = GridSpec(3, 4, 2)


def _random_walk_forcing(start_year: int, end_year: int, seed: int = 0) -> ForcingTrajectory:
    steps = np.random.default_rng(seed).normal(0.05, 0.3, size=end_year - start_year + 1)
    return ForcingTrajectory(values=np.cumsum(steps), start_year=start_year)


def _series(params, forcing, T, *, noise=0.0, R=1, seed=0):
    trend = mean_trend_stack(params, forcing, np.arange(1, T + 1))
    rng = np.random.default_rng(seed)
    values = trend[None] + noise * rng.normal(size=(R, T, *params.spec.shape))
    return FieldSeries(params.spec, values)


def test_year_index_and_harmonics():
    np.testing.assert_array_equal(year_index(np.array([1, 12, 13, 24, 25]), 12), [1, 1, 2, 2, 3])
    design = harmonic_design(np.array([3]), 2, 12)
    np.testing.assert_allclose(design, [[0.0, -1.0, 1.0, 0.0]], atol=1e-15)


def test_constant_trend():
    params = TrendParams.constant(SPEC, beta0=5.0)
    for t in (1, 7, 1000):
        assert eval_mean_trend(params, None, t, (1, 2)) == 5.0


def test_pure_harmonic_trend():
    params = TrendParams.constant(SPEC, K=1, tau=12, a=[1.0])
    for t in range(1, 30):
        assert eval_mean_trend(params, None, t, (0, 0)) == pytest.approx(np.cos(2 * np.pi * t / 12))
        assert eval_mean_trend(params, None, t, (0, 0)) == pytest.approx(
            eval_mean_trend(params, None, t + 12, (0, 0))
        )


def test_lag_with_zero_rho_uses_previous_year_only():
    forcing = ForcingTrajectory(values=np.full(11, 2.0), start_year=0)
    params = TrendParams.constant(SPEC, K=0, tau=12, beta2=1.0, rho=0.0)
    assert eval_mean_trend(params, forcing, 13, (0, 0)) == 2.0
    np.testing.assert_allclose(mean_trend_field(params, forcing, 13), 2.0)


def test_vectorised_trend_matches_scalar_evaluation():
    forcing = _random_walk_forcing(-200, 20)
    params = TrendParams.constant(
        SPEC, K=2, tau=12, beta0=1.0, beta1=0.5, beta2=1.2, rho=0.6, a=[0.3, -0.1], b=[0.2]
    )
    for t in (1, 5, 12, 13, 150):
        field = mean_trend_field(params, forcing, t)
        assert field[1, 1] == pytest.approx(eval_mean_trend(params, forcing, t, (1, 1)), abs=1e-10)


def test_lag_table_matches_direct_truncated_sum():
    forcing = _random_walk_forcing(-50, 10, seed=3)
    rho = np.array([0.0, 0.3, 0.9, 1.0])
    table = lag_table(forcing, 1, 10, rho)
    for row, year in enumerate(range(1, 11)):
        for col, r in enumerate(rho):
            total, s = 0.0, 1
            while year - s >= forcing.start_year and r ** (s - 1) >= 1e-12:
                total += r ** (s - 1) * forcing.values[year - s - forcing.start_year]
                s += 1
            assert table[row, col] == pytest.approx((1 - r) * total, abs=1e-11)


def test_missing_history_is_an_error():
    forcing = ForcingTrajectory(values=np.ones(5), start_year=1)
    params = TrendParams.constant(SPEC, tau=12, beta2=1.0, rho=0.5)
    with pytest.raises(ValueError, match="强迫历史"):
        mean_trend_field(params, forcing, 1)
    with pytest.raises(ValueError, match="强迫历史"):
        eval_mean_trend(params, forcing, 1, (0, 0))
    with pytest.raises(ValueError):
        mean_trend_field(params, None, 30)


def test_params_validation():
    with pytest.raises(ValueError):
        TrendParams.constant(SPEC, rho=1.5)
    with pytest.raises(ValueError):
        TrendParams.constant(SPEC, sigma=0.0)


def test_zero_noise_recovery_without_forcing():
    truth = TrendParams.constant(SPEC, K=1, tau=12, beta0=2.0, a=[0.5], b=[-0.3])
    fitted = fit_trend(_series(truth, None, 240), None, K=1, tau=12)
    np.testing.assert_allclose(fitted.beta0, 2.0, atol=1e-8)
    np.testing.assert_allclose(fitted.a[0], 0.5, atol=1e-8)
    np.testing.assert_allclose(fitted.b[0], -0.3, atol=1e-8)
    np.testing.assert_array_equal(fitted.beta1, 0.0)


def test_zero_noise_recovery_with_forcing():
    forcing = _random_walk_forcing(-100, 60, seed=1)
    truth = TrendParams.constant(
        SPEC, K=1, tau=12, beta0=1.0, beta1=0.4, beta2=0.8, rho=0.5, a=[0.2], b=[0.1]
    )
    fitted = fit_trend(_series(truth, forcing, 600), forcing, K=1, tau=12)
    np.testing.assert_allclose(fitted.rho, 0.5, atol=1e-6)
    np.testing.assert_allclose(fitted.beta1, 0.4, atol=1e-6)
    np.testing.assert_allclose(fitted.beta2, 0.8, atol=1e-6)
    np.testing.assert_allclose(fitted.beta0, 1.0, atol=1e-6)


def test_noisy_recovery_within_standard_errors():
    truth = TrendParams.constant(SPEC, K=1, tau=12, beta0=2.0, a=[0.5], b=[-0.3], sigma=0.1)
    T = 2000
    fitted = fit_trend(_series(truth, None, T, noise=0.1, seed=4), None, K=1, tau=12)
    se = 0.1 / np.sqrt(T)
    assert np.max(np.abs(fitted.beta0 - 2.0)) < 5 * se
    assert np.max(np.abs(fitted.a[0] - 0.5)) < 5 * se * np.sqrt(2)
    assert np.max(np.abs(fitted.sigma - 0.1)) < 0.05 * 0.1


def test_sigma_pools_ensembles():
    truth = TrendParams.constant(SPEC, beta0=1.0)
    fitted = fit_trend(_series(truth, None, 2000, noise=0.3, R=2, seed=8), None, K=0, tau=12)
    np.testing.assert_allclose(fitted.sigma, 0.3, rtol=0.05)


def test_selected_rho_beats_every_probe():
    forcing = _random_walk_forcing(-100, 30, seed=2)
    truth = TrendParams.constant(SPEC, K=0, tau=12, beta1=0.3, beta2=0.7, rho=0.37, sigma=0.2)
    series = _series(truth, forcing, 360, noise=0.2, seed=5)
    fitted = fit_trend(series, forcing, K=0, tau=12)

    y = series.values[0, :, 0, 0]
    years = year_index(np.arange(1, 361), 12)
    for probe in np.linspace(0.0, 1.0, 33):
        lags = lag_table(forcing, 1, int(years.max()), np.array([probe]))[years - 1, 0]
        design = np.column_stack([np.ones(360), forcing.at(years), lags])
        coef = np.linalg.lstsq(design, y, rcond=None)[0]
        probe_rss = float(np.sum((y - design @ coef) ** 2))
        assert fitted.sigma[0, 0] ** 2 * 360 <= probe_rss * (1 + 1e-9)


def test_constant_forcing_zeroes_slopes(caplog):
    forcing = ForcingTrajectory(values=np.full(40, 1.5), start_year=-5)
    truth = TrendParams.constant(SPEC, beta0=1.0)
    fitted = fit_trend(_series(truth, None, 120, noise=0.1), forcing, K=0, tau=12)
    np.testing.assert_array_equal(fitted.beta1, 0.0)
    np.testing.assert_array_equal(fitted.beta2, 0.0)
    assert "不可识别" in caplog.text


def test_too_short_series():
    truth = TrendParams.constant(SPEC)
    with pytest.raises(ValueError):
        fit_trend(_series(truth, None, 5), None, K=1, tau=12)


def test_locations_are_fitted_independently():
    truth = TrendParams.constant(SPEC, K=1, tau=12, beta0=1.0, a=[0.4])
    series = _series(truth, None, 300, noise=0.5, seed=9)
    fitted = fit_trend(series, None, K=1, tau=12)
    order = np.random.default_rng(1).permutation(SPEC.point_count)
    permuted_values = series.values.reshape(1, 300, -1)[..., order].reshape(series.values.shape)
    permuted = fit_trend(FieldSeries(SPEC, permuted_values), None, K=1, tau=12)
    np.testing.assert_allclose(permuted.beta0.ravel(), fitted.beta0.ravel()[order], atol=1e-12)
    np.testing.assert_allclose(permuted.sigma.ravel(), fitted.sigma.ravel()[order], atol=1e-12)


def test_detrend_and_retrend():
    truth = TrendParams.constant(SPEC, K=1, tau=12, beta0=3.0, a=[1.0], sigma=2.0)
    exact = _series(truth, None, 24)
    np.testing.assert_allclose(detrend(exact, truth, None).values, 0.0, atol=1e-14)

    noisy = _series(truth, None, 24, noise=5.0, seed=2)
    restored = retrend(detrend(noisy, truth, None), truth, None)
    np.testing.assert_allclose(restored.values, noisy.values, rtol=0, atol=1e-12)


def test_detrended_series_is_standardized():
    truth = TrendParams.constant(SPEC, beta0=3.0, sigma=2.0)
    series = _series(truth, None, 2000, noise=2.0, seed=6)
    fitted = fit_trend(series, None, K=0, tau=12)
    z = detrend(series, fitted, None).values
    np.testing.assert_allclose(z.std(axis=(0, 1)), 1.0, rtol=0.1)


def test_trend_file_round_trip(tmp_path):
    params = TrendParams.constant(SPEC, K=2, tau=365, beta0=1.0, a=[0.1, 0.2], b=[0.3], sigma=0.7)
    save_trend(params, tmp_path / "trend.bin")
    loaded = load_trend(tmp_path / "trend.bin")
    assert (loaded.K, loaded.tau, loaded.spec) == (2, 365, SPEC)
    np.testing.assert_array_equal(loaded.records(), params.records())


def test_forcing_csv_round_trip(tmp_path):
    forcing = ForcingTrajectory(values=np.array([0.1, 0.25, -0.5]), start_year=-1)
    path = tmp_path / "rf.csv"
    forcing.to_csv(path)
    loaded = load_forcing(path)
    assert loaded.start_year == -1
    np.testing.assert_array_equal(loaded.values, forcing.values)


def test_forcing_csv_requires_contiguous_years(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("year,forcing\n1,0.1\n3,0.2\n", encoding="utf-8")
    with pytest.raises(ValueError):
        ForcingTrajectory.from_csv(path)


def test_remote_forcing_is_downloaded_once(tmp_path):
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(str(request.url))
        return httpx.Response(200, text="year,forcing\n0,1.0\n1,2.0\n")

    url = "https://example.org/data/rf.csv"
    first = load_forcing(url, tmp_path, transport=httpx.MockTransport(handler))
    second = load_forcing(url, tmp_path, transport=httpx.MockTransport(handler))
    assert calls == [url]
    assert (tmp_path / "rf.csv").exists()
    np.testing.assert_array_equal(first.values, [1.0, 2.0])
    np.testing.assert_array_equal(second.values, first.values)
    assert first.start_year == 0


def test_remote_forcing_http_error(tmp_path):
    transport = httpx.MockTransport(lambda request: httpx.Response(404))
    with pytest.raises(RuntimeError, match="网络错误"):
        load_forcing("https://example.org/missing.csv", tmp_path, transport=transport)

import numpy as np
import pytest
from scipy.linalg import toeplitz

from grid import FieldSeries, GridSpec
from pipeline import (
    BUNDLE_FILES,
    FORCING_FILE,
    PROVENANCE_FILE,
    StageError,
    emulate_model,
    load_model,
    save_model,
    train,
    validate,
)
from stochastic import implied_field_std, ma_weights
from storage import dump_json, load_json
from trend import ForcingTrajectory

SPEC = GridSpec.from_band_limit(2)
SETTINGS = {"trend_harmonics": 1, "trend_period": 12, "var_order": 1, "tile_size": 8}


@pytest.fixture
def training_data(make_model):
    truth = make_model(SPEC, P=1, phi=0.6, beta0=1.0, K=1, a=(0.5,))
    return truth, emulate_model(truth, 3000, seed=2)


def _bundle_bytes(directory):
    return {
        name: (directory / name).read_bytes()
        for name in BUNDLE_FILES
        if (directory / name).exists()
    }


def test_train_recovers_generating_model(training_data):
    _, series = training_data
    model = train(series, None, SETTINGS)
    np.testing.assert_allclose(model.var.phi[0], 0.6, atol=0.06)
    assert model.var.P == 1
    assert model.innovation.dimension == 4
    assert model.trend.K == 1 and model.trend.tau == 12
    assert model.provenance["P"] == 1
    assert model.provenance["has_forcing"] is False
    assert model.provenance["precision_variant"] == "dp"


def _by_degree(values):
    values = np.asarray(values, dtype=float)
    return np.repeat(values, 2 * np.arange(values.size) + 1)


def _ar_standard_errors(var, T):
    """渐近标准误 sqrt(diag(Γ_P⁻¹)/T)，Γ_P 由单位新息方差下的 MA 权重得到。"""
    psi = ma_weights(var)
    errors = np.empty((var.P, psi.shape[1]))
    for j in range(psi.shape[1]):
        column = psi[:, j]
        gamma = [column[: column.size - h] @ column[h:] for h in range(var.P)]
        errors[:, j] = np.sqrt(np.diag(np.linalg.inv(toeplitz(gamma))) / T)
    return errors


@pytest.mark.slow
def test_training_recovers_var_and_sigma_across_seeds(make_model):
    spec = GridSpec.from_band_limit(8)
    degrees = np.arange(spec.band_limit)
    n = spec.band_limit**2
    phi = np.stack(
        [_by_degree(0.2 + 0.6 * degrees / (spec.band_limit - 1)), np.full(n, 0.1), np.full(n, -0.05)]
    )
    truth = make_model(
        spec,
        P=3,
        phi=phi,
        u=np.diag(_by_degree(1.0 / (degrees + 1.0))),
        beta0=1.0,
        sigma=2.0,
        K=2,
        tau=12,
        a=(0.5, -0.3),
        b=(0.2, 0.1),
    )
    T = 5000
    settings = {"trend_harmonics": 2, "trend_period": 12, "var_order": 3, "tile_size": 8}
    standard_errors = _ar_standard_errors(truth.var, T - 3)
    expected_sigma = implied_field_std(truth)

    failures = 0
    for seed in range(20):
        model = train(emulate_model(truth, T, seed=seed), None, settings)
        z = (model.var.phi - truth.var.phi) / standard_errors
        phi_ok = np.mean(np.abs(z) > 3.0) <= 0.05 and np.mean(z**2) < 2.0
        sigma_error = model.trend.sigma / expected_sigma - 1.0
        sigma_ok = np.sqrt(np.mean(sigma_error**2)) < 0.05
        failures += not (phi_ok and sigma_ok)
    assert failures <= 1


def test_short_series_fails_in_var_stage(make_model):
    series = emulate_model(make_model(SPEC), 4, seed=0)
    with pytest.raises(StageError) as excinfo:
        train(series, None, {"trend_harmonics": 0, "trend_period": 12, "var_order": 3})
    assert excinfo.value.stage == "fit_var"


def test_disallowed_period_fails_in_trend_stage(make_model):
    series = emulate_model(make_model(SPEC), 40, seed=0)
    with pytest.raises(StageError) as excinfo:
        train(series, None, {**SETTINGS, "trend_period": 7})
    assert excinfo.value.stage == "fit_trend"


def test_bundle_is_byte_reproducible(training_data, tmp_path):
    _, series = training_data
    short = FieldSeries(SPEC, series.values[:, :240])
    save_model(train(short, None, SETTINGS), tmp_path / "a")
    save_model(train(short, None, SETTINGS), tmp_path / "b")
    save_model(train(short, None, {**SETTINGS, "threads": 2}), tmp_path / "c")
    first = _bundle_bytes(tmp_path / "a")
    assert set(first) == set(BUNDLE_FILES) - {FORCING_FILE}
    assert _bundle_bytes(tmp_path / "b") == first
    assert _bundle_bytes(tmp_path / "c") == first

    save_model(load_model(tmp_path / "a"), tmp_path / "d")
    assert _bundle_bytes(tmp_path / "d") == first


def test_saving_twice_keeps_a_backup(make_model, tmp_path):
    forcing = ForcingTrajectory(values=np.linspace(0.0, 1.0, 10), start_year=0)
    model = make_model(SPEC, forcing=forcing)
    save_model(model, tmp_path)
    save_model(model, tmp_path)
    backups = [p for p in (tmp_path / "old").iterdir() if p.is_dir()]
    assert len(backups) == 1
    assert (backups[0] / PROVENANCE_FILE).exists()

    loaded = load_model(tmp_path)
    np.testing.assert_array_equal(loaded.forcing.values, forcing.values)
    assert loaded.forcing.start_year == 0


def test_missing_bundle_file(make_model, tmp_path):
    save_model(make_model(SPEC), tmp_path)
    (tmp_path / "var.bin").unlink()
    with pytest.raises(FileNotFoundError, match="var.bin"):
        load_model(tmp_path)


def test_grid_mismatch_between_provenance_and_trend(make_model, tmp_path):
    save_model(make_model(SPEC), tmp_path)
    provenance = load_json(tmp_path / "provenance.json")
    provenance.update(GridSpec.from_band_limit(3).to_dict())
    dump_json(tmp_path / "provenance.json", provenance)
    with pytest.raises(ValueError, match="不一致"):
        load_model(tmp_path)


def test_emulate_model_is_deterministic(make_model):
    model = make_model(SPEC, P=1, phi=0.3, v2=0.2)
    first = emulate_model(model, 10, seed=7, n_ensembles=2, t_start=5)
    second = emulate_model(model, 10, seed=7, n_ensembles=2, t_start=5)
    assert first.t_start == 5
    np.testing.assert_array_equal(first.values, second.values)


def test_validation_accepts_own_emulations(make_model, small_spec):
    model = make_model(small_spec, beta0=2.0, sigma=0.5, v2=0.1)
    holdout = emulate_model(model, 30, seed=99)
    report = validate(model, holdout, 40, seed=1, threshold=0.25)
    assert report.passed
    assert report.n_locations == small_spec.point_count
    assert report.z_mean.shape == (1, *small_spec.shape)
    assert len(report.degree_power_ratio) == small_spec.band_limit
    assert "z_mean" not in report.to_dict()


def test_validation_flags_shifted_holdout(make_model, small_spec):
    model = make_model(small_spec, beta0=2.0, sigma=0.5, v2=0.1)
    holdout = emulate_model(model, 30, seed=99)
    shifted = FieldSeries(small_spec, holdout.values + 10.0 * implied_field_std(model))
    report = validate(model, shifted, 20, seed=1)
    assert report.mean_flag_fraction > 0.99
    assert not report.passed


def test_validation_argument_checks(make_model, small_spec):
    model = make_model(small_spec)
    holdout = emulate_model(model, 5, seed=0)
    with pytest.raises(ValueError):
        validate(model, holdout, 0, seed=1)
    other = emulate_model(make_model(SPEC), 5, seed=0)
    with pytest.raises(ValueError):
        validate(model, other, 5, seed=1)

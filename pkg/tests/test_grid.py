import struct

import numpy as np
import pytest
from scipy.special import lpmv

from grid import (
    AdmissibilityError,
    EquiangularField,
    FieldFormatError,
    FieldSeries,
    GridSpec,
    clenshaw_curtis_weights,
    draw_coefficients,
    export_csv,
    field_energy,
    load_field_series,
    quadrature_weights,
    resolution_table,
    save_field_series,
    sine_moments,
    synth_bandlimited,
    upsample_spline,
)
from sht import forward_sht, forward_sht_series, plan_for


def _write_raw(path, header, values):
    with open(path, "wb") as fp:
        fp.write(b"SPHF" + struct.pack("<6I", *header))
        fp.write(np.asarray(values, dtype="<f8").tobytes())


def test_grid_spec_geometry():
    spec = GridSpec.from_band_limit(720)
    assert spec.shape == (721, 1440)
    small = GridSpec(n_theta=5, n_phi=8, band_limit=4)
    assert small.thetas[0] == 0.0
    assert small.thetas[-1] == pytest.approx(np.pi)
    assert small.phis[1] == pytest.approx(2 * np.pi / 8)
    assert small.point_count == 40


@pytest.mark.parametrize("dims", [(3, 2, 2), (2, 8, 2), (5, 8, 0)])
def test_inadmissible_specs_are_rejected(dims):
    with pytest.raises(AdmissibilityError):
        GridSpec(*dims)


def test_load_minimal_file(tmp_path):
    path = tmp_path / "min.sphf"
    _write_raw(path, (1, 3, 4, 2, 1, 1), np.arange(12.0))
    series = load_field_series(path)
    assert series.spec == GridSpec(3, 4, 2)
    assert (series.R, series.T) == (1, 1)
    np.testing.assert_array_equal(series.field(0, 0).values, np.arange(12.0).reshape(3, 4))


def test_load_rejects_inadmissible_header(tmp_path):
    path = tmp_path / "bad.sphf"
    _write_raw(path, (1, 3, 2, 2, 1, 1), np.zeros(6))
    with pytest.raises(AdmissibilityError):
        load_field_series(path)


def test_load_rejects_non_finite_and_truncated(tmp_path):
    values = np.zeros(12)
    values[5] = np.nan
    path = tmp_path / "nan.sphf"
    _write_raw(path, (1, 3, 4, 2, 1, 1), values)
    with pytest.raises(FieldFormatError, match="非有限"):
        load_field_series(path)

    short = tmp_path / "short.sphf"
    _write_raw(short, (1, 3, 4, 2, 2, 1), np.zeros(12))
    with pytest.raises(FieldFormatError):
        load_field_series(short)

    magic = tmp_path / "magic.sphf"
    magic.write_bytes(b"XXXX" + bytes(24))
    with pytest.raises(FieldFormatError):
        load_field_series(magic)


def test_save_and_load_round_trip(tmp_path):
    spec = GridSpec(3, 4, 2)
    values = np.random.default_rng(0).normal(size=(2, 3, 3, 4))
    save_field_series(FieldSeries(spec, values), tmp_path / "s.sphf")
    loaded = load_field_series(tmp_path / "s.sphf")
    np.testing.assert_array_equal(loaded.values, values)
    fields = loaded.fields
    assert len(fields) == 6
    assert (fields[4].ensemble_index, fields[4].time_index) == (2, 2)


def test_field_rejects_wrong_shape():
    with pytest.raises(FieldFormatError):
        EquiangularField(GridSpec(3, 4, 2), np.zeros((4, 3)))


def test_from_fields_groups_by_ensemble():
    spec = GridSpec(3, 4, 2)
    fields = [EquiangularField(spec, np.full(spec.shape, k), time_index=1 + k % 2) for k in range(4)]
    series = FieldSeries.from_fields(fields, n_ensembles=2)
    assert (series.R, series.T) == (2, 2)
    assert series.values[1, 0, 0, 0] == 2.0


def test_export_csv(tmp_path):
    spec = GridSpec(3, 4, 2)
    series = FieldSeries(spec, np.arange(24.0).reshape(1, 2, 3, 4))
    path = tmp_path / "slice.csv"
    export_csv(series, path, t=1)
    lines = path.read_text().splitlines()
    assert lines[0] == "theta,phi,value"
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape == (12, 3)
    np.testing.assert_array_equal(rows[:, 2], np.arange(12.0, 24.0))


def test_clenshaw_curtis_weights_integrate_polynomials():
    weights = clenshaw_curtis_weights(5)
    thetas = np.pi * np.arange(5) / 4
    assert weights.sum() == pytest.approx(2.0, abs=1e-14)
    assert weights @ np.cos(thetas) ** 2 == pytest.approx(2.0 / 3.0, abs=1e-14)
    spec = GridSpec(5, 8, 4)
    assert quadrature_weights(spec).sum() * spec.n_phi == pytest.approx(4 * np.pi)


def test_field_energy_of_constant():
    spec = GridSpec(9, 16, 8)
    field = EquiangularField(spec, np.full(spec.shape, 2.0))
    assert field_energy(field) == pytest.approx(16.0 * np.pi)


def test_field_energy_is_exact_on_minimal_grid():
    spec = GridSpec.from_band_limit(4)
    theta = spec.thetas[:, None]
    y30 = np.sqrt(7.0 / (4.0 * np.pi)) * 0.5 * (5.0 * np.cos(theta) ** 3 - 3.0 * np.cos(theta))
    field = EquiangularField(spec, np.broadcast_to(y30, spec.shape).copy())
    assert field_energy(field) == pytest.approx(1.0, rel=1e-12)


def test_sine_moments():
    values = sine_moments(np.array([-2, -1, 0, 1, 2, 3]))
    np.testing.assert_allclose(
        values, [-2.0 / 3.0, -0.5j * np.pi, 2.0, 0.5j * np.pi, -2.0 / 3.0, 0.0], atol=1e-15
    )


def test_resolution_table_matches_published_values():
    rows = resolution_table()
    np.testing.assert_allclose([r.degrees for r in rows], [0.25, 0.125, 0.0625, 0.03125])
    np.testing.assert_allclose([r.km for r in rows], [27.8, 13.9, 6.95, 3.48], rtol=2e-3)
    np.testing.assert_allclose(
        [r.points_millions for r in rows], [1.036, 4.147, 16.589, 66.355], rtol=1e-3
    )
    assert rows[0].exact_points == 719 * 1440


def test_synth_constant_mode():
    spec = GridSpec.from_band_limit(1)
    field = synth_bandlimited(spec, seed=0, coeffs=np.array([np.sqrt(4 * np.pi)]))
    np.testing.assert_allclose(field.values, 1.0, atol=1e-14)


def test_synth_is_deterministic():
    spec = GridSpec.from_band_limit(8)
    first = synth_bandlimited(spec, seed=7)
    second = synth_bandlimited(spec, seed=7)
    np.testing.assert_array_equal(first.values, second.values)


def test_synth_round_trip_through_forward_transform():
    spec = GridSpec.from_band_limit(16)
    field = synth_bandlimited(spec, seed=1)
    recovered = forward_sht(plan_for(spec), field).coeffs
    np.testing.assert_allclose(recovered, draw_coefficients(16, 1), rtol=0, atol=1e-10)


def test_upsample_constant_field():
    source = GridSpec.from_band_limit(4)
    series = FieldSeries(source, np.full((1, 2, *source.shape), 3.5))
    target = GridSpec(9, 16, 8)
    result = upsample_spline(series, target)
    assert result.values.shape == (1, 2, 9, 16)
    np.testing.assert_allclose(result.values, 3.5, atol=1e-12)


def test_upsample_reproduces_smooth_latitude_profile():
    source = GridSpec.from_band_limit(64)
    values = np.broadcast_to(np.cos(source.thetas)[:, None], source.shape)
    target = GridSpec(2 * source.n_theta - 1, 2 * source.n_phi, 128)
    result = upsample_spline(FieldSeries(source, values[None, None]), target)
    expected = np.broadcast_to(np.cos(target.thetas)[:, None], target.shape)
    np.testing.assert_allclose(result.values[0, 0], expected, atol=1e-6)


def test_upsample_preserves_band_limited_coefficients():
    L = 4
    source = GridSpec(65, 128, L)
    target = GridSpec(129, 256, L)
    coeffs = draw_coefficients(L, 5)
    field = synth_bandlimited(source, seed=5)
    upsampled = upsample_spline(FieldSeries(source, field.values[None, None]), target)
    recovered = forward_sht_series(plan_for(target), upsampled)[0, 0]
    scale = np.max(np.abs(coeffs))
    np.testing.assert_allclose(recovered, coeffs, rtol=1e-5, atol=1e-5 * scale)


def test_upsample_rejects_downsampling():
    source = GridSpec.from_band_limit(8)
    series = FieldSeries(source, np.zeros((1, 1, *source.shape)))
    with pytest.raises(ValueError, match="降采样"):
        upsample_spline(series, GridSpec.from_band_limit(4))


def test_field_linear_in_legendre_function_is_band_limited():
    spec = GridSpec.from_band_limit(4)
    x = np.cos(spec.thetas)
    values = np.broadcast_to(lpmv(0, 2, x)[:, None], spec.shape)
    coeffs = forward_sht(plan_for(spec), EquiangularField(spec, values)).coeffs
    assert np.count_nonzero(np.abs(coeffs) > 1e-12) == 1

import csv
import json

import numpy as np
import pytest

from mcmask import beamforming as bf
from mcmask.beamforming import ArrayGeometry, GeometryError, make_grid, steering_delays

FS = 16000


def xcorr_lag(a, b, fs, oversample=128):
    """Delay of ``b`` relative to ``a`` (seconds) from an FFT-oversampled circular
    cross-correlation with parabolic peak refinement."""
    n = a.size
    spec = np.conj(np.fft.rfft(a)) * np.fft.rfft(b)
    r = np.fft.irfft(spec, n * oversample)
    k = int(np.argmax(r))
    y0, y1, y2 = r[k - 1], r[k], r[(k + 1) % r.size]
    k = k + 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2)
    if k > r.size / 2:
        k -= r.size
    return k / (fs * oversample)


class TestGrid:
    def test_single_direction(self):
        g = make_grid(1)
        assert len(g) == 1 and abs(np.linalg.norm(g.directions[0]) - 1) < 1e-12

    def test_paper_grid_is_nearly_uniform(self):
        g = make_grid(5100)
        assert len(g) == 5100
        assert np.linalg.norm(g.directions.mean(axis=0)) < 0.01
        nn = g.nearest_neighbour_angles()
        assert nn.std() / nn.mean() < 0.3

    def test_deterministic(self):
        np.testing.assert_array_equal(make_grid(100).directions, make_grid(100).directions)

    def test_angles(self):
        g = bf.DirectionGrid(np.array([bf.direction_from_angles(156.0, 86.0)]))
        assert g.azimuth_deg[0] == pytest.approx(156.0)
        assert g.elevation_deg[0] == pytest.approx(86.0)


class TestDelays:
    def test_sensor_at_origin(self):
        geom = ArrayGeometry(np.zeros((1, 3)))
        assert steering_delays(geom, [0.0, 0.6, 0.8])[0] == 0.0

    def test_endfire_pair(self):
        geom = ArrayGeometry(np.array([[0.05, 0, 0], [-0.05, 0, 0]]))
        tau = steering_delays(geom, [1.0, 0, 0])
        np.testing.assert_allclose(tau, [-0.05 / 343, 0.05 / 343])
        assert tau[0] * 1e6 == pytest.approx(-145.77, abs=0.01)

    def test_broadside(self):
        geom = bf.linear_array(4, 0.05)
        np.testing.assert_allclose(steering_delays(geom, [0, 1.0, 0]), 0.0, atol=1e-20)


class TestProbe:
    def test_undelayed_channel_is_reference_tone(self):
        geom = ArrayGeometry(np.zeros((1, 3)))
        x = bf.render_probe(1000.0, 0.1, geom, [1.0, 0, 0], FS).data[0]
        np.testing.assert_allclose(x, np.sin(2 * np.pi * 1000 * np.arange(1600) / 16000), rtol=0, atol=1e-12)

    def test_full_period_delay_is_invisible(self):
        geom = ArrayGeometry(np.array([[0.0, 0, 0], [-0.343, 0, 0]]))  # tau = 1 ms at 1 kHz
        x = bf.render_probe(1000.0, 0.05, geom, [1.0, 0, 0], FS).data
        np.testing.assert_allclose(x[1], x[0], atol=1e-12)

    def test_cross_correlation_recovers_delay(self):
        geom = ArrayGeometry(np.array([[0.031, -0.02, 0.01], [-0.047, 0.015, 0.0]]))
        d = bf.direction_from_angles(40.0, 10.0)
        x = bf.render_probe(1000.0, 0.1, geom, d, FS).data  # 100 whole periods
        tau = steering_delays(geom, d)
        assert abs(xcorr_lag(x[0], x[1], FS) - (tau[1] - tau[0])) < 1e-6

    def test_rejects_nyquist(self):
        with pytest.raises(ValueError):
            bf.render_probe(8000.0, 0.1, bf.linear_array(2, 0.1), [1, 0, 0], FS)


class TestFractionalDelay:
    def test_integer_delay_is_exact_shift(self):
        x = np.arange(1.0, 11.0)
        np.testing.assert_array_equal(bf.fractional_delay(x, 3), np.r_[0, 0, 0, x[:7]])
        np.testing.assert_array_equal(bf.fractional_delay(x, -2), np.r_[x[2:], 0, 0])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        # band-limited test signal (below 0.8 Nyquist)
        spec = np.fft.rfft(rng.standard_normal(4000))
        spec[int(0.4 * spec.size):] = 0
        x = np.fft.irfft(spec, 4000)
        y = bf.fractional_delay(bf.fractional_delay(x, 3.37), -3.37)
        sl = slice(200, -200)
        assert np.linalg.norm(y[sl] - x[sl]) / np.linalg.norm(x[sl]) < 1e-4

    def test_tone_delay_matches_analytic(self):
        n = np.arange(2000)
        x = np.sin(2 * np.pi * 0.1 * n)
        y = bf.fractional_delay(x, 2.25)
        np.testing.assert_allclose(y[100:-100], np.sin(2 * np.pi * 0.1 * (n[100:-100] - 2.25)), atol=1e-4)


class TestDelayAndSum:
    def test_identical_channels(self):
        x = np.random.default_rng(1).standard_normal(300)
        np.testing.assert_allclose(bf.delay_and_sum(np.stack([x, x, x]), np.zeros(3), FS), x, rtol=1e-15)

    def test_steered_to_source_preserves_power(self):
        geom = ArrayGeometry(np.loadtxt(np.array(["-0.1 0.095 0", "0 0.095 -0.02", "0.1 0.095 0",
                                                  "-0.1 -0.095 0", "0 -0.095 0", "0.1 -0.095 0"])))
        d = bf.direction_from_angles(156.0, 86.0)
        mix = bf.render_probe(1000.0, 0.5, geom, d, FS)
        y = bf.delay_and_sum(mix, steering_delays(geom, d))
        z = bf.probe_reference(1000.0, 0.5, FS)
        ratio_db = 10 * np.log10(np.sum(y[128:-128] ** 2) / np.sum(z[128:-128] ** 2))
        assert abs(ratio_db) < 0.1

    def test_two_element_null(self):
        geom = bf.linear_array(2, 0.1)
        f = 1715.0  # cos^2(pi f d / c) = cos^2(pi / 2) = 0 at endfire
        mix = bf.render_probe(f, 0.5, geom, [1.0, 0, 0], FS)
        y = bf.delay_and_sum(mix, steering_delays(geom, [0, 1.0, 0]))
        z = bf.probe_reference(f, 0.5, FS)
        closed = np.cos(np.pi * f * 0.1 / 343.0) ** 2
        assert closed < 1e-20
        assert np.sum(y[128:-128] ** 2) / np.sum(z[128:-128] ** 2) < 1e-4

    def test_delay_count_checked(self):
        with pytest.raises(ValueError):
            bf.delay_and_sum(np.ones((2, 10)), np.zeros(3), FS)


def test_two_element_array_factor_formula():
    geom = bf.linear_array(2, 0.1)
    grid = make_grid(200)
    f = 1200.0
    af = bf.das_array_factor(geom, grid, f, [0, 1.0, 0])
    sin_theta = grid.directions[:, 0]  # angle from broadside in the x direction
    np.testing.assert_allclose(af, np.cos(np.pi * f * 0.1 * sin_theta / 343.0) ** 2, atol=1e-12)


class TestSweep:
    @pytest.fixture
    def geom(self):
        return bf.linear_array(4, 0.06)

    def test_pass_through_is_unity(self, geom):
        bp = bf.beampattern_sweep(lambda m: m.data[0], make_grid(30), 1000.0, 0.25, geom, FS)
        np.testing.assert_allclose(bp.response, 1.0, atol=2e-3)

    def test_das_peak_at_steering_direction(self, geom):
        grid = make_grid(300)
        k0 = 77
        bp = bf.beampattern_sweep(bf.das_system(geom, grid.directions[k0]), grid, 2000.0, 0.25, geom, FS)
        k = int(np.argmax(bp.response))
        spacing = grid.nearest_neighbour_angles()[k0]
        # a linear array cannot tell directions on the same cone apart; the peak
        # must still share the steering direction's cone angle to within one cell
        cone = np.arccos(np.clip(grid.directions[[k, k0], 0], -1, 1))
        assert abs(cone[0] - cone[1]) <= spacing + 1e-12
        assert bp.response[k0] == pytest.approx(bp.response.max(), rel=1e-3)

    def test_matches_closed_form(self, geom):
        grid = make_grid(120)
        steer = grid.directions[10]
        bp = bf.beampattern_sweep(bf.das_system(geom, steer), grid, 1000.0, 0.5, geom, FS)
        af = bf.das_array_factor(geom, grid, 1000.0, steer)
        m = af > 1e-3
        assert np.max(np.abs(10 * np.log10(bp.response[m] / af[m]))) < 0.5

    def test_reflection_symmetry_of_linear_array(self, geom):
        grid = make_grid(60)
        mirrored = bf.DirectionGrid(grid.directions * np.array([1.0, -1.0, 1.0]))
        steer = [1 / np.sqrt(2), 0, 1 / np.sqrt(2)]
        a = bf.beampattern_sweep(bf.das_system(geom, steer), grid, 1500.0, 0.25, geom, FS).response
        b = bf.beampattern_sweep(bf.das_system(geom, steer), mirrored, 1500.0, 0.25, geom, FS).response
        np.testing.assert_allclose(a, b, rtol=1e-9)

    def test_duration_doubling_converged(self, geom):
        grid = make_grid(40)
        steer = grid.directions[3]
        a = bf.beampattern_sweep(bf.das_system(geom, steer), grid, 1000.0, 0.5, geom, FS).response
        b = bf.beampattern_sweep(bf.das_system(geom, steer), grid, 1000.0, 1.0, geom, FS).response
        sel = bf.das_array_factor(geom, grid, 1000.0, steer) > 1e-3
        assert np.max(np.abs(10 * np.log10(a[sel] / b[sel]))) < 0.05

    def test_parallel_sweep_matches_serial(self, geom):
        grid = make_grid(16)
        sys_ = bf.das_system(geom, grid.directions[0])
        a = bf.beampattern_sweep(sys_, grid, 1000.0, 0.1, geom, FS).response
        b = bf.beampattern_sweep(sys_, grid, 1000.0, 0.1, geom, FS, workers=4).response
        np.testing.assert_array_equal(a, b)

    def test_length_mismatch(self, geom):
        with pytest.raises(ValueError):
            bf.beampattern_sweep(lambda m: m.data[0][:-1], make_grid(3), 1000.0, 0.1, geom, FS)

    def test_exports(self, geom, tmp_path):
        bp = bf.beampattern_sweep(lambda m: m.data[0] / 2, make_grid(10), 1000.0, 0.1, geom, FS,
                                  description="half")
        bp.to_csv(tmp_path / "b.csv")
        bp.to_json(tmp_path / "b.json")
        rows = list(csv.DictReader(open(tmp_path / "b.csv")))
        assert list(rows[0]) == ["k", "azimuth_deg", "elevation_deg", "b_linear", "b_dB"]
        assert len(rows) == 10
        assert float(rows[0]["b_dB"]) == pytest.approx(10 * np.log10(float(rows[0]["b_linear"])), abs=1e-5)
        doc = json.load(open(tmp_path / "b.json"))
        assert doc["K"] == 10 and doc["frequency_hz"] == 1000.0 and doc["system"] == "half"


class TestGeometryFiles:
    def test_load(self, tmp_path):
        p = tmp_path / "g.yaml"
        p.write_text("positions: [[0, 0, 0], [0.1, 0, 0]]\nspeed_of_sound: 340\ncenter: true\n")
        g = bf.load_geometry(p)
        assert g.speed_of_sound == 340.0
        np.testing.assert_allclose(g.positions[:, 0], [-0.05, 0.05])

    @pytest.mark.parametrize("text,field", [
        ("speed_of_sound: 343\n", "positions"),
        ("positions: [[0, 0], [1, 1]]\n", "positions"),
        ("positions: [[0, 0, 0]]\nspeed_of_sound: -1\n", "speed_of_sound"),
        ("positions: [[0, 0, x]]\n", "positions"),
    ])
    def test_errors_name_field(self, tmp_path, text, field):
        p = tmp_path / "g.yaml"
        p.write_text(text)
        with pytest.raises(GeometryError) as e:
            bf.load_geometry(p)
        assert e.value.field == field

    def test_bundled_example(self):
        from mcmask import example_geometry_path
        g = bf.load_geometry(example_geometry_path())
        assert g.n_channels == 6

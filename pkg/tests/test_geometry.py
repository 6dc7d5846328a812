import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpn_oamp.geometry import (REFERENCE_GEOMETRY, SPEED_OF_LIGHT, ArrayGeometry, ChannelConfig, PathComponent,
                               ae_position, all_positions, aperture_and_rayleigh, array_response,
                               assemble_channel, complex_to_real, farfield_error, generate_channel,
                               miscalibration_gains, path_loss, real_to_complex, reflection_coefficient,
                               path_gain_at, sample_paths)

DESK = ArrayGeometry.from_wavelengths(S=4, S_bar=16, f_c=300e9, d_a_lambda=0.5, d_sub_lambda=8.0)


def brute_position(g, s, s_bar):
    # row/column decomposition written out independently of the library
    rs, rsb = int(round(g.S ** 0.5)), int(round(g.S_bar ** 0.5))
    for m in range(1, rs + 1):
        for n in range(1, rs + 1):
            if (m - 1) * rs + n != s:
                continue
            for mb in range(1, rsb + 1):
                for nb in range(1, rsb + 1):
                    if (mb - 1) * rsb + nb == s_bar:
                        pitch = (rsb - 1) * g.d_a + g.d_sub
                        return np.array([(m - 1) * pitch + (mb - 1) * g.d_a,
                                         (n - 1) * pitch + (nb - 1) * g.d_a, 0.0])
    raise AssertionError


class TestPositions:
    def test_reference_corners(self):
        assert np.allclose(ae_position(REFERENCE_GEOMETRY, 1, 1), [0, 0, 0], atol=0)
        assert np.allclose(ae_position(REFERENCE_GEOMETRY, 1, 2), [0, 0.0005, 0], atol=1e-15)
        assert np.allclose(ae_position(REFERENCE_GEOMETRY, 2, 1), [0, 0.0635, 0], atol=1e-15)

    @pytest.mark.parametrize("s,s_bar", [(1, 1), (2, 5), (3, 16), (4, 11), (4, 16)])
    def test_matches_brute_force(self, s, s_bar):
        assert np.allclose(ae_position(DESK, s, s_bar), brute_position(DESK, s, s_bar), atol=1e-15)

    def test_storage_order_is_sa_major(self):
        pos = all_positions(DESK)
        for s in range(1, 5):
            for sb in range(1, 17):
                assert np.allclose(pos[(s - 1) * 16 + sb - 1], ae_position(DESK, s, sb))

    @pytest.mark.parametrize("s,s_bar", [(0, 1), (5, 1), (1, 0), (1, 17)])
    def test_out_of_range(self, s, s_bar):
        with pytest.raises(ValueError):
            ae_position(DESK, s, s_bar)


class TestAperture:
    def test_reference(self):
        D, d_r = aperture_and_rayleigh(REFERENCE_GEOMETRY)
        assert D == pytest.approx(0.10041, abs=1e-5)
        assert d_r == pytest.approx(20.16, abs=0.01)

    def test_single_antenna(self):
        g = ArrayGeometry(S=1, S_bar=1, d_a=0.0005, d_sub=0.001, f_c=300e9)
        assert aperture_and_rayleigh(g) == (0.0, 0.0)

    def test_desk(self):
        D, d_r = aperture_and_rayleigh(DESK)
        assert D == pytest.approx(0.01556, abs=1e-5)
        assert d_r == pytest.approx(0.484, abs=1e-3)

    def test_diagonal_cross_check(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            S = int(rng.integers(1, 4)) ** 2
            S_bar = int(rng.integers(1, 9)) ** 2
            d_a = float(rng.uniform(1e-4, 1e-2))
            g = ArrayGeometry(S=S, S_bar=S_bar, d_a=d_a, d_sub=d_a * float(rng.uniform(1, 100)), f_c=1e11)
            diag = np.linalg.norm(ae_position(g, 1, 1) - ae_position(g, S, S_bar))
            D = aperture_and_rayleigh(g)[0]
            assert D == pytest.approx(diag, rel=1e-12, abs=1e-300)

    @pytest.mark.parametrize("kwargs", [dict(S=3), dict(S_bar=15), dict(d_a=0.0), dict(d_sub=1e-5)])
    def test_invalid(self, kwargs):
        base = dict(S=4, S_bar=16, d_a=5e-4, d_sub=8e-3, f_c=3e11)
        base.update(kwargs)
        with pytest.raises(ValueError):
            ArrayGeometry(**base)


class TestPropagation:
    def test_reflection_normal_smooth(self):
        assert reflection_coefficient(0.0, 2.24, 0.0, 3e11) == pytest.approx((1 - 2.24) / (1 + 2.24), abs=1e-12)
        assert abs(reflection_coefficient(0.0, 2.24, 0.0, 3e11) - (-0.38272)) < 1e-5

    def test_reflection_rough(self):
        g = reflection_coefficient(0.0, 2.24, 8.8e-5, 300e9)
        assert g.real == pytest.approx(-0.2077, abs=1e-4)
        assert g.real / ((1 - 2.24) / 3.24) == pytest.approx(math.exp(-0.6114), rel=1e-3)

    def test_reflection_index_matched(self):
        assert abs(reflection_coefficient(0.0, 1.0, 0.0, 1e11)) < 1e-15

    def test_reflection_magnitude_bounded(self):
        for phi in np.linspace(0, math.pi / 2 - 1e-6, 50):
            assert abs(reflection_coefficient(phi, complex(2.24, -0.025), 8.8e-5, 3e11)) <= 1.0

    def test_path_loss_reference(self):
        assert path_loss(300e9, 30.0, 0.0033, 1.0) == pytest.approx(2.5245e-6, rel=1e-4)

    def test_path_loss_spread_only(self):
        assert path_loss(1e11, 7.0, 0.0, 1.0) == pytest.approx(SPEED_OF_LIGHT / (4 * math.pi * 1e11 * 7.0))

    def test_path_loss_absorber(self):
        assert path_loss(300e9, 30.0, 0.0033, 0.0) == 0.0

    def test_path_loss_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            path_loss(3e11, 0.0, 0.0, 1.0)


class TestArrayResponse:
    @pytest.mark.parametrize("mode", ["auto", "force_near", "force_far"])
    def test_unit_modulus(self, mode):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = array_response(REFERENCE_GEOMETRY, rng.uniform(-math.pi, math.pi), rng.uniform(0, math.pi / 2),
                               rng.uniform(1, 40), 3e11, mode)
            assert np.max(np.abs(np.abs(a) - 1)) < 1e-12

    def test_first_element_far(self):
        r, f = 25.0, 3e11
        a = array_response(REFERENCE_GEOMETRY, 0.3, 0.7, r, f, "force_far")
        # planar model normalized to the phase of the exact near-field entry at the origin
        assert a[0] == pytest.approx(np.exp(-2j * math.pi * f * r / SPEED_OF_LIGHT), abs=1e-9)
        near = array_response(REFERENCE_GEOMETRY, 0.3, 0.7, r, f, "force_near")
        assert a[0] == pytest.approx(near[0], abs=1e-9)

    def test_auto_selects_by_rayleigh(self):
        d_r = DESK.rayleigh_distance
        for r, mode in ((0.5 * d_r, "force_near"), (2 * d_r, "force_far")):
            assert np.array_equal(array_response(DESK, 0.1, 0.2, r, DESK.f_c),
                                  array_response(DESK, 0.1, 0.2, r, DESK.f_c, mode))

    def test_near_exact_distance_oracle(self):
        phi, theta, r = -0.7 * math.pi, 0.4 * math.pi, 3.0
        t = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
        k = 2 * math.pi * DESK.f_c / SPEED_OF_LIGHT
        expected = [np.exp(-1j * k * np.linalg.norm(ae_position(DESK, s, sb) - r * t))
                    for s in range(1, 5) for sb in range(1, 17)]
        assert np.allclose(array_response(DESK, phi, theta, r, DESK.f_c, "force_near"), expected, atol=1e-10)

    def test_far_vs_near_trend(self):
        rng = np.random.default_rng(1)
        d_r = REFERENCE_GEOMETRY.rayleigh_distance
        for _ in range(20):
            phi, theta = rng.uniform(-math.pi, math.pi), rng.uniform(0.05, math.pi / 2)
            close = farfield_error(REFERENCE_GEOMETRY, phi, theta, 0.1 * d_r)
            far = farfield_error(REFERENCE_GEOMETRY, phi, theta, 10 * d_r)
            assert far < close


class TestChannel:
    def test_single_los(self):
        paths = sample_paths(np.random.default_rng(0), ChannelConfig(L=1), REFERENCE_GEOMETRY)
        assert len(paths) == 1 and paths[0].is_los and paths[0].r == 30.0

    def test_blocked_has_only_nlos(self):
        paths = sample_paths(np.random.default_rng(0), ChannelConfig(L=5, los_blocked=True), DESK)
        assert len(paths) == 4 and not any(p.is_los for p in paths)

    def test_nlos_distance_mean(self):
        cfg = ChannelConfig(L=1001)
        rng = np.random.default_rng(5)
        rs = [p.r for _ in range(100) for p in sample_paths(rng, cfg, REFERENCE_GEOMETRY) if not p.is_los]
        assert len(rs) == 100_000
        assert np.mean(rs) == pytest.approx(17.5, abs=0.1)
        assert min(rs) >= 10 and max(rs) <= 25

    def test_deterministic(self):
        a = sample_paths(np.random.default_rng(9), ChannelConfig(), DESK)
        b = sample_paths(np.random.default_rng(9), ChannelConfig(), DESK)
        assert a == b
        ha = generate_channel(np.random.default_rng(9), ChannelConfig(), DESK)[0].h_complex
        hb = generate_channel(np.random.default_rng(9), ChannelConfig(), DESK)[0].h_complex
        assert np.array_equal(ha, hb)

    def test_single_path_equals_response(self):
        p = PathComponent(alpha=1.0, phi=0.4, theta=0.9, r=0.3, tau=0.0)
        h = assemble_channel([p], DESK).h_complex
        assert np.array_equal(h, array_response(DESK, 0.4, 0.9, 0.3, DESK.f_c))

    def test_cancellation(self):
        p = PathComponent(alpha=0.3 - 0.1j, phi=0.4, theta=0.9, r=0.3, tau=1e-9)
        q = PathComponent(alpha=-0.3 + 0.1j, phi=0.4, theta=0.9, r=0.3, tau=1e-9)
        assert np.allclose(assemble_channel([p, q], DESK).h_complex, 0, atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            assemble_channel([], DESK)

    def test_reference_channels_finite_nonzero(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            h = generate_channel(rng, ChannelConfig(), REFERENCE_GEOMETRY)[0].h_complex
            assert np.all(np.isfinite(h)) and np.linalg.norm(h) > 0

    def test_multi_frequency_shares_paths(self):
        samples = generate_channel(np.random.default_rng(4), ChannelConfig(), DESK, [2.9e11, 3e11, 3.1e11])
        assert samples[0].paths == samples[2].paths
        center = generate_channel(np.random.default_rng(4), ChannelConfig(), DESK)[0]
        assert np.allclose(samples[1].h_complex, center.h_complex, atol=1e-12)

    @pytest.mark.parametrize("cfg", [ChannelConfig(), ChannelConfig(los_blocked=True), ChannelConfig(L=1),
                                     ChannelConfig(gain_error_fraction=0.2)])
    def test_unit_normalization(self, cfg):
        rng = np.random.default_rng(6)
        for _ in range(5):
            h = generate_channel(rng, cfg, DESK)[0].h_complex
            assert np.linalg.norm(h) == pytest.approx(1.0, rel=1e-12)

    def test_unit_normalization_wideband_uses_carrier(self):
        freqs = [2.9e11, 3.05e11, 3.1e11]  # carrier not in the list
        wide = generate_channel(np.random.default_rng(4), ChannelConfig(), DESK, freqs)
        paths = wide[0].paths
        carrier = assemble_channel(paths, DESK, DESK.f_c, gains=[path_gain_at(p, ChannelConfig(), DESK.f_c)
                                                                   for p in paths]).h_complex
        for f, s in zip(freqs, wide):
            raw = assemble_channel(paths, DESK, f, gains=[path_gain_at(p, ChannelConfig(), f) for p in paths])
            assert np.allclose(s.h_complex, raw.h_complex / np.linalg.norm(carrier), atol=1e-14)

    def test_los_reference_normalization(self):
        cfg = ChannelConfig(L=1, normalization="los_reference")
        sample = generate_channel(np.random.default_rng(1), cfg, DESK)[0]
        p = sample.paths[0]
        a = array_response(DESK, p.phi, p.theta, p.r, DESK.f_c) * np.exp(-2j * np.pi * DESK.f_c * p.tau)
        # LoS-only channel: |alpha| * a / (|alpha| * sqrt(N)) has unit norm with the LoS phase kept
        assert np.allclose(sample.h_complex, a / np.sqrt(DESK.n_antennas), atol=1e-12)

    def test_unknown_normalization(self):
        with pytest.raises(ValueError):
            ChannelConfig(normalization="peak")

    def test_miscalibration_fraction(self):
        g = miscalibration_gains(np.random.default_rng(0), 1024, 0.2, 0.2)
        assert np.sum(g != 1.0) == 205


@settings(max_examples=50, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=32))
def test_real_stacking_round_trip(values):
    v = np.array(values, dtype=complex)
    r = complex_to_real(v)
    assert r.shape == (2 * len(v),)
    assert np.array_equal(real_to_complex(r), v)

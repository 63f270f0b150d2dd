import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from scipy import ndimage

from elastography.exceptions import NumericalError, ValidationError
from elastography.fields import ComplexField
from elastography.services.mmdi_service import (
    FilterBankConfig,
    InversionConfig,
    add_buffer,
    bandpass,
    buffer_width,
    butterworth_response,
    directional_split,
    discrete_plane_wave_bias,
    fill_invalid,
    filtered_components,
    invert_direction,
    mmdi_invert,
)
from elastography.services.performance_cache import clear_filter_cache, get_cached_filter
from elastography.services.phantom_service import Edge, Excitation, Inclusion, PhantomSpec
from elastography.services.wave_solver import simulate


def _plane_wave(shape, waves_per_fov, axis=1, sign=1):
    n = shape[axis]
    phase = 2 * math.pi * waves_per_fov * np.arange(n) / n
    line = np.exp(sign * 1j * phase)
    values = np.tile(line, (shape[0], 1)) if axis == 1 else np.tile(line[:, None], (1, shape[1]))
    return ComplexField(values, 1.0)


def _energy(field_):
    return float(np.sum(np.abs(field_.values) ** 2))


class BandpassTests(SimpleTestCase):
    def setUp(self):
        clear_filter_cache()

    def test_constant_is_removed(self):
        u = ComplexField(np.full((64, 64), 3.0 + 1.0j), 1.0)
        self.assertLess(np.abs(bandpass(u).values).max(), 1e-6 * 3.2)

    def test_passband_sinusoid_kept(self):
        u = _plane_wave((128, 128), 8)
        assert_allclose(bandpass(u).values, u.values, rtol=0.01, atol=1e-9)

    def test_nyquist_attenuated(self):
        u = _plane_wave((16, 512), 256)
        self.assertLessEqual(_energy(bandpass(u)) / _energy(u), 0.01)

    def test_small_grid_rejected(self):
        with self.assertRaises(ValidationError):
            bandpass(ComplexField(np.ones((8, 8)), 1.0))

    def test_bad_cutoffs(self):
        with self.assertRaises(ValidationError):
            FilterBankConfig(low_cut=10.0, high_cut=5.0)

    def test_response_is_cached(self):
        cfg = FilterBankConfig()
        params = {"low": cfg.low_cut, "high": cfg.high_cut, "order": cfg.butterworth_order, "fov": [32, 32]}
        self.assertIsNone(get_cached_filter("butterworth", (32, 32), params))
        response = butterworth_response((32, 32), cfg)
        assert_allclose(get_cached_filter("butterworth", (32, 32), params), response)
        clear_filter_cache()
        self.assertIsNone(get_cached_filter("butterworth", (32, 32), params))


class DirectionalSplitTests(SimpleTestCase):
    def test_components_sum_to_input(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            values = rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32))
            components = directional_split(ComplexField(values, 1.0))
            assert_allclose(sum(c.values for c in components), values, atol=1e-10)

    def test_plane_wave_lands_in_one_direction(self):
        components = directional_split(_plane_wave((128, 128), 8))
        energies = np.array([_energy(c) for c in components])
        self.assertGreaterEqual(energies[0] / energies.sum(), 0.95)

    def test_standing_wave_splits_evenly(self):
        forward = _plane_wave((128, 128), 8).values
        backward = _plane_wave((128, 128), 8, sign=-1).values
        components = directional_split(ComplexField(forward + backward, 1.0))
        fractions = np.array([_energy(c) for c in components])
        fractions /= fractions.sum()
        self.assertAlmostEqual(fractions[0], 0.5, delta=0.05)
        self.assertAlmostEqual(fractions[2], 0.5, delta=0.05)

    def test_vertical_wave_goes_to_ninety_degrees(self):
        components = directional_split(_plane_wave((64, 64), 5, axis=0))
        energies = np.array([_energy(c) for c in components])
        self.assertEqual(int(np.argmax(energies)), 1)


class BufferTests(SimpleTestCase):
    def test_buffer_width_and_padding(self):
        cfg = FilterBankConfig()
        self.assertEqual(buffer_width((129, 64), cfg), (64, 32))
        self.assertEqual(buffer_width((129, 64), FilterBankConfig(buffer_fraction=0.0)), (0, 0))
        padded = add_buffer(np.ones((4, 6)), (2, 3))
        self.assertEqual(padded.shape, (8, 12))
        self.assertEqual(padded.sum(), 24.0)

    def test_filtered_components_sum_to_buffered_bandpass(self):
        rng = np.random.default_rng(9)
        cfg = FilterBankConfig()
        values = rng.normal(size=(48, 40)) + 1j * rng.normal(size=(48, 40))
        u = ComplexField(values, 1.0)
        components = filtered_components(u, cfg)
        self.assertEqual(len(components), 4)
        self.assertTrue(all(c.shape == u.shape for c in components))
        expected = bandpass(u, cfg, buffer_width(u.shape, cfg)).values
        assert_allclose(sum(c.values for c in components), expected, atol=1e-10)

    def test_unbuffered_components_match_periodic_filters(self):
        cfg = FilterBankConfig(buffer_fraction=0.0)
        u = _plane_wave((64, 64), 6)
        components = filtered_components(u, cfg)
        assert_allclose(sum(c.values for c in components), bandpass(u, cfg).values, atol=1e-10)

    def test_bad_buffer_fraction(self):
        with self.assertRaises(ValidationError):
            FilterBankConfig(buffer_fraction=-0.1)


class InvertDirectionTests(SimpleTestCase):
    def _discrete_plane_wave(self, mu, cfg, n=100):
        k = math.sqrt(cfg.stiffness_scale / mu) * 1e-3  # 1/mm
        values = np.tile(np.exp(1j * k * np.arange(n)), (n, 1))
        return ComplexField(values, 1.0)

    def test_plane_wave_matches_closed_form_bias(self):
        cfg = InversionConfig()
        for mu in (1000.0, 4000.0, 8000.0):
            estimate, weight = invert_direction(self._discrete_plane_wave(mu, cfg), cfg)
            interior = estimate.values[2:-2, 2:-2]
            expected = mu * discrete_plane_wave_bias(mu, cfg, 1.0)
            assert_allclose(interior, expected, rtol=1e-6)
            self.assertTrue(np.all(weight.values[2:-2, 2:-2] > 0))

    def test_single_scale_bias(self):
        cfg = InversionConfig(laplacian_scales=(1,))
        estimate, _ = invert_direction(self._discrete_plane_wave(4000.0, cfg), cfg)
        self.assertAlmostEqual(float(np.median(estimate.values[1:-1, 1:-1])), 4012.0, delta=2.0)
        self.assertAlmostEqual(discrete_plane_wave_bias(1000.0, cfg, 1.0), 1.0, delta=0.015)

    def test_two_scale_bias_is_small(self):
        self.assertAlmostEqual(discrete_plane_wave_bias(4000.0, InversionConfig(), 1.0), 1.0, delta=0.01)

    def test_zero_field_has_no_weight(self):
        estimate, weight = invert_direction(ComplexField(np.zeros((20, 20)), 1.0))
        self.assertFalse(np.any(weight.values))
        self.assertFalse(np.any(estimate.values))

    def test_bad_scales(self):
        with self.assertRaises(ValidationError):
            InversionConfig(laplacian_scales=(0,))


class MMDIInvertTests(SimpleTestCase):
    def test_periodic_plane_wave(self):
        # 3 waves over a 100 mm field is exactly the 4 kPa wavelength at 60 Hz
        result = mmdi_invert(_plane_wave((100, 100), 3), FilterBankConfig(buffer_fraction=0.0))
        roi = result.stiffness.values[5:-5, 5:-5]
        self.assertAlmostEqual(float(roi.mean()), 4000.0, delta=0.02 * 4000.0)
        self.assertTrue(result.valid[5:-5, 5:-5].all())

    def test_invalid_pixels_are_filled(self):
        result = mmdi_invert(_plane_wave((100, 100), 3), FilterBankConfig(buffer_fraction=0.0))
        self.assertFalse(result.valid[0].any())
        self.assertTrue(np.all(result.stiffness.values > 0))

    def test_zero_input(self):
        with self.assertRaises(NumericalError):
            mmdi_invert(ComplexField(np.zeros((32, 32)), 1.0))

    def test_homogeneous_phantom(self):
        for mu, damping in ((4000.0, 0.05), (4000.0, 0.3), (7500.0, 0.2)):
            with self.subTest(mu=mu, damping=damping):
                spec = PhantomSpec(
                    side_mm=128.0,
                    spacing_mm=1.0,
                    background_mu=mu,
                    background_damping=damping,
                    excitation=Excitation(edge=Edge.LEFT, amplitude=0.5),
                )
                u, _ = simulate(spec)
                roi = mmdi_invert(u).stiffness.values[32:-32, 32:-32]
                self.assertAlmostEqual(float(roi.mean()), mu, delta=0.1 * mu)

    def test_stiff_inclusion_reads_stiffer(self):
        spec = PhantomSpec(
            side_mm=128.0,
            spacing_mm=1.0,
            background_mu=2000.0,
            background_damping=0.1,
            excitation=Excitation(edge=Edge.LEFT, amplitude=0.5),
            inclusions=(Inclusion(center=(64.0, 64.0), radius=20.0, mu=8000.0, damping=0.1),),
        )
        u, _ = simulate(spec)
        mu = mmdi_invert(u).stiffness.values

        x = np.arange(129.0)
        disc = (x[None, :] - 64.0) ** 2 + (x[:, None] - 64.0) ** 2 <= 20.0 ** 2
        inside = ndimage.binary_erosion(disc, iterations=3)
        outside = ~ndimage.binary_dilation(disc, iterations=3)
        outside[:8] = outside[-8:] = False
        outside[:, :8] = outside[:, -8:] = False
        self.assertGreater(mu[inside].mean(), mu[outside].mean())


class FillInvalidTests(SimpleTestCase):
    def test_nearest_valid_value(self):
        values = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 7.0]])
        valid = np.array([[False, False, True], [False, False, True]])
        filled = fill_invalid(values, valid)
        assert_allclose(filled[:, 1], [5.0, 7.0])
        assert_allclose(filled[:, 2], [5.0, 7.0])

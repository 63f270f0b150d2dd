import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from scipy import ndimage

from elastography.exceptions import ValidationError
from elastography.fields import ScalarField
from elastography.services.phantom_service import Edge, Excitation, Inclusion, PhantomSpec
from elastography.services.wave_solver import (
    BoundaryCondition,
    ComplexModulusField,
    angular_frequency,
    assemble,
    median_wavelength,
    relative_residual,
    simulate,
    solve,
    zero_crossing_wavelength,
)

RHO = 1000.0
FREQ = 60.0


def _homogeneous(mu=4000.0, damping=0.1, amplitude=0.5, side=128.0, spacing_mm=1.0, edge=Edge.LEFT, **kwargs):
    return PhantomSpec(
        side_mm=side,
        spacing_mm=spacing_mm,
        background_mu=mu,
        background_damping=damping,
        excitation=Excitation(edge=edge, amplitude=amplitude),
        **kwargs,
    )


def _modulus(mu, damping, shape, spacing=1.0):
    return ComplexModulusField(np.full(shape, mu * (1 + 1j * damping)), spacing)


def _plane_wave_wavelength(mu, damping, spacing):
    """Solve with a travelling plane wave prescribed on every edge; measure along the middle row."""
    n = int(round(128.0 / spacing)) + 1
    mu_star = mu * (1 + 1j * damping)
    k = angular_frequency(FREQ) * np.sqrt(RHO / mu_star) * 1e-3  # 1/mm
    x = np.arange(n) * spacing
    exact = np.tile(np.exp(-1j * k * x), (n, 1))
    system = assemble(_modulus(mu, damping, (n, n), spacing), RHO, FREQ, BoundaryCondition.from_values(exact))
    u = solve(system)
    return zero_crossing_wavelength(u.values[n // 2].real, spacing)


class AssembleTests(SimpleTestCase):
    def test_homogeneous_stencil(self):
        mu_star = 4000.0 * (1 + 0.1j)
        system = assemble(_modulus(4000.0, 0.1, (16, 16)), RHO, FREQ, BoundaryCondition.fixed())
        coef = mu_star / 1e-6
        mass = RHO * angular_frequency(FREQ) ** 2
        centre = 4 * 14 + 4  # node (5, 5)
        self.assertEqual(system.size, 14 * 14)
        self.assertTrue(np.isclose(system.matrix[centre, centre], mass - 4 * coef, rtol=1e-12))
        self.assertTrue(np.isclose(system.matrix[centre, centre + 1], coef, rtol=1e-12))
        self.assertTrue(np.isclose(system.matrix[centre, centre + 14], coef, rtol=1e-12))

    def test_interface_uses_harmonic_mean(self):
        values = np.full((16, 16), 2000.0 * (1 + 0.1j))
        values[:, 8:] = 8000.0 * (1 + 0.1j)
        system = assemble(ComplexModulusField(values, 1.0), RHO, FREQ, BoundaryCondition.fixed())
        node = 4 * 14 + 6  # node (5, 7); its right neighbour is (5, 8)
        expected = 3200.0 * (1 + 0.1j) / 1e-6
        self.assertTrue(np.isclose(system.matrix[node, node + 1], expected, rtol=1e-12))

    def test_grid_below_minimum(self):
        with self.assertRaises(ValidationError):
            assemble(_modulus(4000.0, 0.1, (10, 10)), RHO, FREQ, BoundaryCondition.fixed())

    def test_modulus_range_enforced(self):
        with self.assertRaises(ValidationError):
            _modulus(500.0, 0.1, (16, 16))
        with self.assertRaises(ValidationError):
            _modulus(4000.0, 0.5, (16, 16))

    def test_modulus_from_maps(self):
        mu = ScalarField(np.full((16, 16), 2000.0))
        damping = ScalarField(np.full((16, 16), 0.2))
        mu_star = ComplexModulusField.from_maps(mu, damping)
        self.assertTrue(np.isclose(mu_star.values[3, 3], 2000.0 + 400.0j))


class BoundaryConditionTests(SimpleTestCase):
    def test_segment_profile(self):
        exc = Excitation(edge=Edge.LEFT, amplitude=0.5, segment_mm=(32.0, 64.0))
        bc = BoundaryCondition.from_excitation(exc, (129, 129), 1.0)
        grid = bc.boundary_values((129, 129))
        self.assertEqual(np.count_nonzero(grid[:, 0]), 33)
        self.assertEqual(grid[40, 0], 0.5)
        self.assertEqual(grid[10, 0], 0.0)
        self.assertEqual(bc.excited_edges(), [Edge.LEFT])

    def test_edge_length_mismatch(self):
        bc = BoundaryCondition.from_values(np.ones((20, 20)))
        with self.assertRaises(ValidationError):
            bc.boundary_values((16, 16))


class SolveTests(SimpleTestCase):
    def test_zero_excitation_gives_zero_field(self):
        system = assemble(_modulus(4000.0, 0.1, (20, 20)), RHO, FREQ, BoundaryCondition.fixed())
        u = solve(system)
        self.assertFalse(np.any(u.values))

    def test_residual_below_tolerance(self):
        exc = Excitation(edge=Edge.TOP, amplitude=0.5)
        system = assemble(
            _modulus(3000.0, 0.1, (40, 40)), RHO, FREQ, BoundaryCondition.from_excitation(exc, (40, 40), 1.0)
        )
        u = solve(system)
        self.assertLessEqual(relative_residual(system, u.values[1:-1, 1:-1].ravel()), 1e-8)
        assert_allclose(u.values[0, :], 0.5)

    def test_response_is_linear_in_amplitude(self):
        u1, _ = simulate(_homogeneous(amplitude=0.3, side=64.0))
        u2, _ = simulate(_homogeneous(amplitude=0.6, side=64.0))
        assert_allclose(u2.values, 2.0 * u1.values, rtol=1e-6, atol=1e-12)

    def test_simulate_resamples(self):
        u, mu = simulate(_homogeneous(side=64.0, spacing_mm=0.5), output_spacing=1.0)
        self.assertEqual(u.shape, (65, 65))
        self.assertEqual(mu.shape, (65, 65))
        self.assertEqual(u.spacing, 1.0)


class WavePhysicsTests(SimpleTestCase):
    def _interior(self, n, margin=3):
        mask = np.zeros((n, n), dtype=bool)
        mask[margin:-margin, margin:-margin] = True
        return mask

    def test_homogeneous_wavelength(self):
        for mu, expected in ((4000.0, 33.3), (1000.0, 16.7)):
            u, _ = simulate(_homogeneous(mu=mu, damping=0.05))
            wavelength = median_wavelength(u, self._interior(129), scale=1)
            self.assertAlmostEqual(wavelength, expected, delta=1.0)

    def test_zero_crossings_converge_with_refinement(self):
        coarse = _plane_wave_wavelength(4000.0, 0.05, 1.0)
        fine = _plane_wave_wavelength(4000.0, 0.05, 0.5)
        self.assertAlmostEqual(coarse, 33.3, delta=1.0)
        self.assertLess(abs(coarse - fine) / fine, 0.005)

    def test_stiff_inclusion_doubles_wavelength(self):
        inc = Inclusion(center=(64.0, 64.0), radius=20.0, mu=8000.0, damping=0.1)
        spec = _homogeneous(mu=2000.0, damping=0.1, inclusions=(inc,))
        u, _ = simulate(spec)

        x = np.arange(129.0)
        disc = (x[None, :] - 64.0) ** 2 + (x[:, None] - 64.0) ** 2 <= 20.0 ** 2
        inside = ndimage.binary_erosion(disc, iterations=2)
        outside = ~ndimage.binary_dilation(disc, iterations=2) & self._interior(129)

        ratio = median_wavelength(u, inside, scale=1) / median_wavelength(u, outside, scale=1)
        self.assertAlmostEqual(ratio, 2.0, delta=0.1)

    def test_interface_keeps_displacement_and_flux_continuous(self):
        # soft left half (2 kPa), stiff right half (8 kPa); the interface lies between columns 127 and 128
        n, spacing, frequency = 257, 0.5, 30.0
        mu = np.full((n, n), 2000.0)
        mu[:, 128:] = 8000.0
        mu_star = ComplexModulusField(mu * (1 + 0.1j), spacing)
        bc = BoundaryCondition.from_excitation(Excitation(edge=Edge.LEFT, amplitude=0.5), (n, n), spacing)
        u = solve(assemble(mu_star, RHO, frequency, bc)).values[96:161]

        du_soft = u[:, 127] - u[:, 126]
        du_interface = u[:, 128] - u[:, 127]
        du_stiff = u[:, 129] - u[:, 128]
        flux_soft = mu_star.values[0, 0] * du_soft
        flux_stiff = mu_star.values[0, -1] * du_stiff

        # no displacement jump: the step across the interface is below the soft-side step
        self.assertLess(np.abs(du_interface).sum(), np.abs(du_soft).sum())
        # the strain kinks by roughly the stiffness ratio while mu * du/dx carries across
        self.assertLess(np.abs(du_stiff).sum(), 0.5 * np.abs(du_soft).sum())
        self.assertLess(np.abs(flux_stiff - flux_soft).sum(), 0.4 * np.abs(flux_soft).sum())

    def test_damping_attenuates_far_field(self):
        far = np.s_[1:-1, 96:-1]
        light, _ = simulate(_homogeneous(damping=0.05))
        heavy, _ = simulate(_homogeneous(damping=0.3))
        self.assertLess(np.abs(heavy.values[far]).mean(), np.abs(light.values[far]).mean())

    def test_zero_crossing_needs_two_crossings(self):
        with self.assertRaises(ValidationError):
            zero_crossing_wavelength(np.ones(10), 1.0)

    def test_zero_crossing_of_sampled_cosine(self):
        x = np.arange(200) * 0.5
        wavelength = zero_crossing_wavelength(np.cos(2 * math.pi * x / 20.0 + 0.3), 0.5)
        self.assertAlmostEqual(wavelength, 20.0, delta=0.05)

"""Grid geometry, projection, gradients and norms."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import TWO_PI, random_velocity, rel, shear
from lssm.errors import DataCorruptionError, GridMismatchError, ParameterError
from lssm.field import (
    Grid,
    GradientTensor,
    SpectralVelocity,
    energy_spectrum,
    full_from_half,
    gradient,
    grad_l2_sq,
    half_from_full,
    inner_product,
    norm_l2_sq,
    norm_lr_r,
    project_divergence_free,
    to_physical,
    to_spectral,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


class TestGrid:
    def test_geometry(self):
        g = Grid(16, 3.0)
        assert g.volume == 27.0
        assert g.dx == 3.0 / 16
        assert g.lambda1 == pytest.approx((TWO_PI / 3.0) ** 2, rel=1e-15)
        assert g.spectral_shape == (16, 16, 9)

    def test_lambda1_is_one_on_two_pi_box(self, grid16):
        assert grid16.lambda1 == pytest.approx(1.0, rel=1e-15)

    @pytest.mark.parametrize("n", [2, 3, 7, 0, -4])
    def test_rejects_bad_n(self, n):
        with pytest.raises(ParameterError):
            Grid(n)

    @pytest.mark.parametrize("ell", [0.0, -1.0, math.inf, math.nan])
    def test_rejects_bad_ell(self, ell):
        with pytest.raises(ParameterError):
            Grid(8, ell)

    def test_dealias_cutoff(self):
        g = Grid(12)
        kx = np.broadcast_to(g.kappa[0], g.spectral_shape)
        assert np.all(np.abs(kx[g.dealias_mask]) <= 4)
        assert not np.any(g.dealias_mask & (np.abs(kx) > 4))


class TestTransforms:
    @settings(max_examples=20, deadline=None)
    @given(seed=seeds)
    def test_round_trip(self, seed):
        g = Grid(8)
        x = np.random.default_rng(seed).standard_normal((3,) + g.physical_shape)
        back = to_physical(g, to_spectral(g, x))
        assert np.max(np.abs(back - x)) <= 1e-12 * np.max(np.abs(x))

    def test_half_full_round_trip(self, grid16):
        u = random_velocity(grid16, 3)
        np.testing.assert_array_equal(half_from_full(grid16, full_from_half(grid16, u.coeffs)), u.coeffs)

    def test_shear_mode_samples(self, grid16):
        u = shear(grid16, 2.0).physical()
        x2 = np.broadcast_to(grid16.x[1], grid16.physical_shape)
        np.testing.assert_allclose(u[0], 2.0 * np.sin(x2), atol=1e-14)
        assert np.max(np.abs(u[1:])) == 0.0


class TestProjection:
    def test_longitudinal_mode_vanishes(self, grid16):
        v = SpectralVelocity.from_modes(grid16, [((1, 0, 0), (1.0, 0, 0), "sin")])
        assert np.max(np.abs(project_divergence_free(v).coeffs)) == 0.0

    def test_removes_component_along_kappa(self, grid16):
        v = SpectralVelocity.from_modes(grid16, [((1, 0, 0), (1.0, 1.0, 0), "sin")])
        want = SpectralVelocity.from_modes(grid16, [((1, 0, 0), (0.0, 1.0, 0), "sin")])
        np.testing.assert_allclose(project_divergence_free(v).coeffs, want.coeffs, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(seed=seeds)
    def test_idempotent(self, seed):
        g = Grid(8)
        x = np.random.default_rng(seed).standard_normal((3,) + g.physical_shape)
        p1 = SpectralVelocity.from_physical(g, x)
        p2 = project_divergence_free(p1)
        assert np.max(np.abs(p2.coeffs - p1.coeffs)) <= 1e-14 * np.max(np.abs(p1.coeffs))
        assert p1.divergence_residual() <= 1e-12
        p1.check()

    def test_rejects_non_finite(self, grid16):
        v = SpectralVelocity.zeros(grid16)
        v.coeffs[0, 1, 0, 0] = np.nan
        with pytest.raises(DataCorruptionError):
            project_divergence_free(v)


class TestGradient:
    def test_zero(self, grid16):
        assert np.max(np.abs(gradient(SpectralVelocity.zeros(grid16)).samples)) == 0.0

    def test_shear(self, grid16):
        G = gradient(shear(grid16)).samples
        x2 = np.broadcast_to(grid16.x[1], grid16.physical_shape)
        np.testing.assert_allclose(G[0, 1], np.cos(x2), atol=1e-12)
        others = np.delete(G.reshape(9, -1), 1, axis=0)
        assert np.max(np.abs(others)) <= 1e-12
        assert abs(np.max(np.abs(G[0, 1])) - 1.0) <= 1e-12

    @settings(max_examples=15, deadline=None)
    @given(seed=seeds)
    def test_trace_vanishes(self, seed):
        g = Grid(8)
        x = np.random.default_rng(seed).standard_normal((3,) + g.physical_shape)
        gt = gradient(SpectralVelocity.from_physical(g, x))
        assert np.all(np.abs(gt.trace()) <= 1e-10 * (gt.frobenius() + 1e-300) + 1e-14)


class TestNorms:
    def test_zero(self, grid16):
        z = SpectralVelocity.zeros(grid16)
        assert norm_l2_sq(z) == 0.0
        assert norm_lr_r(gradient(z), 3.7) == 0.0

    def test_shear_l2(self, grid16):
        u = shear(grid16)
        assert rel(norm_l2_sq(u), oracles.SIN2_BOX) <= 1e-12
        assert rel(norm_l2_sq(u.physical(), grid16), oracles.SIN2_BOX) <= 1e-12
        assert rel(grad_l2_sq(u), oracles.COS2_BOX) <= 1e-12

    def test_shear_l3_of_gradient(self):
        g = Grid(64)
        val = norm_lr_r(gradient(shear(g)), 3)
        # the collocation sum of |cos|^3 is spectrally accurate on smooth data only;
        # |cos|^3 has a kink so the tolerance reflects the grid
        assert rel(val, oracles.ABS_COS3_BOX) <= 1e-3

    def test_lr_at_two_matches_l2(self, grid16):
        u = random_velocity(grid16, 11)
        assert rel(norm_lr_r(gradient(u), 2), grad_l2_sq(u)) <= 1e-12

    def test_lr_rejects_small_r(self, grid16):
        with pytest.raises(ParameterError):
            norm_lr_r(gradient(shear(grid16)), 1.5)

    @settings(max_examples=20, deadline=None)
    @given(seed=seeds)
    def test_parseval(self, seed):
        g = Grid(16)
        u = random_velocity(g, seed)
        assert rel(norm_l2_sq(u.physical(), g), norm_l2_sq(u)) <= 1e-10

    @settings(max_examples=20, deadline=None)
    @given(seed=seeds)
    def test_poincare(self, seed):
        g = Grid(16, 1.7)
        u = random_velocity(g, seed)
        assert g.lambda1 * norm_l2_sq(u) <= grad_l2_sq(u) * (1 + 1e-12)

    def test_against_direct_quadrature(self):
        rng = np.random.default_rng(5)
        g = Grid(16)
        modes = oracles.random_solenoidal_modes(rng, 12, 3)
        u_direct, g_direct = oracles.direct_samples(modes, 16)
        ref = oracles.quadrature_norms(u_direct, g_direct, g.ell, 3)
        u = SpectralVelocity.from_physical(g, u_direct)
        assert rel(norm_l2_sq(u), ref["l2"]) <= 1e-10
        assert rel(grad_l2_sq(u), ref["grad_l2"]) <= 1e-10
        assert rel(norm_lr_r(gradient(u), 3), ref["grad_lr"]) <= 1e-10


class TestInnerProduct:
    def test_self_is_norm(self, grid16):
        u = random_velocity(grid16, 2)
        assert rel(inner_product(u, u), norm_l2_sq(u)) <= 1e-12

    def test_orthogonal_modes(self, grid16):
        a = shear(grid16)
        b = SpectralVelocity.from_modes(grid16, [((0, 1, 0), (1.0, 0, 0), "cos")])
        c = SpectralVelocity.from_modes(grid16, [((0, 0, 2), (0, 1.0, 0), "sin")])
        assert abs(inner_product(a, b)) <= 1e-12
        assert abs(inner_product(a, c)) <= 1e-12

    def test_linearity(self, grid16):
        a = shear(grid16)
        assert rel(inner_product(a, 2 * a), 2 * oracles.SIN2_BOX) <= 1e-12

    def test_spectral_and_physical_agree(self, grid16):
        a, b = random_velocity(grid16, 1), random_velocity(grid16, 2)
        assert rel(inner_product(a.physical(), b.physical(), grid16), inner_product(a, b)) <= 1e-10

    def test_grid_mismatch(self, grid16):
        with pytest.raises(GridMismatchError):
            inner_product(shear(grid16), shear(Grid(8)))

    @settings(max_examples=20, deadline=None)
    @given(s1=seeds, s2=seeds)
    def test_cauchy_schwarz(self, s1, s2):
        g = Grid(8)
        a, b = random_velocity(g, s1, kmax=2), random_velocity(g, s2, kmax=2)
        assert abs(inner_product(a, b)) <= math.sqrt(norm_l2_sq(a) * norm_l2_sq(b)) * (1 + 1e-12)


class TestInvariants:
    def test_check_accepts_valid(self, grid16):
        random_velocity(grid16, 4).check()

    def test_check_rejects_mean(self, grid16):
        u = random_velocity(grid16, 4)
        u.coeffs[0, 0, 0, 0] = 1.0
        with pytest.raises(ParameterError):
            u.check()

    def test_check_rejects_divergence(self, grid16):
        u = SpectralVelocity.from_modes(grid16, [((1, 0, 0), (1.0, 0, 0), "sin")])
        with pytest.raises(ParameterError):
            u.check()

    def test_modes_outside_band_rejected(self, grid16):
        with pytest.raises(ParameterError):
            SpectralVelocity.from_modes(grid16, [((6, 0, 0), (0, 1.0, 0), "sin")])

    def test_spectrum_sums_to_energy(self, grid16):
        u = random_velocity(grid16, 9)
        _, e = energy_spectrum(u)
        assert rel(e.sum() * grid16.volume, norm_l2_sq(u)) <= 1e-12

    def test_gradient_tensor_max(self, grid16):
        gt = GradientTensor(grid16, np.zeros((3, 3) + grid16.physical_shape))
        assert gt.max_norm() == 0.0

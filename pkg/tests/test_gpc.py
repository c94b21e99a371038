import math
import warnings

import numpy as np
import pytest

from kinetic_apnn.collision import maxwell_kernel
from kinetic_apnn.gpc import (
    BandwidthViolation,
    QTooSmall,
    apply_coupled_collision,
    assemble_sg_coupling,
    assemble_sg_coupling_by_quadrature,
    build_gpc_basis,
    weighted_h1_energy,
    weighted_h1_energy_from_norms,
)
from kinetic_apnn.phase_space import (
    GridFunction,
    SpatialGrid,
    VelocityGrid,
    build_fluid_basis,
)


@pytest.fixture(scope="module")
def vgrid():
    return VelocityGrid(dim=1, n=32, v_max=8.0)


@pytest.fixture(scope="module")
def fbasis(vgrid):
    return build_fluid_basis(vgrid)


class TestChaosBasis:
    def test_legendre_closed_forms(self):
        # uniform on [-1, 1]: phi_1 = 1, phi_2 = sqrt(3) z,
        # phi_3 = (sqrt(5)/2)(3 z^2 - 1)   (Gram-Schmidt oracle)
        basis = build_gpc_basis(3, C_z=1.0)
        z = np.linspace(-1, 1, 7)
        vals = basis.eval(z)
        np.testing.assert_allclose(vals[:, 0], 1.0, atol=1e-13)
        np.testing.assert_allclose(vals[:, 1], math.sqrt(3) * z, atol=1e-13)
        np.testing.assert_allclose(
            vals[:, 2], math.sqrt(5) / 2 * (3 * z**2 - 1), atol=1e-12
        )

    def test_orthonormal_at_quadrature_precision(self):
        basis = build_gpc_basis(6, C_z=2.0)
        vals = basis.eval(basis.z_nodes)
        gram = vals.T @ (basis.z_weights[:, None] * vals)
        np.testing.assert_allclose(gram, np.eye(6), atol=1e-12)

    def test_constant_mode_normalized(self):
        for K in (1, 4):
            basis = build_gpc_basis(K, C_z=1.5)
            val = np.sum(basis.z_weights * basis.eval(basis.z_nodes)[:, 0] ** 2)
            assert val == pytest.approx(1.0, abs=1e-13)

    def test_sup_norm_growth_legendre(self):
        # normalized Legendre peaks at the edges like sqrt(2i - 1)
        basis = build_gpc_basis(6, C_z=1.0)
        assert basis.p_growth <= 0.5 + 0.1
        assert basis.p_growth >= 0.3

    def test_recurrence_matrix(self):
        basis = build_gpc_basis(4, C_z=1.0)
        Z = basis.recurrence_matrix()
        # <z phi_1, phi_2> = sqrt(3) <z^2> = 1/sqrt(3)
        assert Z[0, 1] == pytest.approx(1 / math.sqrt(3), abs=1e-13)
        np.testing.assert_allclose(Z, Z.T, atol=1e-13)
        np.testing.assert_allclose(np.diag(Z), 0.0, atol=1e-13)
        # strictly tridiagonal
        for i in range(4):
            for k in range(4):
                if abs(i - k) > 1:
                    assert abs(Z[i, k]) < 1e-13

    def test_custom_rule(self):
        # a symmetric two-point rule reproduces degree-1 orthonormality
        nodes = np.array([-0.5, 0.5])
        weights = np.array([0.5, 0.5])
        basis = build_gpc_basis(2, C_z=0.5, distribution="two-point",
                                rule=(nodes, weights))
        vals = basis.eval(nodes)
        gram = vals.T @ (weights[:, None] * vals)
        np.testing.assert_allclose(gram, np.eye(2), atol=1e-13)


class TestCoupling:
    def test_deterministic_kernel_diagonal(self, vgrid, fbasis):
        spec = maxwell_kernel(1)  # b1 = 0
        gpc = build_gpc_basis(4)
        cpl = assemble_sg_coupling(spec, gpc, vgrid, fbasis)
        np.testing.assert_array_equal(cpl.chi, np.eye(4, dtype=bool))
        assert cpl.matrix(1, 2) is None
        np.testing.assert_allclose(cpl.matrix(2, 2), cpl.L0, atol=1e-14)

    def test_tridiagonal_for_linear_kernel(self, vgrid, fbasis):
        spec = maxwell_kernel(1, b1_strength=0.05)
        gpc = build_gpc_basis(5)
        cpl = assemble_sg_coupling(spec, gpc, vgrid, fbasis)
        for i in range(5):
            for k in range(5):
                if abs(i - k) > 1:
                    assert not cpl.chi[i, k]
        assert cpl.chi[0, 1] and cpl.chi[1, 0]

    def test_symmetric_pair_operators(self, vgrid, fbasis):
        spec = maxwell_kernel(1, b1_strength=0.05)
        gpc = build_gpc_basis(3)
        cpl = assemble_sg_coupling(spec, gpc, vgrid, fbasis)
        np.testing.assert_allclose(cpl.matrix(1, 2), cpl.matrix(2, 1), atol=1e-13)

    def test_apply_matches_dense_sum(self, vgrid, fbasis):
        spec = maxwell_kernel(1, b1_strength=0.08)
        gpc = build_gpc_basis(3)
        cpl = assemble_sg_coupling(spec, gpc, vgrid, fbasis)
        rng = np.random.default_rng(0)
        g = rng.standard_normal((3, 5, vgrid.n_total))
        got = apply_coupled_collision(cpl, g)
        dense = np.zeros_like(g)
        for i in range(3):
            for k in range(3):
                Lik = cpl.z_factor[i, k] * cpl.L1 + (np.eye(1)[0, 0] * cpl.L0
                                                     if i == k else 0.0)
                dense[i] += g[k] @ Lik.T
        np.testing.assert_allclose(got, dense, atol=1e-14)

    def test_zero_modes_zero_output(self, vgrid, fbasis):
        spec = maxwell_kernel(1, b1_strength=0.05)
        gpc = build_gpc_basis(3)
        cpl = assemble_sg_coupling(spec, gpc, vgrid, fbasis)
        out = apply_coupled_collision(cpl, np.zeros((3, vgrid.n_total)))
        assert np.all(out == 0)

    def test_decoupled_modes_for_deterministic_kernel(self, vgrid, fbasis):
        spec = maxwell_kernel(1)
        gpc = build_gpc_basis(3)
        cpl = assemble_sg_coupling(spec, gpc, vgrid, fbasis)
        rng = np.random.default_rng(1)
        g = rng.standard_normal((3, vgrid.n_total))
        out = apply_coupled_collision(cpl, g)
        for i in range(3):
            np.testing.assert_allclose(out[i], g[i] @ cpl.L0.T, atol=1e-14)

    def test_single_mode_reduces_to_deterministic(self, vgrid, fbasis):
        # K = 1 with a z-independent kernel is the deterministic operator
        from kinetic_apnn.collision import assemble_boltzmann_matrix

        spec = maxwell_kernel(1)
        gpc = build_gpc_basis(1)
        cpl = assemble_sg_coupling(
            spec, gpc, vgrid, fbasis, backend="boltzmann-quadrature"
        )
        det = assemble_boltzmann_matrix(spec, vgrid, basis=fbasis)
        assert np.max(np.abs(cpl.matrix(1, 1) - det.matrix)) <= 1e-12

    def test_block_operator_self_adjoint_nonpositive(self, vgrid, fbasis):
        spec = maxwell_kernel(1, b1_strength=0.05)
        gpc = build_gpc_basis(3)
        cpl = assemble_sg_coupling(
            spec, gpc, vgrid, fbasis, backend="boltzmann-quadrature"
        )
        B = cpl.block()
        w = np.tile(vgrid.weights, 3)
        Bt = (B.T * w[None, :]) / w[:, None]
        assert np.linalg.norm(B - Bt) <= 1e-10
        rng = np.random.default_rng(2)
        for _ in range(50):
            h = rng.standard_normal(B.shape[0])
            assert float(np.sum(w * (B @ h) * h)) <= 1e-10

    def test_analytic_vs_quadrature_fallback(self, vgrid, fbasis):
        spec = maxwell_kernel(1, b1_strength=0.05)
        gpc = build_gpc_basis(3)
        cpl = assemble_sg_coupling(
            spec, gpc, vgrid, fbasis, backend="boltzmann-quadrature"
        )
        blocks, chi = assemble_sg_coupling_by_quadrature(
            spec, gpc, vgrid, fbasis, backend="boltzmann-quadrature"
        )
        for i in range(3):
            for k in range(3):
                analytic = cpl.matrix(i + 1, k + 1)
                if analytic is None:
                    analytic = np.zeros_like(blocks[i, k])
                assert np.max(np.abs(blocks[i, k] - analytic)) <= 1e-10

    def test_nonlinear_profile_violates_bandwidth(self, vgrid, fbasis):
        spec = maxwell_kernel(1, b1_strength=0.05)
        gpc = build_gpc_basis(4)
        with pytest.raises(BandwidthViolation):
            assemble_sg_coupling_by_quadrature(
                spec, gpc, vgrid, fbasis, backend="bgk-surrogate",
                z_profile=lambda z: z**2,
            )

    def test_csv_export(self, vgrid, fbasis, tmp_path):
        spec = maxwell_kernel(1, b1_strength=0.05)
        gpc = build_gpc_basis(3)
        cpl = assemble_sg_coupling(spec, gpc, vgrid, fbasis)
        cpl.export_csv(tmp_path / "chi.csv", tmp_path / "zfac.csv")
        chi = np.loadtxt(tmp_path / "chi.csv", delimiter=",")
        assert chi.shape == (3, 3)


class TestEnergy:
    def test_single_mode(self, vgrid):
        sg = SpatialGrid(dim=1, n=8)
        rng = np.random.default_rng(3)
        h = GridFunction(rng.standard_normal((8, vgrid.n_total)), sg, vgrid)
        from kinetic_apnn.phase_space import h1_norm_squared

        assert weighted_h1_energy([h], q=5) == pytest.approx(h1_norm_squared(h))

    def test_two_modes_weighting(self):
        # unit H1 norms with q = 3: total 1 + 2^6 = 65
        assert weighted_h1_energy_from_norms([1.0, 1.0], q=3) == pytest.approx(65.0)

    def test_quadratic_scaling(self, vgrid):
        sg = SpatialGrid(dim=1, n=8)
        rng = np.random.default_rng(4)
        mats = rng.standard_normal((2, 8, vgrid.n_total))
        modes = [GridFunction(m, sg, vgrid) for m in mats]
        scaled = [GridFunction(3.0 * m, sg, vgrid) for m in mats]
        assert weighted_h1_energy(scaled, q=3) == pytest.approx(
            9.0 * weighted_h1_energy(modes, q=3), rel=1e-12
        )

    def test_q_warning(self):
        with pytest.warns(QTooSmall):
            weighted_h1_energy_from_norms([1.0], q=2, p_growth=0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            weighted_h1_energy_from_norms([1.0], q=3, p_growth=0.5)

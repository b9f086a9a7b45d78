import math

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from conftest import bar_spec, plate_spec
from pdkl.errors import ConfigError, DivergenceError, NumericalError
from pdkl.fem import (
    BoundaryDrive,
    MicroState,
    assemble,
    boundary_dofs,
    build_mesh,
    cfl_timestep,
    explicit_dynamics,
    plane_stress_matrix,
    q4_stiffness,
    unit_cell_energy_density,
)


def solve_dirichlet(K, prescribed: dict, f=None):
    """Static solve with prescribed DOF values."""
    n = K.shape[0]
    u = np.zeros(n)
    fixed = np.array(sorted(prescribed))
    u[fixed] = [prescribed[i] for i in fixed]
    free = np.setdiff1d(np.arange(n), fixed)
    rhs = -(K[free][:, fixed] @ u[fixed])
    if f is not None:
        rhs = rhs + f[free]
    u[free] = spla.spsolve(K[free][:, free].tocsc(), rhs)
    return u


class TestMesh:
    def test_counts(self):
        m1 = build_mesh(bar_spec(), 40)
        assert len(m1.elements) == 2000 and m1.n_nodes == 2001
        m2 = build_mesh(plate_spec(), 12)
        assert m2.elements_per_side == 360 and len(m2.elements) == 360 * 360

    @pytest.mark.parametrize("spec,epc", [(bar_spec(), 10), (plate_spec(), 10)])
    def test_divisibility(self, spec, epc):
        with pytest.raises(ConfigError):
            build_mesh(spec, epc)

    def test_phase_assignment(self):
        mesh = build_mesh(bar_spec(n_cells=10), 4)
        assert mesh.compliant[:8].tolist() == [False, True, True, False] * 2


class TestAssembly:
    def test_single_bar_element(self):
        with pytest.warns(UserWarning):
            spec = bar_spec(n_cells=1, E_s=1.0, E_c=1.0, rho=1.0, length=1.0)
        mesh = build_mesh(spec, 4)
        K, _ = assemble(mesh)
        h = mesh.h
        assert np.allclose(K.toarray()[:2, :2] * h, [[1, -1], [-1, 2]])

    def test_symmetry_and_rigid_body(self):
        for spec, epc in ((bar_spec(n_cells=10), 8), (plate_spec(n_cells=3), 6)):
            mesh = build_mesh(spec, epc)
            K, M = assemble(mesh)
            assert abs(K - K.T).max() < 1e-12 * abs(K).max()
            assert np.all(M > 0)
            if mesh.dimension == 1:
                assert np.abs(K @ np.ones(mesh.n_dofs)).max() < 1e-9 * abs(K).max()
            else:
                for c in (0, 1):
                    t = np.zeros(mesh.n_dofs)
                    t[c::2] = 1.0
                    assert np.abs(K @ t).max() < 1e-9 * abs(K).max()

    def test_lumped_mass_total(self):
        spec = plate_spec(n_cells=3)
        _, M = assemble(build_mesh(spec, 3))
        assert M[0::2].sum() == pytest.approx(spec.density * spec.domain_length**2)

    def test_patch_tip_displacement(self):
        spec = bar_spec(n_cells=10, E_s=3e9, E_c=3e9)
        mesh = build_mesh(spec, 8)
        K, _ = assemble(mesh)
        f = np.zeros(mesh.n_dofs)
        f[-1] = 1e5
        u = solve_dirichlet(K, {0: 0.0}, f)
        assert u[-1] == pytest.approx(1e5 * 1.0 / 3e9, rel=1e-12)

    def test_two_phase_bar_exact_at_nodes(self):
        spec = bar_spec(n_cells=10)
        mesh = build_mesh(spec, 8)
        K, _ = assemble(mesh)
        u = solve_dirichlet(K, {0: 0.0, mesh.n_nodes - 1: 1e-3})
        # uniform stress sigma = E_hom * strain
        from pdkl.microstructure import homogenized_modulus_1d

        sigma = homogenized_modulus_1d(spec) * 1e-3 / spec.domain_length
        E = mesh.youngs
        x = mesh.nodes[:, 0]
        exact = np.concatenate([[0.0], np.cumsum(sigma / E * np.diff(x))])
        assert np.abs(u - exact).max() < 1e-12 * 1e-3 * 10

    def test_uniform_extension_stress(self):
        s, E, nu = 1e-3, 200e9, 1 / 3
        ke = q4_stiffness(E, 1.0)
        # nodes (0,0) (1,0) (1,1) (0,1)
        xy = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        u = (s * xy).ravel()
        # stress via B at centre
        from pdkl.fem import _q4_B

        stress = plane_stress_matrix(E, nu) @ (_q4_B(0.0, 0.0, 1.0) @ u)
        assert stress[0] == pytest.approx(E * s / (1 - nu), rel=1e-10)
        assert stress[1] == pytest.approx(E * s / (1 - nu), rel=1e-10)
        assert abs(stress[2]) < 1e-10 * E * s
        # energy consistency: 1/2 u K u = W * area
        assert 0.5 * u @ ke @ u == pytest.approx(1.5 * E * s * s, rel=1e-12)

    def test_static_convergence_order(self):
        spec = plate_spec(n_cells=1, E_s=1.0, E_c=1.0, rho=1.0)

        def field(x, y):
            return 1e-3 * np.sin(np.pi * x) * (1 + y * y), 1e-3 * np.cos(np.pi * y) * x

        sols = {}
        for epc in (6, 12, 24, 48):
            mesh = build_mesh(spec, epc)
            K, _ = assemble(mesh)
            b = mesh.boundary_nodes()
            ux, uy = field(mesh.nodes[b, 0], mesh.nodes[b, 1])
            pres = dict(zip(2 * b, ux)) | dict(zip(2 * b + 1, uy))
            sols[epc] = solve_dirichlet(K, pres).reshape(-1, 2)

        def coarse_view(u, epc):
            n = 48 // epc
            return u.reshape(49, 49, 2)[::n, ::n].reshape(-1, 2)

        errs = [np.abs(sols[e] - coarse_view(sols[48], e)).max() for e in (6, 12)]
        errs.append(np.abs(sols[24] - coarse_view(sols[48], 24)).max())
        order = math.log2(errs[0] / errs[1])
        assert order > 1.8


class TestCFL:
    def test_one_dof(self):
        K = sp.csr_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        dt = cfl_timestep(K, np.array([0.5, 0.5]), free=np.array([False, True]))
        assert dt == pytest.approx(math.sqrt(2), rel=1e-6)

    def test_uniform_bar_and_refinement(self):
        spec = bar_spec(n_cells=10, E_c=200e9)
        dts = []
        for epc in (8, 16):
            mesh = build_mesh(spec, epc)
            K, M = assemble(mesh)
            dts.append(cfl_timestep(K, M))
        c = math.sqrt(200e9 / 8000)
        assert dts[0] == pytest.approx(build_mesh(spec, 8).h / c, rel=0.01)
        assert dts[1] / dts[0] == pytest.approx(0.5, rel=0.05)

    def test_nonconvergence(self):
        K = sp.csr_matrix(np.diag([1.0, 2.0, 3.0]))
        with pytest.raises(NumericalError, match="did not converge"):
            cfl_timestep(K, np.ones(3), max_iter=1)


class TestDrive:
    def test_peak_and_cutoff(self):
        d = BoundaryDrive("PolynomialPulse", 1e-2, 1.57e-4)
        assert d.displacement(0.0) == 0.0
        assert d.displacement(1.57e-4 / 2) == pytest.approx(1e-2, rel=1e-12)
        assert d.displacement(2e-4) == 0.0

    def test_derivatives(self):
        for kind in ("PolynomialPulse", "SinusoidalBurst"):
            d = BoundaryDrive(kind, 1e-2, 1.57e-4)
            t, h = 0.3e-4, 1e-10
            assert d.velocity(t) == pytest.approx((d.displacement(t + h) - d.displacement(t - h)) / (2 * h), rel=1e-5)
            assert d.acceleration(t) == pytest.approx((d.velocity(t + h) - d.velocity(t - h)) / (2 * h), rel=1e-5)

    def test_components(self):
        assert BoundaryDrive("Shear2D", 1.0, 1.0).component == 1
        assert BoundaryDrive("Extension2D", 1.0, 1.0).component == 0


class TestExplicitDynamics:
    def test_zero_drive(self):
        mesh = build_mesh(bar_spec(n_cells=10), 4)
        K, M = assemble(mesh)
        d = BoundaryDrive("PolynomialPulse", 0.0, 1e-4)
        fx, dr = boundary_dofs(mesh, d)
        st = explicit_dynamics(K, M, d, 1e-4, 1e-6, fixed_dofs=fx, driven_dofs=dr)
        assert not np.any(st.displacement) and not np.any(st.acceleration)

    def test_spring_mass_energy(self):
        k, m = 4.0, 1.0
        K = sp.csr_matrix([[k]])
        M = np.array([m])
        dt = 0.5 * cfl_timestep(K, M)
        period = 2 * math.pi / math.sqrt(k / m)
        n = int(100 * period / dt)
        d = BoundaryDrive("PolynomialPulse", 0.0, 1.0)
        st = explicit_dynamics(K, M, d, n * dt, dt, dt=dt, u_init=np.array([1.0]))
        u = st.displacement[:, 0]
        # leapfrog's conserved energy uses staggered velocities
        v_half = np.diff(u) / dt
        energy = 0.5 * m * v_half**2 + 0.5 * k * u[:-1] * u[1:]
        assert np.abs(energy / energy[0] - 1).max() < 1e-3

    def test_residual_acceleration(self):
        mesh = build_mesh(bar_spec(n_cells=10), 4)
        K, M = assemble(mesh)
        d = BoundaryDrive("PolynomialPulse", 1e-3, 4e-5)
        fx, dr = boundary_dofs(mesh, d)
        st = explicit_dynamics(K, M, d, 1e-4, 1e-6, fixed_dofs=fx, driven_dofs=dr)
        free = np.setdiff1d(np.arange(mesh.n_dofs), np.concatenate([fx, dr]))
        res = M[free] * st.acceleration[:, free] + (K @ st.displacement.T).T[:, free]
        assert np.abs(res).max() < 1e-9 * np.abs(M[free] * st.acceleration[:, free]).max()
        assert np.allclose(st.displacement[:, dr[0]], d.displacement(st.times), rtol=0, atol=1e-18)

    def test_energy_balance(self):
        mesh = build_mesh(bar_spec(), 8)
        K, M = assemble(mesh)
        d = BoundaryDrive("PolynomialPulse", 1e-2, 1.57e-4)
        fx, dr = boundary_dofs(mesh, d)
        free = np.ones(mesh.n_dofs, bool)
        free[fx] = free[dr] = False
        dt = 0.5 * cfl_timestep(K, M, free=free)
        st = explicit_dynamics(K, M, d, 1600 * dt, dt, dt=dt, fixed_dofs=fx, driven_dofs=dr)
        U, V, A = st.displacement, st.velocity, st.acceleration
        KU = (K @ U.T).T
        energy = 0.5 * (V**2 * M).sum(1) + 0.5 * np.einsum("ti,ti->t", U, KU)
        power = (M * A + KU)[:, dr[0]] * V[:, dr[0]]
        work = np.concatenate([[0.0], np.cumsum(0.5 * (power[1:] + power[:-1]) * dt)])
        assert np.abs(energy - work).max() < 0.01 * energy.max()

    def test_wave_speed(self):
        spec = bar_spec(E_c=200e9)
        mesh = build_mesh(spec, 40)
        K, M = assemble(mesh)
        Ts = 2e-5
        d = BoundaryDrive("PolynomialPulse", 1e-3, Ts)
        fx, dr = boundary_dofs(mesh, d)
        st = explicit_dynamics(K, M, d, 1.5e-4, 1e-7, fixed_dofs=fx, driven_dofs=dr)
        mid = mesh.n_nodes // 2
        k = int(np.argmax(st.displacement[:, mid]))
        # parabolic refinement of the peak time
        y0, y1, y2 = st.displacement[k - 1 : k + 2, mid]
        t_peak = st.times[k] + 1e-7 * 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2)
        c = 0.5 / (t_peak - Ts / 2)
        assert c == pytest.approx(math.sqrt(200e9 / 8000), rel=0.01)

    def test_divergence(self):
        mesh = build_mesh(bar_spec(n_cells=10), 4)
        K, M = assemble(mesh)
        d = BoundaryDrive("PolynomialPulse", 1e-3, 4e-5)
        fx, dr = boundary_dofs(mesh, d)
        dt_c = cfl_timestep(K, M)
        with pytest.raises(DivergenceError, match="dt="):
            explicit_dynamics(K, M, d, 2000 * 3 * dt_c, 3 * dt_c, dt=3 * dt_c, fixed_dofs=fx, driven_dofs=dr)

    def test_observe_matches_postprocessing(self):
        spec = plate_spec(n_cells=3)
        mesh = build_mesh(spec, 3)
        K, M = assemble(mesh)
        from pdkl.coarse import cell_average_operator

        P = cell_average_operator(mesh, spec)
        d = BoundaryDrive("Extension2D", 1e-3, 2e-5)
        fx, dr = boundary_dofs(mesh, d)
        full = explicit_dynamics(K, M, d, 5e-5, 1e-6, fixed_dofs=fx, driven_dofs=dr)
        obs = explicit_dynamics(K, M, d, 5e-5, 1e-6, fixed_dofs=fx, driven_dofs=dr, observe=P)
        assert obs.basis == "cell_average"
        assert np.allclose(obs.displacement, (P @ full.displacement.T).T, rtol=1e-12, atol=0)

    def test_state_roundtrip(self, tmp_path):
        st = MicroState(np.arange(3.0), np.ones((3, 2)), np.zeros((3, 2)), np.full((3, 2), 2.0), dt=0.5, meta={"a": 1})
        st.save(tmp_path / "s.npz")
        back = MicroState.load(tmp_path / "s.npz")
        assert np.array_equal(back.acceleration, st.acceleration) and back.meta == {"a": 1} and back.dt == 0.5


class TestUnitCellEnergy:
    def test_homogeneous(self):
        spec = plate_spec(E_c=200e9)
        assert unit_cell_energy_density(spec, 1e-3, 6) == pytest.approx(1.5 * 200e9 * 1e-6, rel=1e-12)

    def test_zero_and_scaling(self):
        spec = plate_spec()
        assert unit_cell_energy_density(spec, 0.0, 6) == 0.0
        w1 = unit_cell_energy_density(spec, 1e-3, 6)
        assert unit_cell_energy_density(spec, 2e-3, 6) == pytest.approx(4 * w1, rel=1e-12)

    def test_inclusion_softens(self):
        spec = plate_spec()
        assert unit_cell_energy_density(spec, 1.0, 6) < 1.5 * 200e9

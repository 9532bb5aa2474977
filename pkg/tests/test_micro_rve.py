"""RVE coupling, micro Newton, averaging and stiffness transfer."""

import numpy as np
import numpy.testing as npt
import pytest

from fehmm.fem_core import Assembler, SaddleFactor, element_tangent
from fehmm.material import (DeformationState, homogeneous, neo_hookean,
                            two_phase)
from fehmm.mesh import (PhaseGrid, generate_structured, mesh_from_phase_grid,
                        pair_periodic_nodes, refine_uniform)
from fehmm.micro_rve import (LINEAR_DISPLACEMENT, PERIODIC, RveProblem,
                             build_constraints, build_transformation_matrix,
                             average_deformation_gradient, linearize_macro,
                             macro_element_stiffness, macro_stress,
                             micro_newton_step, solve_micro, unit_state_fields)


def checkerboard(n):
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    return PhaseGrid(n, n, (1 + (ix + iy) % 2).ravel().copy())


def laminate_rows(n):
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    return PhaseGrid(n, n, (1 + iy % 2).ravel().copy())


class TestLinearizeMacro:
    def test_translation_only(self):
        coords = np.random.default_rng(0).uniform(0, 1, (7, 2))
        vals = linearize_macro([0.3, -0.5], np.zeros((2, 2)), coords, [0.5, 0.5])
        npt.assert_allclose(vals, np.tile([0.3, -0.5], (7, 1)))

    def test_corner_formula(self):
        H = np.array([[0.1, 0.2], [0.3, 0.4]])
        u0 = np.array([1.0, -1.0])
        c = np.array([0.5, 0.5])
        vals = linearize_macro(u0, H, np.array([[1.0, 1.0]]), c)
        npt.assert_allclose(vals[0], u0 + H @ (np.array([1.0, 1.0]) - c))

    def test_pair_differences_affine(self):
        mesh = generate_structured(1.0, 1.0, 4, 4)
        pairing = pair_periodic_nodes(mesh, 1.0)
        H = np.array([[0.04, 0.02], [-0.01, 0.03]])
        vals = linearize_macro([0.2, 0.1], H, mesh.nodes, [0.5, 0.5])
        for p, q in pairing.pairs:
            npt.assert_allclose(vals[q] - vals[p],
                                H @ (mesh.nodes[q] - mesh.nodes[p]), atol=1e-14)


class TestBuildConstraints:
    def test_single_element_rve_degenerates_to_kubc(self):
        mesh = generate_structured(1.0, 1.0, 1, 1)
        pairing = pair_periodic_nodes(mesh, 1.0)
        dbar = np.zeros((4, 2))
        cs = build_constraints(pairing, PERIODIC, dbar)
        assert cs.n_rows == 8
        assert len(pairing.pairs) == 0

    def test_2x2_constraint_count(self):
        mesh = generate_structured(1.0, 1.0, 2, 2)
        pairing = pair_periodic_nodes(mesh, 1.0)
        cs = build_constraints(pairing, PERIODIC, np.zeros((mesh.n_nodes, 2)))
        # 8 corner rows plus two dof rows per node pair
        assert cs.n_rows == 8 + 2 * len(pairing.pairs) == 12

    def test_full_row_rank(self):
        mesh = generate_structured(1.0, 1.0, 3, 3)
        pairing = pair_periodic_nodes(mesh, 1.0)
        cs = build_constraints(pairing, PERIODIC, np.zeros((mesh.n_nodes, 2)))
        G = cs.G.toarray()
        assert np.linalg.matrix_rank(G) == cs.n_rows

    def test_kubc_rows(self):
        mesh = generate_structured(1.0, 1.0, 2, 2)
        pairing = pair_periodic_nodes(mesh, 1.0)
        boundary = [n for n, xy in enumerate(mesh.nodes)
                    if np.isclose(xy, 0.0).any() or np.isclose(xy, 1.0).any()]
        cs = build_constraints(pairing, LINEAR_DISPLACEMENT,
                               np.zeros((mesh.n_nodes, 2)), boundary_nodes=boundary)
        assert cs.n_rows == 2 * len(boundary) == 16


class TestMicroNewton:
    def test_homogeneous_affine_is_exact(self):
        mat = homogeneous(law="neo-hookean", E=1000.0, nu=0.25)
        rve = RveProblem(generate_structured(2.0, 2.0, 4, 4), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.1, -0.2], np.array([[0.06, 0.02], [0.01, -0.04]]))
        s, info = solve_micro(rve, s, tol=1e-12, max_iter=10)
        # affine predictor is the exact equilibrium: one multiplier solve only
        assert info.n_solves <= 1
        assert np.abs(s.fluct).max() < 1e-11

    def test_equilibrium_is_fixed_point(self):
        mat = two_phase(law="neo-hookean")
        rve = RveProblem(refine_uniform(mesh_from_phase_grid(checkerboard(4), 1.0)), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.0, 0.0], np.array([[0.03, 0.05], [0.0, -0.02]]))
        s, _ = solve_micro(rve, s, tol=1e-12, max_iter=20)
        D_before = s.D.copy()
        s, rnorm = micro_newton_step(rve, s)
        assert rnorm <= rve.noise_floor(s)
        assert np.abs(s.D - D_before).max() < 1e-9

    def test_linear_small_converges_in_one_solve(self):
        mat = two_phase(law="linear", kinematics="small")
        rve = RveProblem(mesh_from_phase_grid(checkerboard(4), 1.0), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.0, 0.0], np.array([[0.02, 0.01], [0.0, -0.01]]))
        s, info = solve_micro(rve, s, tol=1e-12, max_iter=5)
        assert info.n_solves == 1

    def test_quadratic_tail_two_phase(self):
        mat = two_phase(law="neo-hookean")
        rve = RveProblem(refine_uniform(mesh_from_phase_grid(checkerboard(4), 1.0)), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.0, 0.0], np.array([[0.0, 0.10], [0.0, 0.0]]))
        s, info = solve_micro(rve, s, tol=1e-10, max_iter=20)
        hist = info.history
        assert len(hist) >= 3
        rel = [h / hist[0] for h in hist]
        for r0, r1 in zip(rel[1:-1], rel[2:]):
            assert r1 <= 10.0 * r0 ** 2 + 1e-13

    def test_restart_costs_nothing(self):
        mat = two_phase(law="neo-hookean")
        rve = RveProblem(refine_uniform(mesh_from_phase_grid(checkerboard(4), 1.0)), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.0, 0.0], np.array([[0.02, 0.04], [0.0, -0.01]]))
        s, _ = solve_micro(rve, s, tol=1e-10, max_iter=20)
        rve.update_macro(s, s.macro_u0, s.macro_H)  # unchanged data
        s, info = solve_micro(rve, s, tol=1e-10, max_iter=20)
        assert info.n_solves == 0

    def test_fluctuation_satisfies_homogeneous_constraints(self):
        mat = two_phase(law="neo-hookean")
        rve = RveProblem(refine_uniform(mesh_from_phase_grid(checkerboard(4), 1.0)), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.1, 0.2], np.array([[0.03, 0.06], [0.01, -0.02]]))
        s, _ = solve_micro(rve, s, tol=1e-12, max_iter=20)
        gap = rve.constraints.G @ s.fluct
        assert np.abs(gap).max() < 1e-10


class TestAveraging:
    def test_affine_field_average(self):
        mat = homogeneous(law="neo-hookean", E=500.0, nu=0.2)
        rve = RveProblem(generate_structured(1.0, 1.0, 3, 3), mat)
        s = rve.make_state(1.0)
        A = np.array([[0.05, 0.01], [0.02, -0.03]])
        s.D = linearize_macro([0.0, 0.0], A, rve.mesh.nodes, rve.center).ravel()
        F = average_deformation_gradient(rve, s)
        npt.assert_allclose(F[:2, :2], np.eye(2) + A, rtol=1e-13)
        npt.assert_allclose(F[2, 2], 1.0)

    def test_zero_displacement(self):
        mat = homogeneous(law="linear", E=500.0, nu=0.2, kinematics="small")
        rve = RveProblem(generate_structured(1.0, 1.0, 2, 2), mat)
        s = rve.make_state(1.0)
        npt.assert_allclose(average_deformation_gradient(rve, s), np.eye(3))

    def test_pbc_average_matches_macro(self):
        mat = two_phase(law="neo-hookean")
        rve = RveProblem(refine_uniform(mesh_from_phase_grid(checkerboard(4), 1.0)), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.0, 0.0], np.array([[0.04, 0.08], [0.02, -0.03]]))
        s, _ = solve_micro(rve, s, tol=1e-12, max_iter=20)
        F = average_deformation_gradient(rve, s)
        npt.assert_allclose(F, s.macro_F, atol=1e-12)

    def test_macro_stress_homogeneous_identity(self):
        mat = homogeneous(law="neo-hookean", E=777.0, nu=0.21)
        rve = RveProblem(generate_structured(1.5, 1.5, 4, 4), mat)
        s = rve.make_state(1.0)
        H = np.array([[0.05, 0.03], [0.00, -0.02]])
        rve.update_macro(s, [0.0, 0.0], H)
        s, _ = solve_micro(rve, s, tol=1e-12, max_iter=10)
        SH, _ = macro_stress(rve, s)
        st = DeformationState.from_deformation_gradient(s.macro_F)
        npt.assert_allclose(SH, neo_hookean(st, mat.phases[1]).S,
                            rtol=1e-10, atol=1e-12)
        assert s.asym < 1e-12

    def test_macro_stress_zero_state(self):
        mat = two_phase(law="neo-hookean")
        rve = RveProblem(mesh_from_phase_grid(checkerboard(4), 1.0), mat)
        s = rve.make_state(1.0)
        SH, Sv = macro_stress(rve, s)
        npt.assert_allclose(SH, 0.0, atol=1e-12)


class TestLaminateModulus:
    def test_axial_modulus_matches_mixture_rule(self):
        """Layered RVE stretched along the layers: the plane-strain axial
        modulus is exactly the volume-weighted phase average when the
        Poisson ratios match."""
        E1, E2, nu = 100_000.0, 40_000.0, 0.2
        mat = two_phase(law="linear", kinematics="small")
        rve = RveProblem(mesh_from_phase_grid(laminate_rows(8), 1.0), mat)
        e = 1e-6
        C = np.zeros((3, 3))
        probes = [np.array([[e, 0.0], [0.0, 0.0]]),
                  np.array([[0.0, 0.0], [0.0, e]]),
                  np.array([[0.0, e / 2], [e / 2, 0.0]])]
        for j, H in enumerate(probes):
            s = rve.make_state(1.0)
            rve.update_macro(s, [0.0, 0.0], H)
            s, _ = solve_micro(rve, s, tol=1e-12, max_iter=5)
            _, Sv = macro_stress(rve, s)
            C[:, j] = Sv / e
        M_eff = C[0, 0] - C[0, 1] ** 2 / C[1, 1]
        M_voigt = 0.5 * (E1 + E2) / (1.0 - nu ** 2)
        npt.assert_allclose(M_eff, M_voigt, rtol=1e-3)


class TestTransformationMatrix:
    def _macro_qp(self):
        mesh = generate_structured(1000.0, 1000.0, 1, 1)
        a = Assembler(mesh, homogeneous(law="linear", kinematics="small"))
        return a.kernel.N[0], a.grads[0, 0]

    def test_columns_affine_for_homogeneous_zero_strain(self):
        mat = homogeneous(law="linear", kinematics="small")
        rve = RveProblem(generate_structured(2.0, 2.0, 3, 3), mat)
        s = rve.make_state(1.0)
        _, K, _ = rve.assemble(s)
        N, grads = self._macro_qp()
        T = build_transformation_matrix(rve, K, N, grads).T
        cols = unit_state_fields(rve, N, grads)
        npt.assert_allclose(T, cols, atol=1e-12)

    def test_translation_combination_is_constant(self):
        mat = two_phase(law="linear", kinematics="small")
        rve = RveProblem(mesh_from_phase_grid(checkerboard(4), 1.0), mat)
        s = rve.make_state(1.0)
        _, K, _ = rve.assemble(s)
        N, grads = self._macro_qp()
        T = build_transformation_matrix(rve, K, N, grads).T
        # unit x-translation: sum of x-direction unit states
        combo = T[:, 0::2].sum(axis=1)
        npt.assert_allclose(combo[0::2], 1.0, atol=1e-10)
        npt.assert_allclose(combo[1::2], 0.0, atol=1e-10)

    def test_columns_satisfy_constraints(self):
        mat = two_phase(law="neo-hookean")
        rve = RveProblem(refine_uniform(mesh_from_phase_grid(checkerboard(4), 1.0)), mat)
        s = rve.make_state(1.0)
        rve.update_macro(s, [0.0, 0.0], np.array([[0.02, 0.05], [0.0, -0.01]]))
        s, info = solve_micro(rve, s, tol=1e-10, max_iter=20)
        N, grads = self._macro_qp()
        T = build_transformation_matrix(rve, info.K, N, grads).T
        cols = unit_state_fields(rve, N, grads)
        for j in range(T.shape[1]):
            lhs = rve.constraints.G @ T[:, j]
            rhs = rve.constraint_rhs(cols[:, j].reshape(-1, 2))
            npt.assert_allclose(lhs, rhs, atol=1e-10)


class TestMacroElementStiffness:
    def _kh(self, rve, macro_mesh, mat, state=None):
        a = Assembler(macro_mesh, mat)
        s = rve.make_state(1.0) if state is None else state
        _, K, _ = rve.assemble(s)
        parts, tangents, weights = [], [], []
        for q in range(a.kernel.nqp):
            T = build_transformation_matrix(rve, K, a.kernel.N[q], a.grads[0, q])
            parts.append(T)
            tangents.append(K)
            weights.append(a.detJw[0, q])
        return macro_element_stiffness(parts, tangents, weights, rve.volume), a

    def test_homogeneous_equals_single_scale(self):
        mat = homogeneous(law="linear", kinematics="small", E=100000, nu=0.2)
        rve = RveProblem(generate_structured(110.0, 110.0, 4, 4), mat)
        macro_mesh = generate_structured(800.0, 600.0, 1, 1)
        kh, a = self._kh(rve, macro_mesh, mat)
        k1 = element_tangent("quad4", macro_mesh.nodes[macro_mesh.elems[0]],
                             np.zeros(8), mat)
        npt.assert_allclose(kh, k1, rtol=1e-10)

    def test_symmetry(self):
        mat = two_phase(law="linear", kinematics="small")
        rve = RveProblem(mesh_from_phase_grid(checkerboard(4), 1.0), mat)
        macro_mesh = generate_structured(1000.0, 1000.0, 1, 1)
        kh, _ = self._kh(rve, macro_mesh, mat)
        assert np.abs(kh - kh.T).max() <= 1e-10 * np.abs(kh).max()

    def test_two_phase_bracketed_by_pure_phases(self):
        mesh = mesh_from_phase_grid(checkerboard(4), 1.0)
        macro_mesh = generate_structured(1000.0, 1000.0, 1, 1)
        mats = {
            "mix": two_phase(law="linear", kinematics="small"),
            "stiff": homogeneous(law="linear", kinematics="small", E=100000, nu=0.2),
            "soft": homogeneous(law="linear", kinematics="small", E=40000, nu=0.2),
        }
        kh = {}
        for name, m in mats.items():
            rve = RveProblem(
                type(mesh)(mesh.nodes.copy(), mesh.elems.copy(), mesh.kind,
                           mesh.phase.copy(), grid=mesh.grid), m)
            kh[name], _ = self._kh(rve, macro_mesh, m)
        rng = np.random.default_rng(12)
        for _ in range(20):
            x = rng.standard_normal(8)
            qm = x @ kh["mix"] @ x
            assert x @ kh["soft"] @ x - 1e-9 <= qm <= x @ kh["stiff"] @ x + 1e-9

    def test_kubc_stiffer_than_pbc(self):
        mesh = refine_uniform(mesh_from_phase_grid(checkerboard(4), 1.0))
        macro_mesh = generate_structured(1000.0, 1000.0, 1, 1)
        mat = two_phase(law="linear", kinematics="small")
        kh = {}
        for coupling in (PERIODIC, LINEAR_DISPLACEMENT):
            rve = RveProblem(
                type(mesh)(mesh.nodes.copy(), mesh.elems.copy(), mesh.kind,
                           mesh.phase.copy(), grid=mesh.grid), mat,
                coupling=coupling)
            kh[coupling], _ = self._kh(rve, macro_mesh, mat)
        rng = np.random.default_rng(13)
        for _ in range(20):
            x = rng.standard_normal(8)
            assert x @ kh[LINEAR_DISPLACEMENT] @ x >= x @ kh[PERIODIC] @ x - 1e-9

    def test_transfer_consistent_with_force_derivative(self):
        """T^T K T matches central differences of the homogenized element
        internal force at a converged heterogeneous state."""
        mat = two_phase(law="neo-hookean")
        micro = refine_uniform(mesh_from_phase_grid(checkerboard(4), 110.0))
        rve = RveProblem(micro, mat)
        macro_mesh = generate_structured(1000.0, 800.0, 1, 1)
        a = Assembler(macro_mesh, mat)
        elems = macro_mesh.elems
        rng = np.random.default_rng(21)
        d_el = 0.2 * rng.standard_normal(8)

        def point_data(d):
            de = d.reshape(-1, 2)[elems]
            u_qp = np.einsum("qn,enk->eqk", a.kernel.N, de)[0]
            H_qp = a.disp_gradients(d)[0]
            return u_qp, H_qp

        def element_force(d):
            u_qp, H_qp = point_data(d)
            Sv_all = np.zeros((1, a.kernel.nqp, 3))
            for q in range(a.kernel.nqp):
                s = rve.make_state(float(a.detJw[0, q]))
                rve.update_macro(s, u_qp[q], H_qp[q])
                s, info = solve_micro(rve, s, tol=1e-13, max_iter=30)
                _, Sv_all[0, q] = macro_stress(rve, s, info.fields)
            return a.force_from_stress(d, Sv_all)

        # stiffness at the converged base state, element-local dof order
        u_qp, H_qp = point_data(d_el)
        parts, tangents, weights = [], [], []
        for q in range(a.kernel.nqp):
            s = rve.make_state(float(a.detJw[0, q]))
            rve.update_macro(s, u_qp[q], H_qp[q])
            s, info = solve_micro(rve, s, tol=1e-13, max_iter=30)
            T = build_transformation_matrix(rve, info.K, a.kernel.N[q], a.grads[0, q])
            parts.append(T)
            tangents.append(info.K)
            weights.append(float(a.detJw[0, q]))
        kh = macro_element_stiffness(parts, tangents, weights, rve.volume)
        perm = a.edofs[0]  # element-local position -> global dof
        eta = 1e-6 * 1000.0
        fd = np.zeros((8, 8))
        for k in range(8):
            dp, dm = d_el.copy(), d_el.copy()
            dp[perm[k]] += eta
            dm[perm[k]] -= eta
            fd[:, k] = ((element_force(dp) - element_force(dm)) / (2 * eta))[perm]
        npt.assert_allclose(kh, fd, rtol=2e-3, atol=1e-3 * np.abs(kh).max())
